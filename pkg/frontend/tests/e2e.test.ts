/** @vitest-environment jsdom */
import { describe, expect, test } from "vitest";

import { ApiClient } from "../src/api.js";
import { DashboardPoller } from "../src/dashboard.js";
import { AnnotationSession } from "../src/session.js";
import { AnnotatorView } from "../src/view.js";
import { MockPacket, MockService } from "./mock_service.js";

const STATES = [
  "Road",
  "Center Stack",
  "Instrument Cluster",
  "Rearview Mirror",
  "Left",
  "Right",
];

function buildPackets(count: number): MockPacket[] {
  const packets: MockPacket[] = [];
  let frame = 100;
  let stateCursor = 0;
  for (let i = 0; i < count; i += 1) {
    const size = 2 + (i % 4);
    const frames: number[] = [];
    const truth: Record<number, string> = {};
    for (let j = 0; j < size; j += 1) {
      frames.push(frame);
      truth[frame] = STATES[stateCursor % STATES.length] as string;
      stateCursor += 1;
      frame += 1;
    }
    frame += 3;
    packets.push({ frames, reason: i === 0 ? "seed" : "unconfident_window", truth });
  }
  return packets;
}

function press(key: string): void {
  document.dispatchEvent(new KeyboardEvent("keydown", { key, bubbles: true, cancelable: true }));
}

async function until(pred: () => boolean): Promise<void> {
  for (let i = 0; i < 1000; i += 1) {
    if (pred()) return;
    await new Promise((r) => setTimeout(r, 2));
  }
  throw new Error("condition never satisfied");
}

function dash(id: string): string {
  return document.getElementById(id)?.textContent ?? "";
}

describe("scripted browser session", () => {
  test("drains a 20-packet queue by keyboard and mirrors final progress", async () => {
    const packets = buildPackets(20);
    const mock = new MockService(STATES, packets, 600);
    const api = new ApiClient("", mock.fetchLike());

    document.body.innerHTML = '<div id="app"></div>';
    const root = document.getElementById("app") as HTMLElement;
    const session = new AnnotationSession(api, STATES, {
      leaseSeconds: 120,
      clock: () => mock.now,
      delay: async () => {},
    });
    const dashboard = new DashboardPoller(api, 1000);
    const view = new AnnotatorView(root, {
      onSubmit: () => session.handleKey("Enter"),
      imageUrl: (link) => link,
    });
    session.onChange((snap) => view.renderSession(snap));
    dashboard.onChange((payload) => view.renderDashboard(payload));
    document.addEventListener("keydown", (event) => {
      if (session.handleKey(event.key)) event.preventDefault();
    });

    await dashboard.pollOnce();
    expect(dash("dash-state")).toBe("running");
    expect(dash("dash-manual")).toBe("0");

    session.start();
    const keysUsed = new Set<string>();
    let labeled = 0;
    while (labeled < packets.length) {
      await until(() => session.snapshot().phase === "labeling");
      const snap = session.snapshot();
      const cardEls = root.querySelectorAll<HTMLElement>(".frame-card");
      expect(cardEls).toHaveLength(snap.cards.length);

      if (labeled === 0) {
        // submit must stay disabled until every frame is selected
        const submit = document.getElementById("submit") as HTMLButtonElement;
        expect(submit.disabled).toBe(true);
        press(String(STATES.indexOf(mock.frameInfo(snap.cards[0]!.frameIndex).ground_truth!) + 1));
        expect(submit.disabled).toBe(true);
        expect(root.querySelector(".frame-card.selected")).not.toBeNull();
        expect(root.querySelectorAll(".frame-card .bars").length).toBeGreaterThan(0);
        expect(root.querySelectorAll(".frame-card .change").length).toBeGreaterThan(0);
        for (const card of snap.cards.slice(1)) {
          const key = String(STATES.indexOf(mock.frameInfo(card.frameIndex).ground_truth!) + 1);
          keysUsed.add(key);
          press(key);
        }
        keysUsed.add(String(STATES.indexOf(mock.frameInfo(snap.cards[0]!.frameIndex).ground_truth!) + 1));
        expect(submit.disabled).toBe(false);
      } else {
        for (const card of snap.cards) {
          const key = String(STATES.indexOf(mock.frameInfo(card.frameIndex).ground_truth!) + 1);
          keysUsed.add(key);
          press(key);
        }
      }
      labeled += 1;
      press("Enter");
      await until(() => {
        const phase = session.snapshot().phase;
        return phase === "drained" || (phase === "labeling" && session.snapshot().entry?.entry_id === labeled);
      });
    }

    await until(() => session.snapshot().phase === "drained");
    expect(mock.allCompleted).toBe(true);
    expect(document.getElementById("notice")?.textContent).toContain("drained");

    // keyboard-only labeling exercised every state key
    expect(keysUsed).toEqual(new Set(["1", "2", "3", "4", "5", "6"]));

    // every submitted label equals the oracle answer key
    mock.entries.forEach((entry, i) => {
      const expected: Record<string, string> = {};
      for (const [frame, name] of Object.entries(packets[i]!.truth)) expected[frame] = name;
      expect(entry.labels).toEqual(expected);
    });

    // final dashboard counters equal the service's own report
    const payload = await dashboard.pollOnce();
    expect(payload).toEqual(mock.progress());
    expect(dash("dash-state")).toBe(payload!.state);
    expect(dash("dash-pending")).toBe(String(payload!.pending_packets));
    expect(dash("dash-model")).toBe(String(payload!.model_version));
    expect(dash("dash-total")).toBe(String(payload!.total_frames));
    expect(dash("dash-manual")).toBe(String(payload!.manual_frames));
    expect(dash("dash-auto")).toBe(String(payload!.auto_frames));
    expect(dash("dash-reduction")).toBe(String(payload!.reduction_factor));
    expect(dash("dash-accuracy")).toBe(String(payload!.accuracy));
    expect(dash("dash-error")).toBe("n/a");
  });
});

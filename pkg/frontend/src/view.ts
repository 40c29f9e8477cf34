import { ProgressPayload } from "./types.js";
import { SessionSnapshot } from "./session.js";

export interface ViewHooks {
  onSubmit: () => void;
  imageUrl: (link: string) => string;
}

const show = (v: number | string | boolean | null): string =>
  v === null ? "n/a" : String(v);

/**
 * Renders session snapshots and progress payloads into a static skeleton.
 * Pure consumer: no state of its own beyond the DOM.
 */
export class AnnotatorView {
  private readonly root: HTMLElement;
  private readonly hooks: ViewHooks;

  constructor(root: HTMLElement, hooks: ViewHooks) {
    this.root = root;
    this.hooks = hooks;
    root.innerHTML = `
      <header>
        <h1>annotation queue</h1>
        <p id="status" role="status"></p>
      </header>
      <main>
        <section id="packet" aria-live="polite">
          <div id="packet-head" hidden>
            <span id="reason" class="badge"></span>
            <span id="entry-id"></span>
            <span id="lease"></span>
          </div>
          <p id="rejection" class="rejection" hidden></p>
          <div id="cards"></div>
          <p id="notice" hidden></p>
          <div id="controls" hidden>
            <button id="submit" type="button" disabled>submit</button>
            <span id="keys" class="hint"></span>
          </div>
        </section>
        <aside id="dashboard">
          <h2>progress</h2>
          <dl>
            <dt>state</dt><dd id="dash-state">n/a</dd>
            <dt>pending packets</dt><dd id="dash-pending">n/a</dd>
            <dt>model version</dt><dd id="dash-model">n/a</dd>
            <dt>total frames</dt><dd id="dash-total">n/a</dd>
            <dt>manual frames</dt><dd id="dash-manual">n/a</dd>
            <dt>auto frames</dt><dd id="dash-auto">n/a</dd>
            <dt>reduction factor</dt><dd id="dash-reduction">n/a</dd>
            <dt>accuracy</dt><dd id="dash-accuracy">n/a</dd>
            <dt>error</dt><dd id="dash-error">n/a</dd>
          </dl>
        </aside>
      </main>`;
    this.byId<HTMLButtonElement>("submit").addEventListener("click", hooks.onSubmit);
  }

  renderSession(snap: SessionSnapshot): void {
    const status = this.byId<HTMLParagraphElement>("status");
    const attempt = snap.attempt > 0 ? ` (attempt ${snap.attempt})` : "";
    status.textContent = `${snap.phase}: ${snap.statusNote}${attempt}`;
    status.dataset.phase = snap.phase;

    const head = this.byId<HTMLDivElement>("packet-head");
    const controls = this.byId<HTMLDivElement>("controls");
    const notice = this.byId<HTMLParagraphElement>("notice");
    const cards = this.byId<HTMLDivElement>("cards");
    const rejection = this.byId<HTMLParagraphElement>("rejection");

    const labeling = snap.phase === "labeling" || snap.phase === "submitting";
    head.hidden = !labeling;
    controls.hidden = !labeling;
    cards.hidden = !labeling;
    notice.hidden = labeling;

    if (!labeling) {
      cards.replaceChildren();
      rejection.hidden = true;
      notice.textContent =
        snap.phase === "drained"
          ? "all packets labeled; the queue is drained"
          : snap.statusNote;
      return;
    }

    if (snap.entry !== null) {
      this.byId<HTMLSpanElement>("reason").textContent = snap.entry.reason;
      this.byId<HTMLSpanElement>("entry-id").textContent = `entry ${snap.entry.entry_id}`;
    }
    this.byId<HTMLSpanElement>("lease").textContent =
      snap.leaseRemaining === null ? "" : `lease ${snap.leaseRemaining}s`;

    rejection.hidden = snap.rejection === null;
    if (snap.rejection !== null) {
      rejection.textContent = snap.rejection.message;
    }
    const flagged = new Set(snap.rejection?.frames ?? []);

    cards.replaceChildren(
      ...snap.cards.map((card, i) => {
        const el = document.createElement("article");
        el.className = "frame-card";
        el.dataset.frame = String(card.frameIndex);
        if (i === snap.focus) el.classList.add("focused");
        if (card.selected !== null) el.classList.add("selected");
        if (flagged.has(card.frameIndex)) el.classList.add("rejected");

        const title = document.createElement("h3");
        title.textContent = `frame ${card.frameIndex}`;
        el.append(title);

        const pick = document.createElement("p");
        pick.className = "pick";
        pick.textContent = card.selected ?? "unlabeled";
        el.append(pick);

        if (card.info?.image) {
          const img = document.createElement("img");
          img.src = this.hooks.imageUrl(card.info.image);
          img.alt = `frame ${card.frameIndex}`;
          el.append(img);
        }
        if (card.info?.class_probs) {
          const bars = document.createElement("div");
          bars.className = "bars";
          card.info.class_probs.forEach((p, k) => {
            const bar = document.createElement("div");
            bar.className = "bar";
            bar.style.width = `${(p * 100).toFixed(1)}%`;
            bar.title = `${snap.states[k] ?? k}: ${p.toFixed(3)}`;
            bars.append(bar);
          });
          el.append(bars);
        }
        if (card.info && card.info.change_score !== null) {
          const change = document.createElement("div");
          change.className = "change";
          const marker = document.createElement("span");
          marker.style.left = `${(card.info.change_score * 100).toFixed(1)}%`;
          marker.title = `change score ${card.info.change_score.toFixed(3)}`;
          change.append(marker);
          el.append(change);
        }
        return el;
      }),
    );

    const submit = this.byId<HTMLButtonElement>("submit");
    submit.disabled = !snap.canSubmit;
    this.byId<HTMLSpanElement>("keys").textContent = snap.states
      .map((name, i) => `${i + 1}=${name}`)
      .join("  ");
  }

  renderDashboard(p: ProgressPayload): void {
    this.byId("dash-state").textContent = show(p.state);
    this.byId("dash-pending").textContent = show(p.pending_packets);
    this.byId("dash-model").textContent = show(p.model_version);
    this.byId("dash-total").textContent = show(p.total_frames);
    this.byId("dash-manual").textContent = show(p.manual_frames);
    this.byId("dash-auto").textContent = show(p.auto_frames);
    this.byId("dash-reduction").textContent = show(p.reduction_factor);
    this.byId("dash-accuracy").textContent = show(p.accuracy);
    this.byId("dash-error").textContent = show(p.error);
  }

  private byId<T extends HTMLElement>(id: string): T {
    const el = this.root.querySelector<T>(`#${id}`);
    if (el === null) throw new Error(`missing element #${id}`);
    return el;
  }
}

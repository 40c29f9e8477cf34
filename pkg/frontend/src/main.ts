import { ApiClient } from "./api.js";
import { DashboardPoller } from "./dashboard.js";
import { AnnotationSession } from "./session.js";
import { AnnotatorView } from "./view.js";

// the queue service usually runs on another port; point at it with
// ?api=http://127.0.0.1:8765 (defaults to the page's own origin)
async function boot(): Promise<void> {
  const root = document.getElementById("app");
  if (root === null) throw new Error("missing #app container");
  const base = new URLSearchParams(location.search).get("api") ?? "";
  const api = new ApiClient(base, (url, init) => fetch(url, init));

  const first = await api.progress();
  const session = new AnnotationSession(api, first.states);
  const dashboard = new DashboardPoller(api, 1000);
  const view = new AnnotatorView(root, {
    onSubmit: () => session.handleKey("Enter"),
    imageUrl: (link) => api.imageUrl(link),
  });

  session.onChange((snap) => view.renderSession(snap));
  dashboard.onChange((payload) => view.renderDashboard(payload));
  document.addEventListener("keydown", (event) => {
    if (event.ctrlKey || event.metaKey || event.altKey) return;
    if (session.handleKey(event.key)) event.preventDefault();
  });
  setInterval(() => session.tick(), 250);

  view.renderDashboard(first);
  dashboard.start();
  session.start();
}

void boot().catch((err) => {
  const root = document.getElementById("app");
  if (root !== null) {
    root.textContent = `failed to reach the annotation service: ${err}`;
  }
});

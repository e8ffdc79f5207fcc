/** Browser bootstrap: wires the labeling flow and heatmap into the page. */

import { ApiClient, ApiFailure, StanceLabel } from "./api.js";
import { renderHeatmap, renderMissingReport } from "./heatmap.js";
import {
  LabelingSession,
  renderError,
  renderProgress,
  renderTask,
} from "./taskView.js";

function el(id: string): HTMLElement {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node;
}

export async function startApp(): Promise<void> {
  const params = new URLSearchParams(window.location.search);
  const annotator = params.get("annotator") ?? "anonymous";
  const round = params.get("round") === "contextual" ? "contextual" : "context_free";
  const project = params.get("project") ?? "default";
  const api = new ApiClient("", project);
  const session = new LabelingSession(api, annotator, round);

  const taskPane = el("task");
  const progressPane = el("progress");
  const errorPane = el("errors");

  async function showNext(): Promise<void> {
    errorPane.innerHTML = "";
    try {
      const task = await session.advance();
      taskPane.innerHTML = renderTask(task);
      for (const btn of taskPane.querySelectorAll<HTMLButtonElement>("button.stance")) {
        btn.addEventListener("click", () => submit(btn.dataset.label as StanceLabel));
      }
    } catch (err) {
      if (err instanceof ApiFailure && err.error.code === "no_tasks_remaining") {
        taskPane.innerHTML = `<p class="done">all ${round} tasks done</p>`;
      } else {
        errorPane.innerHTML = renderError("network", String(err));
      }
    }
    progressPane.innerHTML = renderProgress(session.completed, round);
  }

  async function submit(label: StanceLabel): Promise<void> {
    try {
      await session.label(label);
    } catch (err) {
      if (err instanceof ApiFailure) {
        errorPane.innerHTML = renderError(err.error.code, err.error.message);
      } else {
        errorPane.innerHTML = renderError("offline", "submission queued; will retry");
      }
    }
    await showNext();
  }

  const attributionTarget = params.get("attribution");
  if (attributionTarget) {
    const pane = el("attribution");
    try {
      pane.innerHTML = renderHeatmap(await api.attribution(attributionTarget));
    } catch {
      pane.innerHTML = renderMissingReport(attributionTarget);
    }
  }

  await showNext();
}

if (typeof document !== "undefined" && document.getElementById("task")) {
  startApp();
}

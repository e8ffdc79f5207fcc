/** Rendering and session state for the two-round labeling flow.
 *
 * Rendering functions return HTML strings so they are testable without a
 * browser; app.ts attaches them to the document.
 */

import { ApiClient, StanceLabel, TaskPayload } from "./api.js";

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

/** Ancestor blocks appear only in the contextual round, in sub-branch order. */
export function renderTask(task: TaskPayload): string {
  const ancestors =
    task.round === "contextual"
      ? task.ancestors
          .map(
            (a) =>
              `<blockquote class="ancestor" data-instance="${escapeHtml(a.instance_id)}">` +
              `${escapeHtml(a.text)}</blockquote>`,
          )
          .join("")
      : "";
  const buttons = task.labels
    .map(
      (l) =>
        `<button class="stance" data-label="${l}">${l}</button>`,
    )
    .join("");
  return (
    `<section class="task" data-round="${task.round}">` +
    `<div class="context">${ancestors}</div>` +
    `<p class="target">${escapeHtml(task.text)}</p>` +
    `<div class="buttons">${buttons}</div>` +
    `</section>`
  );
}

export function renderProgress(completed: number, round: string): string {
  return `<footer class="progress">round: ${escapeHtml(round)} · labeled: ${completed}</footer>`;
}

export function renderError(code: string, message: string): string {
  const friendly = code === "duplicate_submission" ? "already done" : message;
  return `<p class="error" data-code="${escapeHtml(code)}">${escapeHtml(friendly)}</p>`;
}

/** One annotator's pass through a round: fetch, label, advance, count. */
export class LabelingSession {
  completed = 0;
  current: TaskPayload | null = null;

  constructor(
    private readonly api: ApiClient,
    private readonly annotator: string,
    readonly round: "context_free" | "contextual",
  ) {}

  async advance(): Promise<TaskPayload> {
    this.current = await this.api.nextTask(this.annotator, this.round);
    return this.current;
  }

  async label(label: StanceLabel): Promise<void> {
    if (!this.current) throw new Error("no task on screen");
    await this.api.submitLabel({
      instance_id: this.current.instance_id,
      annotator_id: this.annotator,
      round: this.round,
      label,
    });
    this.completed += 1;
    this.current = null;
  }
}

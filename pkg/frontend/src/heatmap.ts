/** Keyword-contribution heatmap over ancestor words.
 *
 * Words are shaded by their contribution (share of the baseline confidence
 * removed by masking them); keywords, those at or above 20% of the baseline
 * confidence, get an outline. Hovering shows the exact value and the
 * instance the word came from.
 */

import { AttributionReport } from "./api.js";
import { escapeHtml } from "./taskView.js";

export const KEYWORD_THRESHOLD = 0.2;

/** Background alpha in [0, 1]: contribution relative to the largest one. */
export function shadeAlpha(contribution: number, maxContribution: number): number {
  if (maxContribution <= 0) return 0;
  return Math.max(0, Math.min(1, contribution / maxContribution));
}

export function renderHeatmap(report: AttributionReport): string {
  const maxC = Math.max(0, ...report.records.map((r) => r.contribution));
  const words = report.records
    .map((r) => {
      const alpha = shadeAlpha(r.contribution, maxC);
      const cls = r.is_keyword ? "word keyword" : "word";
      const title = `${r.word}: c=${r.contribution.toFixed(4)} (${r.instance_id})`;
      return (
        `<span class="${cls}" title="${escapeHtml(title)}" ` +
        `style="background: rgba(220, 60, 40, ${alpha.toFixed(3)})">` +
        `${escapeHtml(r.word)}</span>`
      );
    })
    .join(" ");
  const threshold = KEYWORD_THRESHOLD * report.confidence;
  const legend =
    `<p class="legend">predicted ${report.predicted_label} ` +
    `(confidence ${report.confidence.toFixed(3)}); ` +
    `outlined words are keywords: contribution ≥ 20% of confidence ` +
    `(≥ ${threshold.toFixed(3)})</p>`;
  return `<div class="heatmap">${words}${legend}</div>`;
}

export function renderMissingReport(instanceId: string): string {
  return (
    `<div class="heatmap empty">no attribution report for ` +
    `${escapeHtml(instanceId)}; run the attribute command first</div>`
  );
}

/**
 * Metrics history panel: polls the run-metrics endpoint and renders a
 * line chart of accuracy, f1, and mcc per retraining as an SVG string.
 */

import { ApiClient, IterationPoint } from "./api.js";

export const CHART_WIDTH = 420;
export const CHART_HEIGHT = 220;
const MARGIN = 30;

const SERIES: Array<{ key: "accuracy" | "f1" | "mcc"; color: string }> = [
  { key: "accuracy", color: "#1f77b4" },
  { key: "f1", color: "#2ca02c" },
  { key: "mcc", color: "#d62728" },
];

function xAt(index: number, total: number): number {
  if (total <= 1) return CHART_WIDTH / 2;
  return MARGIN + (index * (CHART_WIDTH - 2 * MARGIN)) / (total - 1);
}

function yAt(value: number): number {
  // mcc spans [-1, 1]; accuracy and f1 live in [0, 1] on the same axis
  const clamped = Math.max(-1, Math.min(1, value));
  return MARGIN + ((1 - clamped) * (CHART_HEIGHT - 2 * MARGIN)) / 2;
}

export function polylinePoints(values: number[]): string {
  return values.map((v, i) => `${xAt(i, values.length).toFixed(2)},${yAt(v).toFixed(2)}`).join(" ");
}

/** Empty history renders a placeholder instead of an empty chart. */
export function buildMetricsSvg(points: IterationPoint[]): string {
  if (points.length === 0) {
    return (
      `<svg xmlns="http://www.w3.org/2000/svg" width="${CHART_WIDTH}" height="${CHART_HEIGHT}">` +
      `<text x="${CHART_WIDTH / 2}" y="${CHART_HEIGHT / 2}" text-anchor="middle" class="placeholder">` +
      `no retrainings yet</text></svg>`
    );
  }
  const lines: string[] = [];
  for (const series of SERIES) {
    const values = points.map((p) => p[series.key]);
    lines.push(
      `<polyline fill="none" stroke="${series.color}" stroke-width="2" ` +
        `data-series="${series.key}" points="${polylinePoints(values)}" />`,
    );
    for (let i = 0; i < values.length; i++) {
      lines.push(
        `<circle cx="${xAt(i, values.length).toFixed(2)}" cy="${yAt(values[i]!).toFixed(2)}" r="3" ` +
          `fill="${series.color}" data-series="${series.key}" />`,
      );
    }
  }
  const legend = SERIES.map(
    (s, i) =>
      `<text x="${MARGIN + i * 90}" y="${CHART_HEIGHT - 8}" fill="${s.color}" class="legend">${s.key}</text>`,
  ).join("");
  return (
    `<svg xmlns="http://www.w3.org/2000/svg" width="${CHART_WIDTH}" height="${CHART_HEIGHT}" ` +
    `viewBox="0 0 ${CHART_WIDTH} ${CHART_HEIGHT}">${lines.join("")}${legend}</svg>`
  );
}

export class MetricsPanel {
  points: IterationPoint[] = [];
  strategy: string | null = null;
  lastError: string | null = null;

  constructor(private readonly client: ApiClient) {}

  async refresh(): Promise<void> {
    try {
      const run = await this.client.runMetrics();
      this.points = run.iterations;
      this.strategy = run.strategy;
      this.lastError = null;
    } catch (err) {
      this.lastError = String(err);
    }
  }

  svg(): string {
    return buildMetricsSvg(this.points);
  }
}

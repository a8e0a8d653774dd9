import { describe, expect, it } from "vitest";
import { ApiClient, IterationPoint } from "../src/api.js";
import { MetricsPanel, buildMetricsSvg, polylinePoints } from "../src/metrics.js";
import { fakeService } from "./helpers.js";

function point(iteration: number, accuracy: number, f1 = accuracy, mcc = 2 * accuracy - 1): IterationPoint {
  return { iteration, accuracy, f1, mcc, trainSize: 10 + iteration, poolSize: 30 - iteration };
}

function polylines(svg: string): Map<string, string> {
  const out = new Map<string, string>();
  const re = /data-series="(\w+)" points="([^"]*)"/g;
  let m: RegExpExecArray | null;
  while ((m = re.exec(svg)) !== null) out.set(m[1]!, m[2]!);
  return out;
}

describe("metrics chart", () => {
  it("renders a placeholder for an empty history", () => {
    const svg = buildMetricsSvg([]);
    expect(svg).toContain("no retrainings yet");
    expect(svg).not.toContain("polyline");
  });

  it("draws two points per metric after one retraining", () => {
    const svg = buildMetricsSvg([point(0, 0.8), point(1, 0.9)]);
    const lines = polylines(svg);
    expect([...lines.keys()].sort()).toEqual(["accuracy", "f1", "mcc"]);
    for (const pts of lines.values()) {
      expect(pts.split(" ").length).toBe(2);
    }
  });

  it("renders identical metrics as flat lines", () => {
    const svg = buildMetricsSvg([point(0, 0.75), point(1, 0.75), point(2, 0.75)]);
    for (const pts of polylines(svg).values()) {
      const ys = pts.split(" ").map((p) => p.split(",")[1]);
      expect(new Set(ys).size).toBe(1);
    }
  });

  it("separates the three series when their values differ", () => {
    const svg = buildMetricsSvg([point(0, 0.6, 0.5, 0.2), point(1, 0.9, 0.8, 0.7)]);
    const lines = polylines(svg);
    expect(lines.get("accuracy")).not.toBe(lines.get("f1"));
    expect(lines.get("f1")).not.toBe(lines.get("mcc"));
  });

  it("spaces points evenly across the chart width", () => {
    const pts = polylinePoints([0.5, 0.5, 0.5]).split(" ").map((p) => Number(p.split(",")[0]));
    expect(pts[1]! - pts[0]!).toBeCloseTo(pts[2]! - pts[1]!, 6);
    expect(pts[0]).toBeLessThan(pts[2]!);
  });
});

describe("metrics panel polling", () => {
  it("a refetch after a retrain adds one point", async () => {
    const iterations: Record<string, unknown>[] = [
      { iteration: 0, accuracy: 0.8, f1: 0.75, mcc: 0.5, train_size: 10, pool_size: 30 },
    ];
    const svc = fakeService({
      "GET /run/metrics": () => ({
        body: { strategy: "CAIPI", seed: 0, config_digest: "x", iterations, stop_reason: null, wall_clock: 1.0 },
      }),
    });
    const panel = new MetricsPanel(new ApiClient("http://svc.test", svc.fetch));
    await panel.refresh();
    expect(panel.points.length).toBe(1);
    iterations.push({ iteration: 1, accuracy: 0.9, f1: 0.85, mcc: 0.7, train_size: 15, pool_size: 25 });
    await panel.refresh();
    expect(panel.points.length).toBe(2);
    expect(panel.strategy).toBe("CAIPI");
    for (const pts of polylines(panel.svg()).values()) {
      expect(pts.split(" ").length).toBe(2);
    }
  });

  it("keeps the last good history when a poll fails", async () => {
    let up = true;
    const svc = fakeService({
      "GET /run/metrics": () => ({
        body: { strategy: "CAIPI", seed: 0, iterations: [
          { iteration: 0, accuracy: 0.8, f1: 0.75, mcc: 0.5, train_size: 10, pool_size: 30 },
        ], stop_reason: null },
      }),
    });
    const flaky = async (url: string, init?: RequestInit): Promise<Response> => {
      if (!up) throw new TypeError("network down");
      return svc.fetch(url, init);
    };
    const panel = new MetricsPanel(new ApiClient("http://svc.test", flaky));
    await panel.refresh();
    up = false;
    await panel.refresh();
    expect(panel.points.length).toBe(1);
    expect(panel.lastError).not.toBeNull();
  });
});

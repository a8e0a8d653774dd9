/**
 * End-to-end session against a live service spawned from the CLI:
 * generate a dataset, train a checkpoint, serve a CAIPI session, then
 * review, paint, submit, and retrain through the client modules only.
 */

import { afterAll, beforeAll, describe, expect, it } from "vitest";
import { execFileSync, spawn, ChildProcess } from "node:child_process";
import { mkdtempSync, rmSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { ApiClient } from "../src/api.js";
import { SessionStore } from "../src/state.js";
import { MetricsPanel, buildMetricsSvg } from "../src/metrics.js";

const PAINTED: Array<[number, number]> = [
  [2, 2], [4, 2], [6, 2], [8, 2], [10, 2],
  [2, 4], [4, 4], [6, 4], [8, 4], [10, 4],
];

let work: string;
let server: ChildProcess | null = null;
let serverLog = "";
let client: ApiClient;
let store: SessionStore;

function sleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}

async function until<T>(what: string, timeoutMs: number, probe: () => Promise<T | null>): Promise<T> {
  const deadline = Date.now() + timeoutMs;
  let lastErr: unknown = null;
  while (Date.now() < deadline) {
    try {
      const got = await probe();
      if (got !== null) return got;
    } catch (err) {
      lastErr = err;
    }
    await sleep(400);
  }
  throw new Error(`timed out waiting for ${what}: ${String(lastErr)}\nserver log:\n${serverLog}`);
}

beforeAll(async () => {
  work = mkdtempSync(join(tmpdir(), "studio-e2e-"));
  const data = join(work, "data");
  const ckpt = join(work, "scorer.npz");
  execFileSync("invrise", [
    "gen-data", "--out", data, "--n-ok", "20", "--n-no-seam", "6", "--n-nok", "20",
    "--side", "24", "--seed", "5", "--ratios", "0.4,0.2,0.2,0.2", "--backgrounds", "3",
  ], { stdio: "pipe", timeout: 120_000 });
  execFileSync("invrise", [
    "train", "--data", data, "--out", ckpt, "--side", "16", "--dtype", "float32",
    "--epochs", "3", "--patience", "2", "--seed", "1",
  ], { stdio: "pipe", timeout: 240_000 });

  server = spawn("invrise", [
    "serve", "--data", data, "--ckpt", ckpt, "--host", "127.0.0.1", "--port", "0",
    "--strategy", "CAIPI", "--interactions", "6", "--budget", "2", "--seed", "0",
    "--epochs", "2", "--patience", "1", "--batch-size", "8",
  ], { stdio: ["ignore", "pipe", "pipe"] });
  server.stdout!.on("data", (chunk: Buffer) => {
    serverLog += chunk.toString();
  });
  server.stderr!.on("data", (chunk: Buffer) => {
    serverLog += chunk.toString();
  });

  const base = await until("the serve banner", 120_000, async () => {
    const m = /serving on (http:\/\/[\w.]+:\d+)/.exec(serverLog);
    return m ? m[1]! : null;
  });
  client = new ApiClient(base);
  store = new SessionStore(client);
}, 300_000);

afterAll(() => {
  if (server !== null) server.kill("SIGTERM");
  rmSync(work, { recursive: true, force: true });
});

describe("live correction session", () => {
  it("renders the first query straight from the service", async () => {
    await until("the first pending query", 90_000, async () => {
      await store.refresh();
      return store.phase === "reviewing" ? true : null;
    });
    const query = store.query!;
    expect(query.instanceId).toBeTruthy();
    expect(["OK", "NOK"]).toContain(query.predictedLabel);
    expect(query.confidence).toBeGreaterThanOrEqual(0);
    expect(query.confidence).toBeLessThanOrEqual(1);
    expect(store.draft!.mask.width).toBe(24);
    const overlay = store.displayedImage();
    store.toggleOverlay();
    expect(store.displayedImage()).toBe(query.imagePng);
    expect(overlay).toBe(query.saliencyOverlayPng);
    store.toggleOverlay();
    expect(store.status!.trainSize).toBeGreaterThan(0);
  }, 120_000);

  it("delivers every painted pixel to the service and grows T by query plus refutations", async () => {
    const before = await client.status();
    const draft = store.draft!;
    draft.labelChoice = "NOK";
    draft.explanationVerdict = "correct";
    draft.brushRadius = 0;
    for (const [x, y] of PAINTED) draft.applyBrush(x, y);
    expect(draft.mask.count()).toBe(10);
    const payload = store.buildPayload();
    expect(payload.explanation_correct).toBe(false);
    expect(typeof payload.corrected_mask).toBe("string");

    // decode with the service's own reader: exactly the painted pixels, no more
    const probe = execFileSync("python3", ["-c", [
      "import base64, sys",
      "import numpy as np",
      "from invrise.imaging import decode_mask_png",
      "mask = decode_mask_png(base64.b64decode(sys.argv[1]))",
      "ys, xs = np.nonzero(mask.values)",
      "print(mask.count())",
      "print(';'.join(f'{x},{y}' for x, y in sorted(zip(xs.tolist(), ys.tolist()))))",
    ].join("\n"), payload.corrected_mask!], { encoding: "utf-8", timeout: 60_000 });
    const [countLine, pixelLine] = probe.trim().split("\n");
    expect(countLine).toBe("10");
    const xMajor = [...PAINTED].sort((a, b) => a[0] - b[0] || a[1] - b[1]);
    expect(pixelLine).toBe(xMajor.map(([x, y]) => `${x},${y}`).join(";"));

    await store.submit();
    expect(store.inlineError).toBeNull();
    // CAIPI moves the queried item and adds refutation_count=4 refutations
    await until("train size to grow by five", 90_000, async () => {
      const now = await client.status();
      return now.trainSize === before.trainSize + 5 ? true : null;
    });
  }, 180_000);

  it("appends one metrics point after a forced retrain and charts it", async () => {
    const panel = new MetricsPanel(client);
    await panel.refresh();
    const basePoints = panel.points.length;
    expect(basePoints).toBeGreaterThanOrEqual(1);

    await until("the retrain request to be accepted", 60_000, async () => {
      const result = await client.requestRetrain();
      if (result.kind === "ok") return true;
      if (result.kind === "error" && result.status === 409) return null; // feedback still in flight
      throw new Error(`retrain rejected: ${JSON.stringify(result)}`);
    });
    await until("the retrained metrics point", 180_000, async () => {
      await panel.refresh();
      return panel.points.length === basePoints + 1 ? true : null;
    });
    const svg = buildMetricsSvg(panel.points);
    const matches = [...svg.matchAll(/data-series="(\w+)" points="([^"]*)"/g)];
    expect(matches.map((m) => m[1]).sort()).toEqual(["accuracy", "f1", "mcc"]);
    for (const m of matches) {
      expect(m[2]!.split(" ").length).toBe(basePoints + 1);
    }
    for (const p of panel.points) {
      expect(p.accuracy).toBeGreaterThanOrEqual(0);
      expect(p.accuracy).toBeLessThanOrEqual(1);
    }
  }, 300_000);
});

/**
 * Typed client for the correction-service HTTP API.
 *
 * Session endpoints (next/feedback/retrain) share a single in-flight slot:
 * a second call while one is pending resolves to `blocked` instead of
 * issuing a request. Status and metrics reads are independent and never
 * blocked.
 */

export interface QueryView {
  instanceId: string;
  confidence: number;
  predictedLabel: "OK" | "NOK";
  imagePng: string;
  saliencyOverlayPng: string;
  nearHit?: string;
  nearMiss?: string;
  furthestHit?: string;
}

export interface LatestMetrics {
  accuracy: number;
  f1: number;
  mcc: number;
}

export interface StatusView {
  iteration: number;
  trainSize: number;
  poolSize: number;
  latestMetrics: LatestMetrics | null;
  pendingInstance: string | null;
  finished: boolean;
  stopReason: string | null;
}

export interface IterationPoint {
  iteration: number;
  accuracy: number;
  f1: number;
  mcc: number;
  trainSize: number;
  poolSize: number;
}

export interface RunMetrics {
  strategy: string;
  seed: number;
  iterations: IterationPoint[];
  stopReason: string | null;
}

export interface InstanceView {
  id: string;
  label: string;
  defectKind: string | null;
  side: number;
  imagePng: string;
  confirmedLabel: string | null;
}

export interface FeedbackPayload {
  prediction_correct: boolean;
  explanation_correct: boolean;
  corrected_label?: "OK" | "NOK";
  corrected_mask?: string; // base64 PNG at image resolution
}

export class ApiError extends Error {
  constructor(readonly status: number, message: string) {
    super(message);
    this.name = "ApiError";
  }
}

type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

function asRecord(value: unknown, what: string): Record<string, unknown> {
  if (typeof value !== "object" || value === null || Array.isArray(value)) {
    throw new Error(`malformed ${what}: expected an object`);
  }
  return value as Record<string, unknown>;
}

function num(obj: Record<string, unknown>, key: string): number {
  const v = obj[key];
  if (typeof v !== "number" || !Number.isFinite(v)) {
    throw new Error(`malformed response: ${key} should be a number`);
  }
  return v;
}

function str(obj: Record<string, unknown>, key: string): string {
  const v = obj[key];
  if (typeof v !== "string") {
    throw new Error(`malformed response: ${key} should be a string`);
  }
  return v;
}

function optStr(obj: Record<string, unknown>, key: string): string | undefined {
  const v = obj[key];
  return typeof v === "string" ? v : undefined;
}

function label(obj: Record<string, unknown>, key: string): "OK" | "NOK" {
  const v = str(obj, key);
  if (v !== "OK" && v !== "NOK") {
    throw new Error(`malformed response: ${key} should be OK or NOK, got ${v}`);
  }
  return v;
}

export function parseQueryView(raw: unknown): QueryView {
  const obj = asRecord(raw, "query view");
  const view: QueryView = {
    instanceId: str(obj, "instance_id"),
    confidence: num(obj, "confidence"),
    predictedLabel: label(obj, "predicted_label"),
    imagePng: str(obj, "image_png"),
    saliencyOverlayPng: str(obj, "saliency_overlay_png"),
  };
  const hit = optStr(obj, "near_hit");
  const miss = optStr(obj, "near_miss");
  const far = optStr(obj, "furthest_hit");
  if (hit !== undefined) view.nearHit = hit;
  if (miss !== undefined) view.nearMiss = miss;
  if (far !== undefined) view.furthestHit = far;
  return view;
}

export function parseStatus(raw: unknown): StatusView {
  const obj = asRecord(raw, "status");
  const metrics = obj["latest_metrics"];
  return {
    iteration: num(obj, "iteration"),
    trainSize: num(obj, "train_size"),
    poolSize: num(obj, "pool_size"),
    latestMetrics:
      metrics === null || metrics === undefined
        ? null
        : {
            accuracy: num(asRecord(metrics, "latest_metrics"), "accuracy"),
            f1: num(asRecord(metrics, "latest_metrics"), "f1"),
            mcc: num(asRecord(metrics, "latest_metrics"), "mcc"),
          },
    pendingInstance: optStr(obj, "pending_instance") ?? null,
    finished: obj["finished"] === true,
    stopReason: optStr(obj, "stop_reason") ?? null,
  };
}

export function parseRunMetrics(raw: unknown): RunMetrics {
  const obj = asRecord(raw, "run metrics");
  const rows = obj["iterations"];
  if (!Array.isArray(rows)) {
    throw new Error("malformed response: iterations should be an array");
  }
  return {
    strategy: str(obj, "strategy"),
    seed: num(obj, "seed"),
    stopReason: optStr(obj, "stop_reason") ?? null,
    iterations: rows.map((row) => {
      const r = asRecord(row, "iteration row");
      return {
        iteration: num(r, "iteration"),
        accuracy: num(r, "accuracy"),
        f1: num(r, "f1"),
        mcc: num(r, "mcc"),
        trainSize: num(r, "train_size"),
        poolSize: num(r, "pool_size"),
      };
    }),
  };
}

export function parseInstance(raw: unknown): InstanceView {
  const obj = asRecord(raw, "instance view");
  return {
    id: str(obj, "id"),
    label: str(obj, "label"),
    defectKind: optStr(obj, "defect_kind") ?? null,
    side: num(obj, "side"),
    imagePng: str(obj, "image_png"),
    confirmedLabel: optStr(obj, "confirmed_label") ?? null,
  };
}

export type SessionCall<T> =
  | { kind: "ok"; value: T }
  | { kind: "blocked" }
  | { kind: "error"; status: number; message: string };

export class ApiClient {
  private sessionBusy = false;

  constructor(
    readonly baseUrl: string,
    private readonly fetchImpl: FetchLike = (url, init) => fetch(url, init),
  ) {}

  get busy(): boolean {
    return this.sessionBusy;
  }

  private async request(path: string, init?: RequestInit): Promise<unknown> {
    let res: Response;
    try {
      res = await this.fetchImpl(this.baseUrl + path, init);
    } catch (err) {
      throw new ApiError(0, `service unreachable: ${String(err)}`);
    }
    const body = await res.text();
    let parsed: unknown = null;
    if (body) {
      try {
        parsed = JSON.parse(body);
      } catch {
        throw new ApiError(res.status, `non-JSON response from ${path}`);
      }
    }
    if (!res.ok) {
      const obj = typeof parsed === "object" && parsed !== null ? (parsed as Record<string, unknown>) : {};
      const message = typeof obj["error"] === "string" ? (obj["error"] as string) : `HTTP ${res.status}`;
      throw new ApiError(res.status, message);
    }
    return parsed;
  }

  /** Session-scoped call: only one may be in flight at a time. */
  private async session<T>(fn: () => Promise<T>): Promise<SessionCall<T>> {
    if (this.sessionBusy) return { kind: "blocked" };
    this.sessionBusy = true;
    try {
      return { kind: "ok", value: await fn() };
    } catch (err) {
      if (err instanceof ApiError) {
        return { kind: "error", status: err.status, message: err.message };
      }
      return { kind: "error", status: 0, message: String(err) };
    } finally {
      this.sessionBusy = false;
    }
  }

  nextQuery(): Promise<SessionCall<QueryView>> {
    return this.session(async () => parseQueryView(await this.request("/session/next")));
  }

  submitFeedback(payload: FeedbackPayload): Promise<SessionCall<{ instanceId: string }>> {
    return this.session(async () => {
      const raw = await this.request("/session/feedback", {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify(payload),
      });
      const obj = asRecord(raw, "feedback acknowledgment");
      return { instanceId: str(obj, "instance_id") };
    });
  }

  requestRetrain(): Promise<SessionCall<void>> {
    return this.session(async () => {
      await this.request("/session/retrain", { method: "POST" });
    });
  }

  /** Read-only; never enters the session slot. */
  async status(): Promise<StatusView> {
    return parseStatus(await this.request("/session/status"));
  }

  /** Read-only; never enters the session slot. */
  async runMetrics(): Promise<RunMetrics> {
    return parseRunMetrics(await this.request("/run/metrics"));
  }

  /** Read-only; never enters the session slot. */
  async instance(id: string): Promise<InstanceView> {
    return parseInstance(await this.request(`/instance/${encodeURIComponent(id)}`));
  }
}

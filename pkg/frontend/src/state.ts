/**
 * Client-side session state.
 *
 * The store never owns truth: everything displayed derives from the
 * service's GET endpoints, so reloading the page mid-session rebuilds the
 * same view. The only local scratch is the correction draft being edited,
 * which by design does not survive a reload.
 */

import { ApiClient, FeedbackPayload, QueryView, StatusView, SessionCall } from "./api.js";
import { MaskEditor, maskToBase64Png } from "./mask.js";

export type Phase = "loading" | "reviewing" | "submitting" | "finished" | "unreachable";

export type ExplanationVerdict = "accept" | "correct";

export interface NeighborRef {
  role: "near hit" | "near miss" | "furthest hit";
  instanceId: string;
}

function be32At(bytes: Uint8Array, offset: number): number {
  return ((bytes[offset]! << 24) | (bytes[offset + 1]! << 16) | (bytes[offset + 2]! << 8) | bytes[offset + 3]!) >>> 0;
}

export function base64ToBytes(b64: string): Uint8Array {
  const clean = b64.replace(/=+$/, "");
  const lookup = new Map<string, number>();
  const alphabet = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  for (let i = 0; i < alphabet.length; i++) lookup.set(alphabet[i]!, i);
  const out = new Uint8Array(Math.floor((clean.length * 3) / 4));
  let acc = 0;
  let bits = 0;
  let j = 0;
  for (const ch of clean) {
    const v = lookup.get(ch);
    if (v === undefined) throw new Error(`bad base64 character ${ch}`);
    acc = (acc << 6) | v;
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out[j++] = (acc >> bits) & 0xff;
    }
  }
  return out;
}

/** Width and height straight from a PNG's IHDR chunk. */
export function pngDimensions(png: Uint8Array): { width: number; height: number } {
  const sig = [0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a];
  for (let i = 0; i < sig.length; i++) {
    if (png[i] !== sig[i]) throw new Error("not a PNG");
  }
  return { width: be32At(png, 16), height: be32At(png, 20) };
}

export class CorrectionDraft {
  labelChoice: "OK" | "NOK" | null = null;
  explanationVerdict: ExplanationVerdict | null = null;
  readonly mask: MaskEditor;
  brushRadius = 2;
  eraser = false;

  constructor(width: number, height: number) {
    this.mask = new MaskEditor(width, height);
  }

  applyBrush(x: number, y: number): void {
    if (this.eraser) {
      this.mask.erase(x, y, this.brushRadius);
    } else {
      this.mask.paint(x, y, this.brushRadius);
    }
  }

  /** Correcting the explanation of a defect requires marking the defect. */
  get maskRequired(): boolean {
    return this.explanationVerdict === "correct" && this.labelChoice === "NOK";
  }

  get complete(): boolean {
    if (this.labelChoice === null || this.explanationVerdict === null) return false;
    if (this.maskRequired && this.mask.count() === 0) return false;
    return true;
  }
}

export interface SessionSnapshot {
  phase: Phase;
  query: QueryView | null;
  status: StatusView | null;
  overlayOn: boolean;
  inlineError: string | null;
  retryBanner: boolean;
}

export class SessionStore {
  phase: Phase = "loading";
  query: QueryView | null = null;
  status: StatusView | null = null;
  draft: CorrectionDraft | null = null;
  overlayOn = true;
  inlineError: string | null = null;
  retryBanner = false;
  private listeners: Array<() => void> = [];

  constructor(private readonly client: ApiClient) {}

  subscribe(fn: () => void): void {
    this.listeners.push(fn);
  }

  private emit(): void {
    for (const fn of this.listeners) fn();
  }

  snapshot(): SessionSnapshot {
    return {
      phase: this.phase,
      query: this.query,
      status: this.status,
      overlayOn: this.overlayOn,
      inlineError: this.inlineError,
      retryBanner: this.retryBanner,
    };
  }

  /** Pull status plus the pending query; safe to call on load and reload. */
  async refresh(): Promise<void> {
    try {
      this.status = await this.client.status();
    } catch {
      this.retryBanner = true;
      this.phase = this.query === null ? "unreachable" : this.phase;
      this.emit();
      return;
    }
    this.retryBanner = false;
    if (this.status.finished) {
      this.phase = "finished";
      this.query = null;
      this.draft = null;
      this.emit();
      return;
    }
    const result = await this.client.nextQuery();
    if (result.kind === "blocked") return;
    if (result.kind === "error") {
      if (result.status === 0) {
        this.retryBanner = true;
        this.phase = this.query === null ? "unreachable" : this.phase;
      } else {
        this.inlineError = result.message;
      }
      this.emit();
      return;
    }
    const incoming = result.value;
    if (this.query === null || this.query.instanceId !== incoming.instanceId) {
      const { width, height } = pngDimensions(base64ToBytes(incoming.imagePng));
      this.draft = new CorrectionDraft(width, height);
      this.inlineError = null;
    }
    this.query = incoming;
    this.phase = "reviewing";
    this.emit();
  }

  toggleOverlay(): void {
    this.overlayOn = !this.overlayOn;
    this.emit();
  }

  /** Base image is served separately from the overlay, so toggling is lossless. */
  displayedImage(): string | null {
    if (this.query === null) return null;
    return this.overlayOn ? this.query.saliencyOverlayPng : this.query.imagePng;
  }

  uncertaintyBanner(): string | null {
    if (this.query === null) return null;
    const c = this.query.confidence;
    if (Math.abs(c - 0.5) < 1e-9) return "maximal uncertainty";
    return null;
  }

  neighborPanel(): NeighborRef[] {
    if (this.query === null) return [];
    const refs: NeighborRef[] = [];
    if (this.query.nearHit !== undefined) refs.push({ role: "near hit", instanceId: this.query.nearHit });
    if (this.query.nearMiss !== undefined) refs.push({ role: "near miss", instanceId: this.query.nearMiss });
    if (this.query.furthestHit !== undefined) refs.push({ role: "furthest hit", instanceId: this.query.furthestHit });
    return refs;
  }

  get canSubmit(): boolean {
    return this.phase === "reviewing" && this.draft !== null && this.draft.complete;
  }

  buildPayload(): FeedbackPayload {
    if (this.query === null || this.draft === null || !this.draft.complete) {
      throw new Error("draft is not complete");
    }
    const predictionCorrect = this.draft.labelChoice === this.query.predictedLabel;
    const payload: FeedbackPayload = {
      prediction_correct: predictionCorrect,
      explanation_correct: this.draft.explanationVerdict === "accept",
    };
    if (!predictionCorrect) {
      payload.corrected_label = this.draft.labelChoice!;
    }
    if (this.draft.explanationVerdict === "correct" && this.draft.mask.count() > 0) {
      payload.corrected_mask = maskToBase64Png(this.draft.mask);
    }
    return payload;
  }

  /** No-op while a submit is already in flight or the draft is incomplete. */
  async submit(): Promise<void> {
    if (!this.canSubmit) return;
    this.phase = "submitting";
    this.emit();
    const payload = this.buildPayload();
    const result: SessionCall<{ instanceId: string }> = await this.client.submitFeedback(payload);
    if (result.kind === "blocked") {
      return;
    }
    if (result.kind === "error") {
      if (result.status === 0) {
        this.retryBanner = true;
      } else {
        this.inlineError = result.message;
      }
      this.phase = "reviewing";
      this.emit();
      return;
    }
    this.inlineError = null;
    await this.refresh();
  }

  async retrain(): Promise<void> {
    const result = await this.client.requestRetrain();
    if (result.kind === "error" && result.status !== 0) {
      this.inlineError = result.message;
      this.emit();
      return;
    }
    await this.refresh();
  }
}

/**
 * DOM binding for the session store and metrics panel. Kept thin on
 * purpose: every decision lives in state.ts/metrics.ts where it is
 * testable without a browser.
 */

import { ApiClient } from "./api.js";
import { SessionStore } from "./state.js";
import { MetricsPanel } from "./metrics.js";

function byId<T extends HTMLElement>(id: string): T {
  const el = document.getElementById(id);
  if (el === null) throw new Error(`missing element #${id}`);
  return el as T;
}

export function mount(client: ApiClient): void {
  const store = new SessionStore(client);
  const metrics = new MetricsPanel(client);

  const image = byId<HTMLImageElement>("query-image");
  const banner = byId<HTMLDivElement>("prediction-banner");
  const uncertainty = byId<HTMLDivElement>("uncertainty-banner");
  const neighbors = byId<HTMLDivElement>("neighbor-panel");
  const inlineError = byId<HTMLDivElement>("inline-error");
  const retryBanner = byId<HTMLDivElement>("retry-banner");
  const statusLine = byId<HTMLDivElement>("status-line");
  const chart = byId<HTMLDivElement>("metrics-chart");
  const submitBtn = byId<HTMLButtonElement>("submit-btn");
  const retrainBtn = byId<HTMLButtonElement>("retrain-btn");
  const overlayBtn = byId<HTMLButtonElement>("overlay-btn");
  const eraserBtn = byId<HTMLButtonElement>("eraser-btn");
  const radiusInput = byId<HTMLInputElement>("brush-radius");
  const maskCanvas = byId<HTMLCanvasElement>("mask-canvas");
  const labelOk = byId<HTMLInputElement>("label-ok");
  const labelNok = byId<HTMLInputElement>("label-nok");
  const explAccept = byId<HTMLInputElement>("expl-accept");
  const explCorrect = byId<HTMLInputElement>("expl-correct");

  function drawMask(): void {
    const draft = store.draft;
    const ctx = maskCanvas.getContext("2d");
    if (draft === null || ctx === null) return;
    maskCanvas.width = draft.mask.width;
    maskCanvas.height = draft.mask.height;
    ctx.clearRect(0, 0, maskCanvas.width, maskCanvas.height);
    ctx.fillStyle = "rgba(255, 64, 64, 0.6)";
    for (const [x, y] of draft.mask.pixels()) {
      ctx.fillRect(x, y, 1, 1);
    }
  }

  function render(): void {
    const snap = store.snapshot();
    retryBanner.hidden = !snap.retryBanner;
    inlineError.hidden = snap.inlineError === null;
    inlineError.textContent = snap.inlineError ?? "";
    submitBtn.disabled = !store.canSubmit;
    if (snap.status !== null) {
      statusLine.textContent =
        `iteration ${snap.status.iteration} | train ${snap.status.trainSize} | pool ${snap.status.poolSize}` +
        (snap.status.finished ? ` | finished (${snap.status.stopReason ?? "done"})` : "");
    }
    if (snap.phase === "finished") {
      banner.textContent = "session finished";
      return;
    }
    if (snap.query !== null) {
      const src = store.displayedImage();
      if (src !== null) image.src = `data:image/png;base64,${src}`;
      banner.textContent = `predicted ${snap.query.predictedLabel} (confidence ${snap.query.confidence.toFixed(3)})`;
      const flag = store.uncertaintyBanner();
      uncertainty.hidden = flag === null;
      uncertainty.textContent = flag ?? "";
      const refs = store.neighborPanel();
      neighbors.hidden = refs.length === 0;
      neighbors.replaceChildren(
        ...refs.map((ref) => {
          const cell = document.createElement("figure");
          const img = document.createElement("img");
          img.alt = `${ref.role} ${ref.instanceId}`;
          void client.instance(ref.instanceId).then((inst) => {
            img.src = `data:image/png;base64,${inst.imagePng}`;
            const caption = document.createElement("figcaption");
            caption.textContent = `${ref.role}: ${inst.confirmedLabel ?? inst.label}`;
            cell.appendChild(caption);
          });
          cell.appendChild(img);
          return cell;
        }),
      );
    }
    drawMask();
    chart.innerHTML = metrics.svg();
  }

  store.subscribe(render);

  overlayBtn.addEventListener("click", () => store.toggleOverlay());
  submitBtn.addEventListener("click", () => void store.submit());
  retrainBtn.addEventListener("click", () => void store.retrain());
  eraserBtn.addEventListener("click", () => {
    if (store.draft !== null) {
      store.draft.eraser = !store.draft.eraser;
      eraserBtn.classList.toggle("active", store.draft.eraser);
    }
  });
  radiusInput.addEventListener("input", () => {
    if (store.draft !== null) store.draft.brushRadius = Number(radiusInput.value);
  });
  labelOk.addEventListener("change", () => {
    if (store.draft !== null) store.draft.labelChoice = "OK";
    render();
  });
  labelNok.addEventListener("change", () => {
    if (store.draft !== null) store.draft.labelChoice = "NOK";
    render();
  });
  explAccept.addEventListener("change", () => {
    if (store.draft !== null) store.draft.explanationVerdict = "accept";
    render();
  });
  explCorrect.addEventListener("change", () => {
    if (store.draft !== null) store.draft.explanationVerdict = "correct";
    render();
  });

  let painting = false;
  function canvasPoint(ev: MouseEvent): [number, number] {
    const rect = maskCanvas.getBoundingClientRect();
    const x = ((ev.clientX - rect.left) / rect.width) * maskCanvas.width;
    const y = ((ev.clientY - rect.top) / rect.height) * maskCanvas.height;
    return [Math.floor(x), Math.floor(y)];
  }
  maskCanvas.addEventListener("mousedown", (ev) => {
    painting = true;
    const [x, y] = canvasPoint(ev);
    store.draft?.applyBrush(x, y);
    render();
  });
  maskCanvas.addEventListener("mousemove", (ev) => {
    if (!painting) return;
    const [x, y] = canvasPoint(ev);
    store.draft?.applyBrush(x, y);
    drawMask();
  });
  window.addEventListener("mouseup", () => {
    painting = false;
  });

  void store.refresh();
  void metrics.refresh().then(render);
  window.setInterval(() => {
    // metrics polling stays off the session slot
    void metrics.refresh().then(render);
  }, 5000);
}

"""HTTP correction service: one live session over the interactive loop.

A single writer thread drives the loop; every mutation enters through the
feedback mailbox.  HTTP handlers are concurrent readers over an immutable
snapshot that the loop swaps in after each state change, so serving requests
never blocks the loop outside the designated feedback point.
"""

from __future__ import annotations

import base64
import binascii
import json
import queue
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from .classifier import ConvNetScorer
from .imaging import decode_mask_png, encode_png
from .interaction import (
    Feedback,
    IterationRecord,
    LoopConfig,
    LoopState,
    _derive_seed,
    _evaluate,
    _training_pairs,
    oracle_feedback,
    select_query,
    step,
)
from .neighbors import (
    Codebook,
    CodebookEntry,
    NeighborNotFound,
    furthest_hit,
    near_hit,
    near_miss,
)
from .saliency import invrise, render_overlay, rise

__all__ = ["CorrectionService", "run_service"]

_SHUTDOWN = object()


def _png_b64(image) -> str:
    return base64.b64encode(encode_png(image)).decode("ascii")


class _RequestError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status


class CorrectionService:
    """Owns the loop thread, the mailbox, and the HTTP server.

    Exactly one session exists for the lifetime of the service; conflicting
    mutations (double feedback, feedback while retraining, anything after
    the session finished) are rejected with 409.
    """

    def __init__(
        self,
        instances,
        split,
        scorer,
        mask_set,
        config: LoopConfig,
        seed: int,
        backgrounds=(),
        scorer_factory=None,
        saliency_method: str = "InvRISE",
        host: str = "127.0.0.1",
        port: int = 8765,
    ):
        if config.strategy == "RandomAdd":
            raise ValueError("live sessions need a feedback-consuming strategy")
        self.config = config
        self.seed = seed
        self.host = host
        self.port = port
        self._mask_set = mask_set
        self._method = invrise if saliency_method == "InvRISE" else rise
        if scorer_factory is None:
            side, dtype = scorer.input_side, scorer.dtype
            scorer_factory = lambda s: ConvNetScorer(input_side=side, seed=s,
                                                     dtype=dtype)
        self._scorer_factory = scorer_factory

        byid = {i.id: i for i in instances}
        self._instances = byid
        self._test = [byid[i] for i in split.test]
        self._val_pairs = [(byid[i].image, byid[i].label)
                           for i in split.validation]
        self._state = LoopState(
            instances=byid,
            train_items=[(i, byid[i].label) for i in split.train],
            refutations=[],
            pool_ids=list(split.interactive),
            classifier=scorer,
            rng=np.random.default_rng(seed),
            backgrounds=tuple(backgrounds),
        )

        self._mailbox: queue.Queue = queue.Queue()
        self._cond = threading.Condition()
        # snapshot fields, all swapped under _cond
        self._pending: dict | None = None
        self._pending_side: int | None = None
        self._feedback_taken = False
        self._retrain_queued = False
        self._status: dict = {}
        self._run_payload: dict = {}
        self._confirmed_labels: dict[str, str] = {}
        self._finished = False
        self._stop_reason: str | None = None

        self._records: list[IterationRecord] = []
        self._t0 = time.time()
        self._sal_memo = None
        self._confirmed_codebook: Codebook | None = None
        self._snapshot_status()

        self._httpd: ThreadingHTTPServer | None = None
        self._loop_thread: threading.Thread | None = None

    # ------------------------------------------------------------------
    # lifecycle

    def start(self) -> None:
        handler = _make_handler(self)
        self._httpd = ThreadingHTTPServer((self.host, self.port), handler)
        self._httpd.daemon_threads = True
        self.port = self._httpd.server_address[1]
        self._loop_thread = threading.Thread(target=self._loop, daemon=True)
        self._loop_thread.start()
        threading.Thread(target=self._httpd.serve_forever, daemon=True).start()

    def serve_forever(self) -> None:
        if self._httpd is None:
            self.start()
        try:
            while self._loop_thread.is_alive():
                self._loop_thread.join(timeout=0.5)
            # session over; keep answering status/metrics requests
            while True:
                time.sleep(3600)
        except KeyboardInterrupt:
            pass
        finally:
            self.shutdown()

    def shutdown(self) -> None:
        self._mailbox.put(_SHUTDOWN)
        if self._httpd is not None:
            self._httpd.shutdown()
            self._httpd.server_close()
            self._httpd = None

    # ------------------------------------------------------------------
    # loop thread: the single writer

    def _explainer(self, classifier, image):
        memo = self._sal_memo
        if memo is not None and memo[0] is image and memo[1] is classifier:
            return memo[2]
        sal = self._method(image, classifier, self._mask_set)
        self._sal_memo = (image, classifier, sal)
        return sal

    def _rebuild_confirmed(self) -> None:
        """Retrieval table over instances whose labels are confirmed.

        Live sessions must only surface hit/miss neighbors among items with
        human-vouched labels: the initial training set plus everything that
        entered T through feedback.  Unlabeled pool items never appear.
        """
        state = self._state
        seen: dict[str, str] = {}
        for iid, label in state.train_items:
            seen.setdefault(iid, label)
        ids = list(seen)
        images = [state.instances[i].image for i in ids]
        if hasattr(state.classifier, "embed_batch"):
            vecs = state.classifier.embed_batch(images)
        else:
            vecs = [state.classifier.embed(img) for img in images]
        entries = tuple(
            CodebookEntry(iid, np.asarray(v, dtype=np.float64), seen[iid])
            for iid, v in zip(ids, vecs))
        self._confirmed_codebook = Codebook(
            entries=entries,
            classifier_version=int(getattr(state.classifier, "version", 0)))
        self._confirmed_labels = seen

    def _snapshot_status(self) -> None:
        state = self._state
        latest = self._records[-1] if self._records else None
        self._status = {
            "iteration": state.iteration,
            "train_size": state.train_size(),
            "pool_size": len(state.pool_ids),
            "latest_metrics": None if latest is None else {
                "accuracy": latest.accuracy,
                "f1": latest.f1,
                "mcc": latest.mcc,
            },
            "pending_instance": None if self._pending is None
            else self._pending["instance_id"],
            "finished": self._finished,
            "stop_reason": self._stop_reason,
        }
        self._run_payload = {
            "strategy": self.config.strategy,
            "seed": self.seed,
            "config_digest": self.config.digest(),
            "iterations": [
                {
                    "iteration": r.iteration,
                    "accuracy": r.accuracy,
                    "f1": r.f1,
                    "mcc": r.mcc,
                    "train_size": r.train_size,
                    "pool_size": r.pool_size,
                }
                for r in self._records
            ],
            "stop_reason": self._stop_reason,
        }

    def _publish_pending(self, view: dict | None, side: int | None) -> None:
        with self._cond:
            self._pending = view
            self._pending_side = side
            self._feedback_taken = False
            self._snapshot_status()
            self._cond.notify_all()

    def _refresh_snapshot(self) -> None:
        with self._cond:
            self._snapshot_status()
            self._cond.notify_all()

    def _finish(self, reason: str) -> None:
        with self._cond:
            self._finished = True
            self._stop_reason = reason
            self._pending = None
            self._pending_side = None
            self._snapshot_status()
            self._cond.notify_all()

    def _build_view(self, qid: str) -> dict:
        state = self._state
        inst = state.instances[qid]
        conf = state.pool_conf.get(qid)
        if conf is None:
            conf = float(state.classifier.predict(inst.image))
        predicted = "NOK" if conf >= 0.5 else "OK"
        sal = self._explainer(state.classifier, inst.image)
        view = {
            "instance_id": qid,
            "confidence": conf,
            "predicted_label": predicted,
            "image_png": _png_b64(inst.image),
            "saliency_overlay_png": _png_b64(render_overlay(inst.image, sal)),
        }
        emb = np.asarray(state.classifier.embed(inst.image), dtype=np.float64)
        book = self._confirmed_codebook
        for field, fn in (("near_hit", near_hit), ("near_miss", near_miss),
                          ("furthest_hit", furthest_hit)):
            try:
                view[field] = fn(book, emb, predicted)
            except NeighborNotFound:
                pass
        return view

    def _retrain(self, iteration: int, retrains: int) -> None:
        state = self._state
        scorer = self._scorer_factory(_derive_seed(self.seed, retrains))
        scorer.train(_training_pairs(state), self._val_pairs,
                     self.config.train)
        state.classifier = scorer
        state.refresh_pool_view()
        self._rebuild_confirmed()
        m = _evaluate(scorer, self._test)
        self._records.append(IterationRecord(
            iteration, m["accuracy"], m["f1"], m["mcc"],
            state.train_size(), len(state.pool_ids)))

    def _loop(self) -> None:
        state = self._state
        config = self.config
        state.refresh_pool_view()
        self._rebuild_confirmed()
        m = _evaluate(state.classifier, self._test)
        self._records.append(IterationRecord(
            0, m["accuracy"], m["f1"], m["mcc"],
            state.train_size(), len(state.pool_ids)))
        self._publish_pending(None, None)

        retrains = 0
        for iteration in range(1, config.iteration_budget + 1):
            state.iteration = iteration
            completed = 0
            close_block = False
            while completed < config.interactions_per_iteration:
                if len(state.pool_ids) == 0:
                    self._finish("pool_exhausted")
                    return
                qid = select_query(state.pool_ids, state.classifier,
                                   config.strategy, state.rng,
                                   state.pool_conf)
                view = self._build_view(qid)
                self._publish_pending(view,
                                      state.instances[qid].image.side)
                msg = self._mailbox.get()
                if msg is _SHUTDOWN:
                    return
                kind, payload = msg
                if kind == "retrain":
                    # drop the in-flight query and close the block early
                    with self._cond:
                        self._retrain_queued = False
                    self._publish_pending(None, None)
                    close_block = True
                    break
                feedback = payload
                self._publish_pending(None, None)
                step(state, config,
                     feedback_fn=_one_shot(feedback), explainer=self._explainer)
                self._refresh_snapshot()
                completed += 1
            if completed < config.interactions_per_iteration and not close_block:
                self._finish("pool_exhausted")
                return
            retrains += 1
            self._retrain(iteration, retrains)
            self._refresh_snapshot()
            if (config.accuracy_threshold is not None
                    and self._records[-1].accuracy
                    >= config.accuracy_threshold):
                self._finish("accuracy_threshold")
                return
        self._finish("budget")

    # ------------------------------------------------------------------
    # handler-facing readers and mailbox writers

    def wait_for_query(self, timeout: float = 60.0):
        deadline = time.monotonic() + timeout
        with self._cond:
            while (self._pending is None and not self._finished
                   and time.monotonic() < deadline):
                self._cond.wait(timeout=0.2)
            if self._pending is not None:
                return dict(self._pending)
            if self._finished:
                raise _RequestError(409, "session finished")
            raise _RequestError(503, "no query ready")

    def status(self) -> dict:
        with self._cond:
            return dict(self._status)

    def run_metrics(self) -> dict:
        with self._cond:
            payload = dict(self._run_payload)
        payload["wall_clock"] = time.time() - self._t0
        return payload

    def instance_view(self, iid: str) -> dict:
        inst = self._instances.get(iid)
        if inst is None:
            raise _RequestError(404, f"no instance {iid!r}")
        with self._cond:
            confirmed = self._confirmed_labels.get(iid)
        return {
            "id": inst.id,
            "label": inst.label,
            "defect_kind": inst.defect_kind,
            "generator_seed": inst.generator_seed,
            "side": inst.image.side,
            "image_png": _png_b64(inst.image),
            "confirmed_label": confirmed,
        }

    def submit_feedback(self, body: dict) -> dict:
        feedback, pending_id = self._validate_feedback(body)
        with self._cond:
            if self._finished:
                raise _RequestError(409, "session finished")
            if self._pending is None:
                raise _RequestError(409, "no query awaiting feedback")
            if self._pending["instance_id"] != pending_id:
                raise _RequestError(409, "query changed; refetch before submitting")
            if self._feedback_taken:
                raise _RequestError(409, "feedback already submitted for this query")
            self._feedback_taken = True
        self._mailbox.put(("feedback", feedback))
        return {"accepted": True, "instance_id": pending_id}

    def request_retrain(self) -> dict:
        with self._cond:
            if self._finished:
                raise _RequestError(409, "session finished")
            if self._retrain_queued:
                raise _RequestError(409, "retraining already requested")
            if self._feedback_taken:
                raise _RequestError(409, "feedback in flight; retrain after it lands")
            self._retrain_queued = True
        self._mailbox.put(("retrain", None))
        return {"accepted": True}

    def _validate_feedback(self, body: dict):
        if not isinstance(body, dict):
            raise _RequestError(400, "feedback body must be a JSON object")
        with self._cond:
            pending = self._pending
            side = self._pending_side
        if pending is None:
            raise _RequestError(409, "no query awaiting feedback")
        for field in ("prediction_correct", "explanation_correct"):
            if not isinstance(body.get(field), bool):
                raise _RequestError(400, f"{field} must be a boolean")
        corrected_label = body.get("corrected_label")
        mask = None
        raw_mask = body.get("corrected_mask")
        if raw_mask is not None:
            if not isinstance(raw_mask, str):
                raise _RequestError(400, "corrected_mask must be base64 PNG text")
            try:
                mask = decode_mask_png(base64.b64decode(raw_mask, validate=True))
            except (binascii.Error, ValueError, OSError) as exc:
                raise _RequestError(400, f"corrected_mask not a readable PNG: {exc}")
            if mask.side != side:
                raise _RequestError(
                    400, f"corrected_mask is {mask.side}x{mask.side}, "
                         f"expected {side}x{side}")
        if body["prediction_correct"] and corrected_label is None:
            # honor the confirmation: the item enters T with the label the
            # human just vouched for, not a label read behind their back
            corrected_label = pending["predicted_label"]
        try:
            feedback = Feedback(
                prediction_correct=body["prediction_correct"],
                explanation_correct=body["explanation_correct"],
                corrected_label=corrected_label,
                corrected_mask=mask,
                source="human",
            )
        except ValueError as exc:
            raise _RequestError(400, str(exc))
        return feedback, pending["instance_id"]


def _one_shot(feedback: Feedback):
    """First call answers with the human feedback; neighbor lookups that
    follow inside the same step fall back to the recorded labels."""
    used = []

    def fn(instance, confidence, saliency=None):
        if not used:
            used.append(True)
            return feedback
        return oracle_feedback(instance, confidence, saliency)

    fn.needs_explanation = True
    return fn


# ---------------------------------------------------------------------------
# HTTP plumbing

def _make_handler(service: CorrectionService):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):
            pass

        def _send(self, status: int, payload: dict) -> None:
            blob = json.dumps(payload).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(blob)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(blob)

        def do_OPTIONS(self):
            self.send_response(204)
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Methods",
                             "GET, POST, OPTIONS")
            self.send_header("Access-Control-Allow-Headers", "Content-Type")
            self.send_header("Content-Length", "0")
            self.end_headers()

        def _dispatch(self, fn):
            try:
                self._send(200, fn())
            except _RequestError as exc:
                self._send(exc.status, {"error": str(exc)})
            except Exception as exc:
                self._send(500, {"error": f"internal error: {exc}"})

        def do_GET(self):
            path = self.path.split("?", 1)[0]
            if path == "/session/next":
                self._dispatch(service.wait_for_query)
            elif path == "/session/status":
                self._dispatch(service.status)
            elif path == "/run/metrics":
                self._dispatch(service.run_metrics)
            elif path.startswith("/instance/"):
                iid = path[len("/instance/"):]
                self._dispatch(lambda: service.instance_view(iid))
            else:
                self._send(404, {"error": f"no route {path}"})

        def _read_body(self) -> dict:
            length = int(self.headers.get("Content-Length", 0))
            raw = self.rfile.read(length) if length else b""
            if not raw:
                return {}
            try:
                return json.loads(raw)
            except json.JSONDecodeError as exc:
                raise _RequestError(400, f"body is not JSON: {exc}")

        def do_POST(self):
            path = self.path.split("?", 1)[0]
            if path == "/session/feedback":
                self._dispatch(lambda: service.submit_feedback(self._read_body()))
            elif path == "/session/retrain":
                self._dispatch(lambda: service.request_retrain())
            else:
                self._send(404, {"error": f"no route {path}"})

    return Handler


def run_service(
    instances,
    split,
    scorer,
    backgrounds,
    mask_set,
    strategy: str,
    interactions_per_iteration: int,
    iteration_budget: int,
    train,
    seed: int,
    host: str = "127.0.0.1",
    port: int = 8765,
    saliency_method: str = "InvRISE",
) -> None:
    """Blocking entry point used by the command line."""
    config = LoopConfig(
        strategy=strategy,
        interactions_per_iteration=interactions_per_iteration,
        iteration_budget=iteration_budget,
        train=train,
    )
    service = CorrectionService(
        instances=instances,
        split=split,
        scorer=scorer,
        mask_set=mask_set,
        config=config,
        seed=seed,
        backgrounds=backgrounds,
        saliency_method=saliency_method,
        host=host,
        port=port,
    )
    service.start()
    print(f"serving on http://{service.host}:{service.port}", flush=True)
    service.serve_forever()

"""External-classifier bridge: newline-delimited JSON over child stdio.

Server side wraps a scorer checkpoint behind stdin/stdout (run as
`python -m invrise.bridge <checkpoint>`); client side exposes the
predict/embed contract of the in-process scorer for any conforming
child process.
"""

import argparse
import base64
import itertools
import json
import subprocess
import sys
import threading

import numpy as np

from .imaging import decode_png, encode_png

PROTOCOL_VERSION = 1
HELLO_NAME = "invrise-bridge"
DEFAULT_TIMEOUT = 30.0


class BridgeError(RuntimeError):
    """Bridge transport failure: timeout, dead process, refused request."""


class BridgeProtocolError(BridgeError):
    """Malformed traffic on the wire; carries an excerpt of the payload."""


def _excerpt(text: str, limit: int = 120) -> str:
    return text if len(text) <= limit else text[:limit] + "..."


# ---------------------------------------------------------------------------
# client

class ExternalClassifier:
    """Talks predict/embed to a child process over the bridge protocol.

    Requests carry a correlation id, so responses may arrive in any
    order; a reader thread routes them back to the caller.  The wrapped
    process must send the hello document on startup.
    """

    def __init__(self, command, timeout: float = DEFAULT_TIMEOUT):
        self.timeout = timeout
        self.version = 0
        self.embedding_len: int | None = None
        self._ids = itertools.count(1)
        self._cond = threading.Condition()
        self._results: dict[int, dict] = {}
        self._hello: dict | None = None
        self._broken: BridgeError | None = None
        self._proc = subprocess.Popen(
            command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
            text=True, bufsize=1)
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()
        self._await_handshake()

    # -- wire handling ------------------------------------------------------

    def _read_loop(self) -> None:
        for line in self._proc.stdout:
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError:
                self._fail(BridgeProtocolError(
                    f"unparseable bridge response: {_excerpt(line)}"))
                return
            if "hello" not in doc and "id" not in doc:
                self._fail(BridgeProtocolError(
                    f"response without id: {_excerpt(line)}"))
                return
            with self._cond:
                if "hello" in doc:
                    self._hello = doc
                else:
                    self._results[int(doc["id"])] = doc
                self._cond.notify_all()
        self._fail(BridgeError("bridge process closed its output"))

    def _fail(self, error: BridgeError) -> None:
        with self._cond:
            if self._broken is None:
                self._broken = error
            self._cond.notify_all()

    def _await_handshake(self) -> None:
        with self._cond:
            ok = self._cond.wait_for(
                lambda: self._hello is not None or self._broken is not None,
                timeout=self.timeout)
            if self._broken is not None:
                raise self._broken
            if not ok:
                raise BridgeError(
                    f"no handshake within {self.timeout:g} s")
            hello = self._hello
        if hello.get("hello") != HELLO_NAME:
            raise BridgeProtocolError(
                f"unexpected handshake: {_excerpt(json.dumps(hello))}")
        if hello.get("version") != PROTOCOL_VERSION:
            raise BridgeProtocolError(
                f"unsupported bridge version {hello.get('version')!r}")
        self.embedding_len = int(hello["embedding_len"])

    def _send(self, op: str, image) -> int:
        rid = next(self._ids)
        doc = {"id": rid, "op": op,
               "png": base64.b64encode(encode_png(image)).decode("ascii")}
        line = json.dumps(doc) + "\n"
        with self._cond:
            if self._broken is not None:
                raise self._broken
        try:
            self._proc.stdin.write(line)
            self._proc.stdin.flush()
        except (BrokenPipeError, ValueError, OSError) as exc:
            raise BridgeError(f"bridge process unreachable: {exc}") from exc
        return rid

    def _collect(self, rid: int) -> dict:
        with self._cond:
            ok = self._cond.wait_for(
                lambda: rid in self._results or self._broken is not None,
                timeout=self.timeout)
            if rid in self._results:
                doc = self._results.pop(rid)
            elif self._broken is not None:
                raise self._broken
            elif not ok:
                raise BridgeError(
                    f"no response for request {rid} within {self.timeout:g} s")
        if "error" in doc:
            raise BridgeError(f"bridge refused request {rid}: {doc['error']}")
        return doc

    # -- classifier contract ------------------------------------------------

    def predict(self, image) -> float:
        doc = self._collect(self._send("predict", image))
        if "confidence" not in doc:
            raise BridgeProtocolError(
                f"predict response without confidence: "
                f"{_excerpt(json.dumps(doc))}")
        return float(doc["confidence"])

    def embed(self, image) -> np.ndarray:
        doc = self._collect(self._send("embed", image))
        if "embedding" not in doc:
            raise BridgeProtocolError(
                f"embed response without embedding: "
                f"{_excerpt(json.dumps(doc))}")
        vec = np.asarray(doc["embedding"], dtype=np.float64)
        if vec.shape != (self.embedding_len,):
            raise BridgeProtocolError(
                f"embedding length {vec.size}, handshake promised "
                f"{self.embedding_len}")
        return vec

    def predict_batch(self, images) -> np.ndarray:
        # pipelined: send everything, then collect in request order
        rids = [self._send("predict", img) for img in images]
        out = np.zeros(len(rids))
        for i, rid in enumerate(rids):
            doc = self._collect(rid)
            if "confidence" not in doc:
                raise BridgeProtocolError(
                    f"predict response without confidence: "
                    f"{_excerpt(json.dumps(doc))}")
            out[i] = float(doc["confidence"])
        return out

    def embed_batch(self, images) -> np.ndarray:
        rids = [self._send("embed", img) for img in images]
        if not rids:
            return np.zeros((0, self.embedding_len or 0))
        return np.stack([self._collect_embedding(r) for r in rids])

    def _collect_embedding(self, rid: int) -> np.ndarray:
        doc = self._collect(rid)
        if "embedding" not in doc:
            raise BridgeProtocolError(
                f"embed response without embedding: "
                f"{_excerpt(json.dumps(doc))}")
        return np.asarray(doc["embedding"], dtype=np.float64)

    # -- lifecycle ----------------------------------------------------------

    def close(self) -> None:
        proc = self._proc
        if proc.stdin and not proc.stdin.closed:
            try:
                proc.stdin.close()
            except OSError:
                pass
        try:
            proc.wait(timeout=2.0)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.wait()

    def __enter__(self) -> "ExternalClassifier":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def bridge_for_checkpoint(path, timeout: float = DEFAULT_TIMEOUT):
    """Client for the built-in scorer served from a checkpoint file."""
    cmd = [sys.executable, "-m", "invrise.bridge", str(path)]
    return ExternalClassifier(cmd, timeout=timeout)


# ---------------------------------------------------------------------------
# server

def _serve(scorer, stdin, stdout) -> int:
    hello = {"hello": HELLO_NAME, "version": PROTOCOL_VERSION,
             "embedding_len": scorer.embedding_len}
    stdout.write(json.dumps(hello) + "\n")
    stdout.flush()
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        try:
            req = json.loads(line)
            rid = int(req["id"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError):
            stdout.write(json.dumps(
                {"error": f"bad request: {_excerpt(line)}"}) + "\n")
            stdout.flush()
            continue
        try:
            image = decode_png(base64.b64decode(req["png"]))
            if req["op"] == "predict":
                reply = {"id": rid, "confidence": scorer.predict(image)}
            elif req["op"] == "embed":
                reply = {"id": rid,
                         "embedding": [float(v) for v in scorer.embed(image)]}
            else:
                reply = {"id": rid, "error": f"unknown op {req['op']!r}"}
        except Exception as exc:  # noqa: BLE001 - reported to the peer
            reply = {"id": rid, "error": str(exc)}
        stdout.write(json.dumps(reply) + "\n")
        stdout.flush()
    return 0


def main(argv=None) -> int:
    from .classifier import ConvNetScorer

    parser = argparse.ArgumentParser(
        prog="invrise.bridge",
        description="Serve a scorer checkpoint over the stdio bridge")
    parser.add_argument("checkpoint", help="scorer checkpoint file")
    args = parser.parse_args(argv)
    scorer = ConvNetScorer.load_checkpoint(args.checkpoint)
    return _serve(scorer, sys.stdin, sys.stdout)


if __name__ == "__main__":
    raise SystemExit(main())

"""Built-in trainable scorer: a small conv net with hand-written backprop.

Architecture: two 3x3 conv stages (8 then 16 maps, rectified, 2x2 average
pooling after each), global average pooling, a hidden linear stage of
width 32 whose post-activation vector is the embedding, and one logistic
output unit giving P(NOK).  Trained with SGD + momentum on binary
cross-entropy; all updates run in a fixed order so training is
bit-reproducible for a given seed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imaging import Image, resize

__all__ = [
    "TrainConfig",
    "EpochRecord",
    "TrainLog",
    "ConvNetScorer",
    "gradient_check",
    "CHECKPOINT_MAGIC",
]

NOK_LABEL = "NOK"

CHECKPOINT_MAGIC = b"IVRSNET1"

# Input conditioning: images are rescaled around their own mean so the
# per-image brightness offset (a rank-1 direction that otherwise dominates
# early SGD) is attenuated relative to local structure.  Zero input stays
# zero and constant images stay mutually distinct (a -> BRIGHTNESS_GAIN*a).
CONTRAST_GAIN = 32.0
BRIGHTNESS_GAIN = 2.0

_DTYPE_CODES = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    momentum: float = 0.9
    patience: int = 10
    max_epochs: int = 50
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.learning_rate >= 0.0:
            raise ValueError("learning_rate must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.patience < 1 or self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("patience, max_epochs, batch_size must be >= 1")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float | None
    val_accuracy: float | None


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    stopped_early: bool = False
    best_epoch: int | None = None


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def _label_to_target(label) -> float:
    if isinstance(label, str):
        return 1.0 if label == NOK_LABEL else 0.0
    return float(label)


class ConvNetScorer:
    """Trainable P(NOK) scorer exposing predict / embed / train / checkpoints."""

    PARAM_NAMES = (
        "conv1_w", "conv1_b", "conv2_w", "conv2_b",
        "fc_w", "fc_b", "out_w", "out_b",
    )

    def __init__(
        self,
        input_side: int = 64,
        channels: int = 1,
        embedding_len: int = 32,
        seed: int = 0,
        dtype=np.float64,
    ) -> None:
        if input_side < 8 or input_side % 4 != 0:
            raise ValueError("input_side must be a multiple of 4, >= 8")
        if channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        self.input_side = input_side
        self.channels = channels
        self.embedding_len = embedding_len
        self.dtype = np.dtype(dtype)
        if self.dtype not in _DTYPE_CODES:
            raise ValueError("dtype must be float32 or float64")
        self.version = 0
        rng = np.random.default_rng(seed)
        e = embedding_len
        self.params: dict[str, np.ndarray] = {
            "conv1_w": self._glorot(rng, (8, channels, 3, 3), channels * 9, 8 * 9),
            "conv1_b": np.zeros(8, dtype=self.dtype),
            "conv2_w": self._glorot(rng, (16, 8, 3, 3), 8 * 9, 16 * 9),
            "conv2_b": np.zeros(16, dtype=self.dtype),
            "fc_w": self._glorot(rng, (e, 16), 16, e),
            "fc_b": np.zeros(e, dtype=self.dtype),
            "out_w": self._glorot(rng, (e,), e, 1),
            "out_b": np.zeros(1, dtype=self.dtype),
        }

    def _glorot(self, rng, shape, fan_in, fan_out) -> np.ndarray:
        a = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-a, a, size=shape).astype(self.dtype)

    # -- input preparation --------------------------------------------------

    def prepare(self, image: Image) -> np.ndarray:
        """Image -> (H, W, C) array at the configured side and channel count."""
        if image.side != self.input_side:
            image = resize(image, self.input_side)
        p = image.pixels
        if image.channels != self.channels:
            p = p.mean(axis=2, keepdims=True) if self.channels == 1 else np.repeat(p, 3, axis=2)
        m = p.mean()
        p = (p - m) * CONTRAST_GAIN + m * BRIGHTNESS_GAIN
        return np.ascontiguousarray(p, dtype=self.dtype)

    def _stack(self, images) -> np.ndarray:
        return np.stack([self.prepare(img) for img in images])

    # -- forward ------------------------------------------------------------
    # All activations use channels-last layout (B, H, W, C) or its flat
    # (B*H*W, C) form so the unit axis stays contiguous through every
    # strided step; convolution weights keep the (F, C, 3, 3) layout in
    # `params` (checkpoint stability) and are repacked per pass.

    @staticmethod
    def _im2col(x: np.ndarray) -> np.ndarray:
        # 3x3 windows with pad 1: (B, H, W, C) -> (B*H*W, 9*C), taps ordered (ky, kx, c)
        b, h, w, c = x.shape
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        win = sliding_window_view(xp, (3, 3), axis=(1, 2))
        return win.transpose(0, 1, 2, 4, 5, 3).reshape(b * h * w, 9 * c)

    @staticmethod
    def _pack(w: np.ndarray) -> np.ndarray:
        # (F, C, 3, 3) -> (9*C, F) matching _im2col tap order
        f, c = w.shape[0], w.shape[1]
        return w.transpose(2, 3, 1, 0).reshape(9 * c, f)

    @staticmethod
    def _unpack(gw: np.ndarray, like: np.ndarray) -> np.ndarray:
        # (F, 9*C) gradient back to the (F, C, 3, 3) parameter layout
        f, c = like.shape[0], like.shape[1]
        return np.ascontiguousarray(gw.reshape(f, 3, 3, c).transpose(0, 3, 1, 2))

    @staticmethod
    def _pool2(x: np.ndarray) -> np.ndarray:
        b, h, w, c = x.shape
        v = x.reshape(b, h // 2, 2, w // 2, 2, c)
        out = v[:, :, 0, :, 0, :] + v[:, :, 0, :, 1, :]
        out += v[:, :, 1, :, 0, :]
        out += v[:, :, 1, :, 1, :]
        out *= 0.25
        return out

    @staticmethod
    def _unpool2(d: np.ndarray) -> np.ndarray:
        # gradient of 2x2 mean pooling: spread evenly
        b, h, w, c = d.shape
        out = np.empty((b, h * 2, w * 2, c), dtype=d.dtype)
        view = out.reshape(b, h, 2, w, 2, c)
        v = 0.25 * d
        view[:, :, 0, :, 0, :] = v
        view[:, :, 0, :, 1, :] = v
        view[:, :, 1, :, 0, :] = v
        view[:, :, 1, :, 1, :] = v
        return out

    def _forward(self, x: np.ndarray, keep: bool = False):
        p = self.params
        b, h, w, _ = x.shape
        h2, w2 = h // 2, w // 2
        cols1 = self._im2col(x)
        pre1 = cols1 @ self._pack(p["conv1_w"])
        pre1 += p["conv1_b"]
        act1 = np.maximum(pre1, 0.0)
        pool1 = self._pool2(act1.reshape(b, h, w, 8))
        cols2 = self._im2col(pool1)
        pre2 = cols2 @ self._pack(p["conv2_w"])
        pre2 += p["conv2_b"]
        act2 = np.maximum(pre2, 0.0)
        pool2 = self._pool2(act2.reshape(b, h2, w2, 16))
        gap = pool2.mean(axis=(1, 2))
        fc_pre = gap @ p["fc_w"].T + p["fc_b"]
        emb = np.maximum(fc_pre, 0.0)
        z = emb @ p["out_w"] + p["out_b"][0]
        if not keep:
            return z, emb
        cache = dict(dims=(b, h, w), cols1=cols1, pre1=pre1, cols2=cols2,
                     pre2=pre2, pool2=pool2, gap=gap, fc_pre=fc_pre, emb=emb)
        return z, emb, cache

    def _backward(self, dz: np.ndarray, cache: dict) -> dict[str, np.ndarray]:
        p = self.params
        b, h, w = cache["dims"]
        h2, w2 = h // 2, w // 2
        h4, w4 = h2 // 2, w2 // 2
        emb, gap, fc_pre = cache["emb"], cache["gap"], cache["fc_pre"]
        grads: dict[str, np.ndarray] = {}
        grads["out_w"] = emb.T @ dz
        grads["out_b"] = np.array([dz.sum()], dtype=self.dtype)
        demb = np.outer(dz, p["out_w"])
        dfc_pre = demb * (fc_pre > 0)
        grads["fc_w"] = dfc_pre.T @ gap
        grads["fc_b"] = dfc_pre.sum(axis=0)
        dgap = dfc_pre @ p["fc_w"]

        dpool2 = np.broadcast_to((dgap / (h4 * w4))[:, None, None, :], (b, h4, w4, 16))
        dpre2 = self._unpool2(dpool2).reshape(b * h2 * w2, 16)
        dpre2 *= cache["pre2"] > 0
        grads["conv2_w"] = self._unpack(dpre2.T @ cache["cols2"], p["conv2_w"])
        grads["conv2_b"] = dpre2.sum(axis=0)
        dcols2 = dpre2 @ self._pack(p["conv2_w"]).T
        dpool1 = self._col2im(dcols2, (b, h2, w2, 8))
        dpre1 = self._unpool2(dpool1).reshape(b * h * w, 8)
        dpre1 *= cache["pre1"] > 0
        grads["conv1_w"] = self._unpack(dpre1.T @ cache["cols1"], p["conv1_w"])
        grads["conv1_b"] = dpre1.sum(axis=0)
        return grads

    def _col2im(self, dcols: np.ndarray, x_shape: tuple) -> np.ndarray:
        b, h, w, c = x_shape
        d = dcols.reshape(b, h, w, 3, 3, c)
        dxp = np.zeros((b, h + 2, w + 2, c), dtype=self.dtype)
        for ky in range(3):
            for kx in range(3):
                dxp[:, ky : ky + h, kx : kx + w, :] += d[:, :, :, ky, kx, :]
        return dxp[:, 1 : h + 1, 1 : w + 1, :]

    # -- public queries -----------------------------------------------------

    def predict_prepared(self, x: np.ndarray) -> np.ndarray:
        z, _ = self._forward(x.astype(self.dtype, copy=False))
        return _sigmoid(z)

    def predict(self, image: Image) -> float:
        return float(self.predict_prepared(self.prepare(image)[None])[0])

    def predict_batch(self, images) -> np.ndarray:
        if len(images) == 0:
            return np.zeros(0)
        return self.predict_prepared(self._stack(images))

    def embed(self, image: Image) -> np.ndarray:
        _, emb = self._forward(self.prepare(image)[None])
        return emb[0].astype(np.float64)

    def embed_batch(self, images) -> np.ndarray:
        if len(images) == 0:
            return np.zeros((0, self.embedding_len))
        _, emb = self._forward(self._stack(images))
        return emb.astype(np.float64)

    # -- training -----------------------------------------------------------

    def _loss_and_grads(self, xb: np.ndarray, yb: np.ndarray):
        z, _, cache = self._forward(xb, keep=True)
        loss_each = _softplus(z) - yb * z
        correct = int(((z >= 0.0) == (yb >= 0.5)).sum())
        dz = (_sigmoid(z) - yb) / len(yb)
        grads = self._backward(dz.astype(self.dtype), cache)
        return float(loss_each.sum()), correct, grads

    def _eval_loss(self, x: np.ndarray, y: np.ndarray, batch_size: int) -> tuple[float, float]:
        total = 0.0
        correct = 0
        for at in range(0, len(y), batch_size):
            z, _ = self._forward(x[at : at + batch_size])
            yb = y[at : at + batch_size]
            total += float((_softplus(z) - yb * z).sum())
            correct += int(((z >= 0.0) == (yb >= 0.5)).sum())
        return total / len(y), correct / len(y)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k in self.PARAM_NAMES:
            self.params[k] = snap[k].copy()

    def train(self, train_pairs, val_pairs, config: TrainConfig) -> TrainLog:
        """Fit on (image, label) pairs; labels are "OK"/"NOK" or 0/1.

        Early stopping watches validation loss with the configured
        patience; the best-validation parameters are restored afterwards.
        An empty validation set disables both.
        """
        if len(train_pairs) == 0:
            raise ValueError("training set must be nonempty")
        log = TrainLog()
        x = self._stack([img for img, _ in train_pairs])
        y = np.array([_label_to_target(lbl) for _, lbl in train_pairs], dtype=self.dtype)
        if len(np.unique(y)) < 2:
            log.warnings.append("training set contains a single class")
        has_val = len(val_pairs) > 0
        if has_val:
            xv = self._stack([img for img, _ in val_pairs])
            yv = np.array([_label_to_target(lbl) for _, lbl in val_pairs], dtype=self.dtype)
        rng = np.random.default_rng(config.seed)
        velocity = {k: np.zeros_like(v) for k, v in self.params.items()}
        best_loss = np.inf
        best_snap = self.snapshot()
        best_epoch = None
        since_best = 0
        n = len(y)
        for epoch in range(config.max_epochs):
            perm = rng.permutation(n)
            loss_sum = 0.0
            correct = 0
            for at in range(0, n, config.batch_size):
                idx = perm[at : at + config.batch_size]
                bl, bc, grads = self._loss_and_grads(x[idx], y[idx])
                loss_sum += bl
                correct += bc
                for name in self.PARAM_NAMES:
                    v = velocity[name]
                    v *= config.momentum
                    v -= config.learning_rate * grads[name]
                    self.params[name] += v
            val_loss = val_acc = None
            if has_val:
                val_loss, val_acc = self._eval_loss(xv, yv, config.batch_size)
            log.epochs.append(
                EpochRecord(epoch, loss_sum / n, correct / n, val_loss, val_acc)
            )
            if has_val:
                if val_loss < best_loss:
                    best_loss = val_loss
                    best_snap = self.snapshot()
                    best_epoch = epoch
                    since_best = 0
                else:
                    since_best += 1
                    if since_best >= config.patience:
                        log.stopped_early = True
                        break
        if has_val:
            self.restore(best_snap)
            log.best_epoch = best_epoch
        self.version += 1
        return log

    # -- checkpoints ---------------------------------------------------------

    def save_checkpoint(self, path) -> None:
        """Versioned binary: magic, header, then parameters as little-endian f64."""
        with open(Path(path), "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(
                struct.pack(
                    "<IIIIII", 1, self.input_side, self.channels,
                    self.embedding_len, self.version, _DTYPE_CODES[self.dtype],
                )
            )
            for name in self.PARAM_NAMES:
                arr = self.params[name].astype("<f8")
                fh.write(arr.tobytes())

    @classmethod
    def load_checkpoint(cls, path) -> "ConvNetScorer":
        with open(Path(path), "rb") as fh:
            magic = fh.read(len(CHECKPOINT_MAGIC))
            if magic != CHECKPOINT_MAGIC:
                raise ValueError(f"not a scorer checkpoint: bad magic {magic!r}")
            fmt, side, channels, emb, version, dtype_code = struct.unpack(
                "<IIIIII", fh.read(24)
            )
            if fmt != 1:
                raise ValueError(f"unsupported checkpoint format {fmt}")
            scorer = cls(
                input_side=side, channels=channels, embedding_len=emb,
                dtype=_CODE_DTYPES[dtype_code],
            )
            scorer.version = version
            for name in scorer.PARAM_NAMES:
                shape = scorer.params[name].shape
                count = int(np.prod(shape))
                raw = fh.read(count * 8)
                if len(raw) != count * 8:
                    raise ValueError(f"checkpoint truncated in {name}")
                scorer.params[name] = (
                    np.frombuffer(raw, dtype="<f8").reshape(shape).astype(scorer.dtype)
                )
            if fh.read(1):
                raise ValueError("trailing bytes after checkpoint payload")
        return scorer


def gradient_check(
    scorer: ConvNetScorer,
    image: Image,
    label,
    n_coords: int = 20,
    seed: int = 0,
    step: float = 1e-4,
) -> float:
    """Max relative error of analytic vs central-difference gradients.

    A coordinate whose +step/-step evaluations land on different sides of
    a rectifier kink is redrawn: the loss is not differentiable across the
    kink, so the central difference is meaningless there rather than a
    valid reference.  Relative error uses max(|analytic|, |numeric|, step)
    as denominator so near-zero gradients are judged on the
    finite-difference resolution scale rather than blowing up.
    """
    x = scorer.prepare(image)[None].astype(np.float64)
    y = np.array([_label_to_target(label)], dtype=np.float64)

    def loss_and_signs() -> tuple[float, tuple]:
        z, _, cache = scorer._forward(x.astype(scorer.dtype), keep=True)
        val = float((_softplus(z) - y * z)[0])
        signs = (
            (cache["pre1"] > 0).tobytes(),
            (cache["pre2"] > 0).tobytes(),
            (cache["fc_pre"] > 0).tobytes(),
        )
        return val, signs

    _, _, grads = scorer._loss_and_grads(x.astype(scorer.dtype), y.astype(scorer.dtype))
    rng = np.random.default_rng(seed)
    sizes = {name: scorer.params[name].size for name in scorer.PARAM_NAMES}
    names = list(scorer.PARAM_NAMES)
    weights = np.array([sizes[n] for n in names], dtype=np.float64)
    weights /= weights.sum()
    worst = 0.0
    checked = 0
    for _ in range(40 * n_coords):
        if checked >= n_coords:
            break
        name = names[int(rng.choice(len(names), p=weights))]
        flat = int(rng.integers(sizes[name]))
        param = scorer.params[name]
        orig = param.flat[flat]
        param.flat[flat] = orig + step
        up, signs_up = loss_and_signs()
        param.flat[flat] = orig - step
        down, signs_down = loss_and_signs()
        param.flat[flat] = orig
        if signs_up != signs_down:
            continue
        checked += 1
        numeric = (up - down) / (2.0 * step)
        analytic = float(grads[name].flat[flat])
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), step)
        worst = max(worst, err)
    if checked < n_coords:
        raise RuntimeError("could not find enough kink-free coordinates to check")
    return worst

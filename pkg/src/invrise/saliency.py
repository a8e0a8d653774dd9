"""Random-mask saliency: occlusion statistics, the inverted-map engine, and
the direct-map baseline.

Both engines probe a black-box scorer with the same set of random occlusion
masks.  The direct baseline weights each pixel by the confidences of masks
that kept it visible; the inverted engine attributes low-confidence outcomes
to the pixels the mask hid.  Either way the scorer is called exactly once
per mask and the per-mask confidences are reused across all pixels.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imaging import BinaryMask, Image, LowResGrid, Mask, encode_png, upsample_bilinear

__all__ = [
    "OCCLUSION_EPS",
    "MaskSet",
    "SaliencyMap",
    "SaliencyError",
    "sample_masks",
    "occlusion_probability",
    "invrise",
    "rise",
    "binarize_topfraction",
    "save_saliency",
    "load_saliency",
    "render_overlay",
    "save_overlay",
]

# A mask value at or below this threshold counts as "pixel hidden".
OCCLUSION_EPS = 1e-9

SALIENCY_MAGIC = b"IVRSSAL1"

# scorer calls per chunk; bounds peak memory for large mask sets
_BATCH = 128


class SaliencyError(RuntimeError):
    """Scorer failure mid-run; carries the number of completed evaluations."""

    def __init__(self, message: str, completed: int):
        super().__init__(message)
        self.completed = completed


@dataclass(frozen=True)
class MaskSet:
    """k random occlusion masks with their source grids and occlusion stats.

    `grid_values` holds the k binary cell grids (k, l, l); `mask_values` the
    bilinearly upsampled real masks (k, side, side).  `occlusion_prob` is the
    per-pixel fraction of masks that hide the pixel (value <= OCCLUSION_EPS).
    """

    k: int
    l: int
    p: float
    side: int
    seed: int
    grid_values: np.ndarray
    mask_values: np.ndarray
    occlusion_prob: np.ndarray
    shifts: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.grid_values.shape != (self.k, self.l, self.l):
            raise ValueError("grid_values shape mismatch")
        if self.mask_values.shape != (self.k, self.side, self.side):
            raise ValueError("mask_values shape mismatch")
        if self.occlusion_prob.shape != (self.side, self.side):
            raise ValueError("occlusion_prob shape mismatch")

    def grid(self, i: int) -> LowResGrid:
        return LowResGrid(self.grid_values[i])

    def mask(self, i: int) -> Mask:
        return Mask(self.mask_values[i])

    @property
    def grids(self) -> tuple[LowResGrid, ...]:
        return tuple(LowResGrid(g) for g in self.grid_values)

    @property
    def masks(self) -> tuple[Mask, ...]:
        return tuple(Mask(m) for m in self.mask_values)


@dataclass(frozen=True)
class SaliencyMap:
    """Per-pixel importance scores produced by one engine for one class."""

    values: np.ndarray
    method: str
    target_class: str
    undefined_pixels: frozenset = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError(f"saliency values must be square 2-d, got {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError("saliency values must be finite")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "undefined_pixels", frozenset(self.undefined_pixels))

    @property
    def side(self) -> int:
        return self.values.shape[0]

    def argmax(self) -> tuple[int, int]:
        """(y, x) of the highest-saliency pixel; ties go to row-major order."""
        flat = int(np.argmax(self.values))
        return flat // self.side, flat % self.side


def sample_masks(
    k: int = 1000,
    l: int = 8,
    p: float = 0.5,
    side: int = 64,
    seed: int = 0,
    random_shift: bool = False,
) -> MaskSet:
    """Draw k Bernoulli(p) cell grids and upsample each to a soft pixel mask.

    Cell value 1 keeps the covered pixels visible.  With `random_shift` each
    mask is additionally translated by a uniform sub-cell offset before
    clamping, as some occlusion pipelines do; default off.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must be in (0, 1), got {p}")
    rng = np.random.default_rng(seed)
    grids = (rng.random((k, l, l)) < p).astype(np.float64)
    shifts = None
    if random_shift:
        shifts = rng.uniform(0.0, side / l, size=(k, 2))
    masks = np.empty((k, side, side), dtype=np.float64)
    for i in range(k):
        shift = (0.0, 0.0) if shifts is None else (float(shifts[i, 0]), float(shifts[i, 1]))
        masks[i] = upsample_bilinear(LowResGrid(grids[i]), side, shift=shift).values
    occl = (masks <= OCCLUSION_EPS).mean(axis=0)
    return MaskSet(
        k=k, l=l, p=p, side=side, seed=seed,
        grid_values=grids, mask_values=masks, occlusion_prob=occl, shifts=shifts,
    )


def occlusion_probability(mask_set: MaskSet, y: int, x: int) -> float:
    """Fraction of masks hiding pixel (y, x); recounted from the stored masks."""
    if not (0 <= y < mask_set.side and 0 <= x < mask_set.side):
        raise ValueError(f"pixel ({y}, {x}) out of bounds for side {mask_set.side}")
    hidden = mask_set.mask_values[:, y, x] <= OCCLUSION_EPS
    return float(hidden.mean())


def _batched_confidences(classifier, images: list[Image]) -> np.ndarray:
    """One confidence per image, chunked; failures report completed count."""
    out = np.empty(len(images), dtype=np.float64)
    done = 0
    try:
        if hasattr(classifier, "predict_batch"):
            while done < len(images):
                chunk = images[done : done + _BATCH]
                out[done : done + len(chunk)] = np.asarray(classifier.predict_batch(chunk), dtype=np.float64)
                done += len(chunk)
        else:
            for i, img in enumerate(images):
                out[i] = float(classifier.predict(img))
                done = i + 1
    except Exception as exc:
        raise SaliencyError(
            f"classifier failed after {done} of {len(images)} evaluations: {exc}", done
        ) from exc
    return out


def _masked_images(image: Image, mask_values: np.ndarray) -> list[Image]:
    products = np.clip(image.pixels[None, :, :, :] * mask_values[:, :, :, None], 0.0, 1.0)
    return [Image(products[i]) for i in range(mask_values.shape[0])]


def _target_confidences(classifier, image: Image, mask_set: MaskSet, target_class: str) -> np.ndarray:
    if target_class not in ("OK", "NOK"):
        raise ValueError(f"target_class must be OK or NOK, got {target_class!r}")
    if mask_set.side != image.side:
        raise ValueError(f"mask side {mask_set.side} does not match image side {image.side}")
    conf = _batched_confidences(classifier, _masked_images(image, mask_set.mask_values))
    return conf if target_class == "NOK" else 1.0 - conf


def invrise(
    image: Image,
    classifier,
    mask_set: MaskSet,
    target_class: str = "NOK",
    soft_complement: bool = False,
) -> SaliencyMap:
    """Inverted saliency: credit hidden pixels for confidence drops.

    S(pixel) averages (1 - f(image * mask)) over the masks hiding the pixel.
    Pixels never hidden by any mask have no estimate; they get value 0 and
    are listed in undefined_pixels.  `soft_complement` swaps the hard
    hidden-indicator for (1 - mask value) in the numerator.
    """
    conf = _target_confidences(classifier, image, mask_set, target_class)
    weight = 1.0 - conf
    if soft_complement:
        complement = 1.0 - mask_set.mask_values
    else:
        complement = (mask_set.mask_values <= OCCLUSION_EPS).astype(np.float64)
    numerator = np.tensordot(weight, complement, axes=1) / mask_set.k
    denom = mask_set.occlusion_prob
    defined = denom > 0.0
    values = np.zeros((mask_set.side, mask_set.side), dtype=np.float64)
    values[defined] = numerator[defined] / denom[defined]
    undefined = frozenset((int(y), int(x)) for y, x in np.argwhere(~defined))
    return SaliencyMap(values=values, method="InvRISE", target_class=target_class,
                       undefined_pixels=undefined)


def rise(image: Image, classifier, mask_set: MaskSet, target_class: str = "NOK") -> SaliencyMap:
    """Direct saliency baseline: credit visible pixels for high confidence.

    S(pixel) = sum_m f(image * m) * m(pixel) / (k * mean mask value at pixel),
    using the soft mask values.  Pixels with zero mean visibility get value 0
    and are listed in undefined_pixels.
    """
    conf = _target_confidences(classifier, image, mask_set, target_class)
    numerator = np.tensordot(conf, mask_set.mask_values, axes=1) / mask_set.k
    mean_value = mask_set.mask_values.mean(axis=0)
    defined = mean_value > 0.0
    values = np.zeros((mask_set.side, mask_set.side), dtype=np.float64)
    values[defined] = numerator[defined] / mean_value[defined]
    undefined = frozenset((int(y), int(x)) for y, x in np.argwhere(~defined))
    return SaliencyMap(values=values, method="RISE", target_class=target_class,
                       undefined_pixels=undefined)


def binarize_topfraction(saliency: SaliencyMap, fraction: float = 0.10) -> BinaryMask:
    """Mark the ceil(fraction * side^2) highest-saliency pixels.

    Ties break toward earlier row-major position, so the output is a pure
    function of the values.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    side = saliency.side
    n = int(np.ceil(fraction * side * side))
    order = np.argsort(-saliency.values.ravel(), kind="stable")
    out = np.zeros(side * side, dtype=np.uint8)
    out[order[:n]] = 1
    return BinaryMask(out.reshape(side, side))


# ---------------------------------------------------------------------------
# export formats

def save_saliency(saliency: SaliencyMap, path) -> None:
    """Binary grid export: 8-byte magic, uint32 side, row-major f64 values."""
    side = saliency.side
    payload = saliency.values.astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(SALIENCY_MAGIC)
        fh.write(struct.pack("<I", side))
        fh.write(payload)


def load_saliency(path) -> np.ndarray:
    """Read back a saved saliency grid as a (side, side) float array."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:8] != SALIENCY_MAGIC:
        raise ValueError(f"{path}: not a saliency grid file")
    (side,) = struct.unpack("<I", raw[8:12])
    expected = 12 + side * side * 8
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for side {side}, got {len(raw)}")
    values = np.frombuffer(raw[12:], dtype="<f8").reshape(side, side).copy()
    return values


def render_overlay(image: Image, saliency: SaliencyMap) -> Image:
    """Blend the image with a red heat layer proportional to saliency rank.

    Values are min-max normalized; a constant map renders as the plain image.
    """
    if image.side != saliency.side:
        raise ValueError("overlay needs matching image and saliency sides")
    v = saliency.values
    spread = v.max() - v.min()
    heat = np.zeros_like(v) if spread == 0.0 else (v - v.min()) / spread
    if image.channels == 1:
        base = np.repeat(image.pixels, 3, axis=2)
    else:
        base = image.pixels.copy()
    alpha = (0.55 * heat)[:, :, None]
    red = np.zeros_like(base)
    red[:, :, 0] = 1.0
    return Image(np.clip(base * (1.0 - alpha) + red * alpha, 0.0, 1.0))


def save_overlay(image: Image, saliency: SaliencyMap, path) -> None:
    Path(path).write_bytes(encode_png(render_overlay(image, saliency)))

"""Image, mask, and grid primitives plus the shared resampling kernel.

All pixel data is float64 in [0, 1], channel-last.  Every transform here
is pure: inputs are never mutated, outputs are fresh arrays.  The same
center-aligned bilinear kernel backs mask upsampling, resizing, and
region zooming so the three stay mutually consistent.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
from PIL import Image as PILImage

__all__ = [
    "Image",
    "Mask",
    "BinaryMask",
    "LowResGrid",
    "AUGMENT_OPS",
    "upsample_bilinear",
    "resize",
    "zoom_region",
    "augment",
    "composite",
    "apply_mask",
    "encode_png",
    "decode_png",
    "load_image",
    "save_image",
    "mask_to_binary",
    "encode_mask_png",
    "decode_mask_png",
    "load_binary_mask",
    "save_binary_mask",
]


def _read_only(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Image:
    """A square raster: float64 pixels in [0, 1], shape (side, side, channels)."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        p = np.asarray(self.pixels, dtype=np.float64)
        if p.ndim != 3:
            raise ValueError(f"pixels must be (h, w, c), got shape {p.shape}")
        h, w, c = p.shape
        if h != w:
            raise ValueError(f"image must be square, got {h}x{w}")
        if h < 1 or c not in (1, 3):
            raise ValueError(f"unsupported image shape {p.shape}")
        if not np.isfinite(p).all():
            raise ValueError("pixels must be finite")
        if p.min() < 0.0 or p.max() > 1.0:
            raise ValueError("pixels must lie in [0, 1]")
        object.__setattr__(self, "pixels", _read_only(p))

    @property
    def side(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


@dataclass(frozen=True)
class Mask:
    """A real-valued occlusion mask on the image lattice, values in [0, 1]."""

    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError(f"mask must be square 2-d, got shape {v.shape}")
        if not np.isfinite(v).all() or v.min() < 0.0 or v.max() > 1.0:
            raise ValueError("mask values must be finite and in [0, 1]")
        object.__setattr__(self, "values", _read_only(v))

    @property
    def side(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class BinaryMask:
    """A {0, 1} pixel set (expert annotations, binarized saliency)."""

    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError(f"binary mask must be square 2-d, got shape {v.shape}")
        if not np.isin(v, (0, 1)).all():
            raise ValueError("binary mask values must be 0 or 1")
        object.__setattr__(self, "values", _read_only(v.astype(np.uint8)))

    @property
    def side(self) -> int:
        return self.values.shape[0]

    def count(self) -> int:
        return int(self.values.sum())

    def bounding_box(self) -> tuple[int, int, int, int]:
        """(x0, y0, w, h) of the tight box around set pixels; empty mask raises."""
        ys, xs = np.nonzero(self.values)
        if ys.size == 0:
            raise ValueError("bounding box of an empty mask is undefined")
        y0, y1 = int(ys.min()), int(ys.max())
        x0, x1 = int(xs.min()), int(xs.max())
        return x0, y0, x1 - x0 + 1, y1 - y0 + 1


@dataclass(frozen=True)
class LowResGrid:
    """An l x l binary cell grid; 1 = cell visible, 0 = cell occluded."""

    cells: np.ndarray

    def __post_init__(self) -> None:
        c = np.asarray(self.cells)
        if c.ndim != 2 or c.shape[0] != c.shape[1] or c.shape[0] < 1:
            raise ValueError(f"grid must be square 2-d, got shape {c.shape}")
        if not np.isin(c, (0, 1)).all():
            raise ValueError("grid cells must be 0 or 1")
        object.__setattr__(self, "cells", _read_only(c.astype(np.uint8)))

    @property
    def l(self) -> int:
        return self.cells.shape[0]


# ---------------------------------------------------------------------------
# bilinear kernel

def _axis_coords(n_out: int, n_in: int) -> np.ndarray:
    """Continuous source coordinate sampled by each output index (center-aligned)."""
    return (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5


def _interp_axis(coords: np.ndarray, n_in: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Clamped neighbor indices and fractional weight along one axis."""
    c = np.clip(coords, 0.0, n_in - 1.0)
    lo = np.floor(c).astype(np.int64)
    lo = np.minimum(lo, n_in - 2) if n_in > 1 else np.zeros_like(lo)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = c - lo
    return lo, hi, frac


def _resample2d(values: np.ndarray, y_coords: np.ndarray, x_coords: np.ndarray) -> np.ndarray:
    """Separable bilinear lookup of `values` (h, w[, c]) on a coordinate grid.

    Coordinates outside the lattice clamp to the border (replication).
    """
    h, w = values.shape[0], values.shape[1]
    y0, y1, fy = _interp_axis(y_coords, h)
    x0, x1, fx = _interp_axis(x_coords, w)
    fy = fy.reshape(-1, 1)
    fx = fx.reshape(1, -1)
    if values.ndim == 3:
        fy = fy[..., None]
        fx = fx[..., None]
    top = values[np.ix_(y0, x0)] * (1.0 - fx) + values[np.ix_(y0, x1)] * fx
    bot = values[np.ix_(y1, x0)] * (1.0 - fx) + values[np.ix_(y1, x1)] * fx
    return top * (1.0 - fy) + bot * fy


def upsample_bilinear(grid: LowResGrid, side: int, shift: tuple[float, float] = (0.0, 0.0)) -> Mask:
    """Smoothly interpolate an l x l cell grid up to a side x side mask.

    Cells sit at the centers of an l x l tiling of the target square, so a
    constant grid yields a constant mask and values vary linearly between
    neighboring cell centers (border cells replicate outward).  A nonzero
    `shift` (dy, dx, in output pixels) translates the interpolated pattern
    before border clamping; sub-cell shifts decorrelate mask edges from the
    cell lattice.
    """
    if side < 1:
        raise ValueError(f"side must be >= 1, got {side}")
    dy, dx = shift
    ys = (np.arange(side) - dy + 0.5) * (grid.l / side) - 0.5
    xs = (np.arange(side) - dx + 0.5) * (grid.l / side) - 0.5
    return Mask(_resample2d(grid.cells.astype(np.float64), ys, xs))


def resize(image: Image, side: int) -> Image:
    """Bilinear resample to a new side length (identity when sides match)."""
    if side < 1:
        raise ValueError(f"side must be >= 1, got {side}")
    if side == image.side:
        return image
    ys = _axis_coords(side, image.side)
    xs = _axis_coords(side, image.side)
    return Image(np.clip(_resample2d(image.pixels, ys, xs), 0.0, 1.0))


def zoom_region(image: Image, box: tuple[int, int, int, int], scale: float) -> Image:
    """Magnify or shrink the view relative to a pixel box, output size unchanged.

    `box` is (x0, y0, w, h); only its center matters.  scale > 1 zooms
    in: a window side/scale wide centered on the box is cropped and
    resampled to fill the frame (sampling replicates the window rim, so
    for pixel-aligned windows this equals resize() of the crop).
    scale < 1 zooms out: the whole scene contracts toward the box center
    and exposed margins replicate the image border.  scale == 1 is
    identity.
    """
    x0, y0, w, h = box
    s = image.side
    if w < 1 or h < 1 or x0 < 0 or y0 < 0 or x0 + w > s or y0 + h > s:
        raise ValueError(f"box {box} out of bounds for side {s}")
    if not (scale > 0.0) or not np.isfinite(scale):
        raise ValueError(f"scale must be positive and finite, got {scale}")
    if scale == 1.0:
        return image
    cy = y0 + h / 2.0 - 0.5
    cx = x0 + w / 2.0 - 0.5
    p = np.arange(s)
    if scale > 1.0:
        ws = s / scale
        wy = cy - (ws - 1.0) / 2.0
        wx = cx - (ws - 1.0) / 2.0
        ys = np.clip(wy + (p + 0.5) / scale - 0.5, wy, wy + ws - 1.0)
        xs = np.clip(wx + (p + 0.5) / scale - 0.5, wx, wx + ws - 1.0)
    else:
        ys = cy + (p - cy) / scale
        xs = cx + (p - cx) / scale
    return Image(np.clip(_resample2d(image.pixels, ys, xs), 0.0, 1.0))


AUGMENT_OPS = ("flip-h", "flip-v", "rot90", "rot180", "rot270")


def augment(image: Image, op: str) -> Image:
    """Apply one dihedral symmetry; pure pixel permutation, no resampling.

    Ops: flip-h (mirror left/right), flip-v (mirror top/bottom), and
    rot90/rot180/rot270 (counterclockwise).
    """
    p = image.pixels
    if op == "flip-h":
        out = p[:, ::-1]
    elif op == "flip-v":
        out = p[::-1, :]
    elif op == "rot90":
        out = np.rot90(p, 1)
    elif op == "rot180":
        out = np.rot90(p, 2)
    elif op == "rot270":
        out = np.rot90(p, 3)
    else:
        raise ValueError(f"unknown augment op {op!r}, expected one of {AUGMENT_OPS}")
    return Image(out.copy())


def composite(
    patch: Image,
    patch_mask: BinaryMask,
    background: Image,
    offset: tuple[int, int],
) -> tuple[Image, BinaryMask]:
    """Paste the masked pixels of `patch` onto `background` at (x, y).

    Only pixels where `patch_mask` is 1 are transferred.  Returns the
    composited image together with the transplanted mask on the
    background canvas.  The patch must fit inside the background.
    """
    if patch.side != patch_mask.side:
        raise ValueError("patch and patch_mask sides differ")
    if patch.channels != background.channels:
        raise ValueError("patch and background channel counts differ")
    ox, oy = offset
    ps, bs = patch.side, background.side
    if ox < 0 or oy < 0 or ox + ps > bs or oy + ps > bs:
        raise ValueError(f"offset {offset} places the patch outside the background")
    out = background.pixels.copy()
    sel = patch_mask.values.astype(bool)
    region = out[oy : oy + ps, ox : ox + ps]
    region[sel] = patch.pixels[sel]
    new_mask = np.zeros((bs, bs), dtype=np.uint8)
    new_mask[oy : oy + ps, ox : ox + ps] = patch_mask.values
    return Image(out), BinaryMask(new_mask)


def apply_mask(image: Image, mask: Mask) -> Image:
    """Multiply pixels by the mask (occluded areas go to black)."""
    if mask.side != image.side:
        raise ValueError("mask side does not match image side")
    return Image(image.pixels * mask.values[:, :, None])


# ---------------------------------------------------------------------------
# 8-bit PNG round trip

def _to_uint8(image: Image) -> np.ndarray:
    return np.round(image.pixels * 255.0).astype(np.uint8)


def encode_png(image: Image) -> bytes:
    """Serialize to 8-bit PNG (grayscale for 1 channel, RGB for 3)."""
    arr = _to_uint8(image)
    if image.channels == 1:
        pil = PILImage.fromarray(arr[:, :, 0], mode="L")
    else:
        pil = PILImage.fromarray(arr, mode="RGB")
    buf = io.BytesIO()
    pil.save(buf, format="PNG")
    return buf.getvalue()


def decode_png(data: bytes) -> Image:
    """Parse a PNG into an Image (pixels become multiples of 1/255)."""
    pil = PILImage.open(io.BytesIO(data))
    if pil.mode not in ("L", "RGB"):
        pil = pil.convert("RGB" if ("A" in pil.mode or len(pil.getbands()) > 1) else "L")
    arr = np.asarray(pil, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return Image(arr)


def load_image(path) -> Image:
    with open(path, "rb") as fh:
        return decode_png(fh.read())


def save_image(image: Image, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_png(image))


def mask_to_binary(mask: Mask, threshold: float = 0.5) -> BinaryMask:
    return BinaryMask((mask.values >= threshold).astype(np.uint8))


def encode_mask_png(mask: BinaryMask) -> bytes:
    pil = PILImage.fromarray(mask.values * np.uint8(255), mode="L")
    buf = io.BytesIO()
    pil.save(buf, format="PNG")
    return buf.getvalue()


def decode_mask_png(data: bytes) -> BinaryMask:
    pil = PILImage.open(io.BytesIO(data))
    if pil.mode != "L":
        pil = pil.convert("L")
    arr = np.asarray(pil)
    return BinaryMask((arr >= 128).astype(np.uint8))


def load_binary_mask(path) -> BinaryMask:
    with open(path, "rb") as fh:
        return decode_mask_png(fh.read())


def save_binary_mask(mask: BinaryMask, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_mask_png(mask))

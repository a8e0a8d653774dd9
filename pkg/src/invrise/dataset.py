"""Synthetic seam-inspection dataset: generation, splits, and manifest I/O.

Images show a procedurally textured metal plate crossed by a horizontal
weld seam with a periodic scallop pattern.  Defective variants perturb
the seam; the expert mask records exactly which pixels changed relative
to the defect-free render of the same seed, so localization ground truth
is knowable by construction.  All randomness flows from integer seeds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imaging import (
    BinaryMask,
    Image,
    load_binary_mask,
    load_image,
    save_binary_mask,
    save_image,
)

__all__ = [
    "OK",
    "NOK",
    "NOK_KINDS",
    "CLASS_SPECS",
    "LabeledInstance",
    "DatasetSplits",
    "GenerationConfig",
    "generate_instance",
    "generate_dataset",
    "generate_backgrounds",
    "split_dataset",
    "save_manifest",
    "load_manifest",
    "save_backgrounds",
    "load_backgrounds",
]

OK = "OK"
NOK = "NOK"

NOK_KINDS = ("scratch", "pore", "gap", "irregular-scale", "missing-seam")
CLASS_SPECS = ("OK", "no-seam") + tuple(f"NOK:{k}" for k in NOK_KINDS[:-1])


@dataclass(frozen=True)
class LabeledInstance:
    """One image with label, optional expert defect mask, and provenance seed."""

    id: str
    image: Image
    label: str
    defect_mask: BinaryMask | None
    defect_kind: str | None
    generator_seed: int

    def __post_init__(self) -> None:
        if self.label not in (OK, NOK):
            raise ValueError(f"label must be OK or NOK, got {self.label!r}")
        mask_set = self.defect_mask is not None and self.defect_mask.count() > 0
        if self.label == NOK and not mask_set:
            raise ValueError(f"NOK instance {self.id} needs a nonempty defect mask")
        if self.label == OK and mask_set:
            raise ValueError(f"OK instance {self.id} must not carry defect pixels")
        if self.defect_mask is not None and self.defect_mask.side != self.image.side:
            raise ValueError(f"mask side mismatch on instance {self.id}")
        if self.defect_kind is not None and self.defect_kind not in NOK_KINDS:
            raise ValueError(f"unknown defect kind {self.defect_kind!r}")


@dataclass(frozen=True)
class DatasetSplits:
    """Disjoint id lists covering the dataset."""

    train: tuple[str, ...]
    validation: tuple[str, ...]
    test: tuple[str, ...]
    interactive: tuple[str, ...]

    def __post_init__(self) -> None:
        all_ids = self.train + self.validation + self.test + self.interactive
        if len(set(all_ids)) != len(all_ids):
            raise ValueError("splits must be pairwise disjoint")

    def as_dict(self) -> dict[str, list[str]]:
        return {
            "train": list(self.train),
            "validation": list(self.validation),
            "test": list(self.test),
            "interactive": list(self.interactive),
        }


# ---------------------------------------------------------------------------
# rendering

def _smooth1d(v: np.ndarray, width: int = 5) -> np.ndarray:
    kernel = np.ones(width) / width
    return np.convolve(np.pad(v, width // 2, mode="edge"), kernel, mode="valid")


def _draw_base_params(rng: np.random.Generator, side: int) -> dict:
    # One draw call order for every class spec, so a seed fixes the scene
    # before any perturbation parameters are consumed.
    return {
        "plate_level": rng.uniform(0.38, 0.44),
        "plate_grad": rng.uniform(-0.03, 0.03),
        "streak_amp": rng.uniform(0.005, 0.02),
        "streak": rng.standard_normal(side),
        "noise": 0.008 * rng.standard_normal((side, side)),
        "seam_cy": side / 2.0 + rng.uniform(-side / 16.0, side / 16.0),
        "seam_half": rng.uniform(side / 10.0, side / 7.0),
        "period": rng.uniform(side / 9.0, side / 5.5),
        "phase": rng.uniform(0.0, side / 5.5),
        "seam_base": rng.uniform(0.22, 0.30),
        "scallop_amp": rng.uniform(0.16, 0.24),
    }


def _crest(x: np.ndarray, period: float, phase: float) -> np.ndarray:
    return np.abs(np.sin(np.pi * (x - phase) / period))


def _render(params: dict, side: int, seam: bool, gap: tuple | None = None,
            rescale: tuple | None = None) -> np.ndarray:
    y = np.arange(side, dtype=np.float64)
    x = np.arange(side, dtype=np.float64)
    plate = (
        params["plate_level"]
        + params["plate_grad"] * (y / side - 0.5)[:, None]
        + params["streak_amp"] * _smooth1d(params["streak"])[:, None]
        + params["noise"]
    )
    out = plate
    if seam:
        dy = (y - params["seam_cy"]) / params["seam_half"]
        profile = np.where(np.abs(dy) <= 1.0, np.cos(np.pi * dy / 2.0) ** 2, 0.0)
        crest = _crest(x, params["period"], params["phase"])
        if rescale is not None:
            # locally distorted scallop: different period and boosted
            # amplitude inside a window of columns
            x0, x1, period2, phase2, boost = rescale
            inside = (x >= x0) & (x < x1)
            crest2 = boost * _crest(x, period2, phase2)
            crest = np.where(inside, crest2, crest)
        add = profile[:, None] * (params["seam_base"] + params["scallop_amp"] * crest[None, :])
        if gap is not None:
            x0, x1 = gap
            add[:, int(x0) : int(x1)] = 0.0
        out = out + add
    return np.clip(out, 0.02, 0.98)


def _quantize(arr: np.ndarray) -> np.ndarray:
    return np.round(np.clip(arr, 0.0, 1.0) * 255.0) / 255.0


def _segment_distance(py: np.ndarray, px: np.ndarray, a: tuple, b: tuple) -> np.ndarray:
    ay, ax = a
    by, bx = b
    vy, vx = by - ay, bx - ax
    length2 = vy * vy + vx * vx
    if length2 == 0.0:
        return np.hypot(py - ay, px - ax)
    t = np.clip(((py - ay) * vy + (px - ax) * vx) / length2, 0.0, 1.0)
    return np.hypot(py - (ay + t * vy), px - (ax + t * vx))


def _apply_scratch(img: np.ndarray, params: dict, rng: np.random.Generator) -> np.ndarray:
    side = img.shape[0]
    cy, half = params["seam_cy"], params["seam_half"]
    x0 = rng.uniform(side * 0.15, side * 0.85)
    n_seg = 4
    ys = np.linspace(cy - half - 1.5, cy + half + 1.5, n_seg + 1)
    xs = np.clip(x0 + np.cumsum(np.concatenate([[0.0], rng.uniform(-side / 14.0, side / 14.0, n_seg)])), 1.0, side - 2.0)
    radius = rng.uniform(2.4, 3.4)
    factor = rng.uniform(0.15, 0.35)
    py, px = np.mgrid[0:side, 0:side].astype(np.float64)
    dist = np.full((side, side), np.inf)
    for i in range(n_seg):
        dist = np.minimum(dist, _segment_distance(py, px, (ys[i], xs[i]), (ys[i + 1], xs[i + 1])))
    sel = dist <= radius
    out = img.copy()
    out[sel] = np.clip(out[sel] * factor - 0.02, 0.02, 0.98)
    return out


def _apply_pores(img: np.ndarray, params: dict, rng: np.random.Generator) -> np.ndarray:
    # Blobs share one tight cluster center so the defect forms a single
    # connected dark region rather than specks scattered along the seam.
    side = img.shape[0]
    cy, half = params["seam_cy"], params["seam_half"]
    ccy = rng.uniform(cy - 0.5 * half, cy + 0.5 * half)
    ccx = rng.uniform(9.0, side - 10.0)
    out = img.copy()
    py, px = np.mgrid[0:side, 0:side].astype(np.float64)
    for _ in range(int(rng.integers(3, 6))):
        ey = ccy + rng.uniform(-2.5, 2.5)
        ex = ccx + rng.uniform(-3.5, 3.5)
        a = rng.uniform(3.5, 6.0)
        b = rng.uniform(3.0, 5.0)
        theta = rng.uniform(0.0, np.pi)
        factor = rng.uniform(0.15, 0.35)
        dy, dx = py - ey, px - ex
        u = (dx * np.cos(theta) + dy * np.sin(theta)) / a
        v = (-dx * np.sin(theta) + dy * np.cos(theta)) / b
        sel = u * u + v * v <= 1.0
        out[sel] = np.clip(out[sel] * factor, 0.02, 0.98)
    return out


def _perturbed_render(kind: str, params: dict, side: int, rng: np.random.Generator) -> np.ndarray:
    if kind == "scratch":
        return _apply_scratch(_render(params, side, seam=True), params, rng)
    if kind == "pore":
        return _apply_pores(_render(params, side, seam=True), params, rng)
    if kind == "gap":
        x0 = rng.uniform(side * 0.15, side * 0.60)
        width = rng.uniform(side / 7.0, side / 4.0)
        return _render(params, side, seam=True, gap=(x0, x0 + width))
    if kind == "irregular-scale":
        x0 = rng.uniform(side * 0.10, side * 0.50)
        width = rng.uniform(side / 4.0, side / 2.2)
        period2 = params["period"] * rng.uniform(1.7, 2.6)
        phase2 = rng.uniform(0.0, period2)
        boost = rng.uniform(1.6, 2.1)
        return _render(params, side, seam=True, rescale=(x0, x0 + width, period2, phase2, boost))
    raise ValueError(f"unknown perturbation kind {kind!r}")


def _instance_tag(class_spec: str) -> tuple[str, str, str | None]:
    """Map a class spec onto (id tag, label, defect kind)."""
    if class_spec == "OK":
        return "ok", OK, None
    if class_spec == "no-seam":
        return "noseam", NOK, "missing-seam"
    if class_spec.startswith("NOK:"):
        kind = class_spec.split(":", 1)[1]
        if kind in NOK_KINDS[:-1]:
            return kind.replace("-", ""), NOK, kind
    raise ValueError(f"unknown class spec {class_spec!r}")


def generate_instance(seed: int, class_spec: str, side: int = 64, index: int = 0) -> LabeledInstance:
    """Render one instance deterministically from an integer seed.

    The base scene (plate and seam parameters) is drawn before any
    perturbation parameters, so NOK renders differ from the same-seed OK
    render only on the perturbed pixels.  The defect mask is the exact
    8-bit pixel difference against that OK render; for missing-seam it is
    the seam band's expected location.
    """
    tag, label, kind = _instance_tag(class_spec)
    rng = np.random.default_rng(seed)
    params = _draw_base_params(rng, side)
    base = _quantize(_render(params, side, seam=True))

    if label == OK:
        pixels, mask = base, None
    elif kind == "missing-seam":
        pixels = _quantize(_render(params, side, seam=False))
        y = np.arange(side)
        band = np.abs(y - params["seam_cy"]) <= params["seam_half"]
        mv = np.zeros((side, side), dtype=np.uint8)
        mv[band, :] = 1
        mask = BinaryMask(mv)
    else:
        # retry with a fresh parameter draw in the pathological case of a
        # perturbation that quantizes away entirely
        for _ in range(8):
            pixels = _quantize(_perturbed_render(kind, params, side, rng))
            diff = pixels != base
            if diff.any():
                break
        else:
            raise RuntimeError(f"could not realize a visible {kind} defect for seed {seed}")
        mask = BinaryMask(diff.astype(np.uint8))

    instance_id = f"{tag}-{index:04d}-{seed & 0xFFFFFFFF:08x}"
    return LabeledInstance(
        id=instance_id,
        image=Image(pixels[:, :, None]),
        label=label,
        defect_mask=mask,
        defect_kind=kind,
        generator_seed=int(seed),
    )


@dataclass(frozen=True)
class GenerationConfig:
    """Counts per class plus rendering parameters."""

    n_ok: int = 139
    n_no_seam: int = 110
    n_nok: int = 164
    side: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.n_ok, self.n_no_seam, self.n_nok) < 0:
            raise ValueError("instance counts must be >= 0")
        if self.side < 24:
            raise ValueError("side must be >= 24; defect geometry needs the room")


def _derive_seed(master: int, index: int) -> int:
    return int(np.random.SeedSequence([master, index]).generate_state(1, dtype=np.uint64)[0])


def generate_dataset(config: GenerationConfig) -> list[LabeledInstance]:
    """Generate all instances; per-instance seeds branch off the master seed.

    Seam-bearing NOK instances cycle through the four perturbation kinds
    for balanced coverage.
    """
    specs: list[str] = ["OK"] * config.n_ok + ["no-seam"] * config.n_no_seam
    seam_kinds = NOK_KINDS[:-1]
    specs += [f"NOK:{seam_kinds[i % len(seam_kinds)]}" for i in range(config.n_nok)]
    out = []
    for index, spec in enumerate(specs):
        seed = _derive_seed(config.seed, index)
        out.append(generate_instance(seed, spec, side=config.side, index=index))
    return out


def generate_backgrounds(count: int, seed: int, side: int = 64) -> list[Image]:
    """Seamless plate textures used as compositing targets for refutations."""
    images = []
    for index in range(count):
        rng = np.random.default_rng(_derive_seed(seed, 1_000_000 + index))
        params = _draw_base_params(rng, side)
        images.append(Image(_quantize(_render(params, side, seam=False))[:, :, None]))
    return images


# ---------------------------------------------------------------------------
# splitting

_SPLIT_NAMES = ("train", "validation", "test", "interactive")


def _largest_remainder(n: int, ratios: tuple[float, ...]) -> list[int]:
    exact = [r * n for r in ratios]
    counts = [int(np.floor(e)) for e in exact]
    remainder = n - sum(counts)
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[:remainder]:
        counts[i] += 1
    return counts


def split_dataset(
    dataset: list[LabeledInstance], ratios: tuple[float, float, float, float], seed: int
) -> DatasetSplits:
    """Stratified 4-way split: per-label seeded shuffle, largest-remainder sizes."""
    if len(ratios) != 4:
        raise ValueError("need exactly four ratios")
    if any(r < 0 for r in ratios):
        raise ValueError("ratios must be nonnegative")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    rng = np.random.default_rng(seed)
    parts: dict[str, list[str]] = {name: [] for name in _SPLIT_NAMES}
    for label in (OK, NOK):
        ids = sorted(inst.id for inst in dataset if inst.label == label)
        ids = [ids[i] for i in rng.permutation(len(ids))]
        counts = _largest_remainder(len(ids), tuple(ratios))
        at = 0
        for name, c in zip(_SPLIT_NAMES, counts):
            parts[name].extend(ids[at : at + c])
            at += c
    return DatasetSplits(*(tuple(parts[name]) for name in _SPLIT_NAMES))


# ---------------------------------------------------------------------------
# manifest I/O

def save_manifest(dataset: list[LabeledInstance], splits: DatasetSplits, path) -> None:
    """Write manifest.json plus per-instance image and mask PNGs."""
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    for inst in dataset:
        image_rel = f"images/{inst.id}.png"
        save_image(inst.image, root / image_rel)
        mask_rel = None
        if inst.defect_mask is not None:
            mask_rel = f"masks/{inst.id}.png"
            save_binary_mask(inst.defect_mask, root / mask_rel)
        records.append(
            {
                "id": inst.id,
                "label": inst.label,
                "kind": inst.defect_kind,
                "seed": inst.generator_seed,
                "image": image_rel,
                "mask": mask_rel,
            }
        )
    doc = {
        "side": dataset[0].image.side if dataset else 0,
        "channels": dataset[0].image.channels if dataset else 1,
        "instances": records,
        "splits": splits.as_dict(),
    }
    with open(root / "manifest.json", "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_manifest(path) -> tuple[list[LabeledInstance], DatasetSplits]:
    """Read a manifest directory back; validates ids, files, and mask rules."""
    root = Path(path)
    manifest = root / "manifest.json"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.json under {root}")
    with open(manifest) as fh:
        doc = json.load(fh)
    seen: set[str] = set()
    instances = []
    for rec in doc["instances"]:
        iid = rec["id"]
        if iid in seen:
            raise ValueError(f"duplicate instance id {iid!r} in manifest")
        seen.add(iid)
        image_path = root / rec["image"]
        if not image_path.exists():
            raise FileNotFoundError(f"instance {iid!r}: missing image file {rec['image']}")
        mask = None
        if rec["mask"] is not None:
            mask_path = root / rec["mask"]
            if not mask_path.exists():
                raise FileNotFoundError(f"instance {iid!r}: missing mask file {rec['mask']}")
            mask = load_binary_mask(mask_path)
        instances.append(
            LabeledInstance(
                id=iid,
                image=load_image(image_path),
                label=rec["label"],
                defect_mask=mask,
                defect_kind=rec["kind"],
                generator_seed=rec["seed"],
            )
        )
    sp = doc["splits"]
    splits = DatasetSplits(
        tuple(sp["train"]), tuple(sp["validation"]), tuple(sp["test"]), tuple(sp["interactive"])
    )
    known = {inst.id for inst in instances}
    for name, ids in sp.items():
        for iid in ids:
            if iid not in known:
                raise ValueError(f"split {name!r} references unknown id {iid!r}")
    return instances, splits


def save_backgrounds(backgrounds: list[Image], path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(backgrounds):
        save_image(img, root / f"bg-{i:04d}.png")


def load_backgrounds(path) -> list[Image]:
    root = Path(path)
    return [load_image(p) for p in sorted(root.glob("*.png"))]

"""Experiment orchestration: configuration files, dataset workspaces,
strategy comparisons, and deterministic replay.

An experiment is described by one JSON document (ExperimentConfig).  The
`compare` entry point materializes the synthetic dataset, trains the shared
initial scorer per seed, runs every acquisition strategy, and writes a
comparison CSV plus one event log per run into the output directory together
with the resolved config.  `replay` re-executes stored runs from that config
and verifies the regenerated artifacts are bit-identical.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .classifier import ConvNetScorer, TrainConfig
from .dataset import (
    GenerationConfig,
    generate_backgrounds,
    generate_dataset,
    split_dataset,
)
from .imaging import Image
from .interaction import (
    STRATEGIES,
    LoopConfig,
    RunRecord,
    compare_strategies,
    event_log_payload,
    write_comparison_csv,
    write_event_log,
)
from .saliency import MaskSet, invrise, rise, sample_masks

__all__ = [
    "ExperimentConfig",
    "load_experiment_config",
    "build_world",
    "scorer_factory",
    "make_explainer",
    "occlusion_augmented_pairs",
    "run_compare",
    "replay_runs",
    "ReplayMismatch",
]

_DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a comparison run depends on, JSON-serializable."""

    # dataset
    n_ok: int = 139
    n_no_seam: int = 110
    n_nok: int = 164
    side: int = 64
    dataset_seed: int = 0
    split_ratios: tuple = (0.33, 0.11, 0.06, 0.50)
    n_backgrounds: int = 12
    background_seed: int = 7
    # scorer
    scorer_side: int = 32
    scorer_dtype: str = "float32"
    train: TrainConfig = field(default_factory=TrainConfig)
    # mask sampling / saliency
    mask_k: int = 1000
    mask_l: int = 8
    mask_p: float = 0.5
    mask_shift: bool = False
    mask_seed: int = 0
    saliency_method: str = "InvRISE"
    saliency_fraction: float = 0.10
    # loop
    strategies: tuple = STRATEGIES
    interactions_per_iteration: int = 27
    iteration_budget: int = 7
    refutation_count: int = 4
    pool_holdout_fraction: float = 0.0
    accuracy_threshold: float | None = None
    seeds: tuple = (0,)
    output_dir: str = "runs"

    def __post_init__(self) -> None:
        if isinstance(self.train, dict):
            object.__setattr__(self, "train", TrainConfig(**self.train))
        for name in ("split_ratios", "strategies", "seeds"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.scorer_dtype not in _DTYPES:
            raise ValueError(f"scorer_dtype must be one of {sorted(_DTYPES)}")
        if self.saliency_method not in ("InvRISE", "RISE"):
            raise ValueError("saliency_method must be InvRISE or RISE")
        if not self.seeds:
            raise ValueError("seeds must be nonempty")
        unknown = set(self.strategies) - set(STRATEGIES)
        if unknown:
            raise ValueError(f"unknown strategies: {sorted(unknown)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_ratios"] = list(self.split_ratios)
        d["strategies"] = list(self.strategies)
        d["seeds"] = list(self.seeds)
        return d

    def digest(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def generation_config(self) -> GenerationConfig:
        return GenerationConfig(n_ok=self.n_ok, n_no_seam=self.n_no_seam,
                                n_nok=self.n_nok, side=self.side,
                                seed=self.dataset_seed)

    def loop_config(self, strategy: str) -> LoopConfig:
        return LoopConfig(
            strategy=strategy,
            interactions_per_iteration=self.interactions_per_iteration,
            iteration_budget=self.iteration_budget,
            train=self.train,
            refutation_count=self.refutation_count,
            accuracy_threshold=self.accuracy_threshold,
            pool_holdout_fraction=self.pool_holdout_fraction,
            saliency_fraction=self.saliency_fraction,
        )


def load_experiment_config(path, overrides: dict | None = None) -> ExperimentConfig:
    """Read a JSON config; `overrides` wins over file values."""
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ValueError(f"config {path} must hold a JSON object")
    if overrides:
        doc.update({k: v for k, v in overrides.items() if v is not None})
    known = set(ExperimentConfig.__dataclass_fields__)
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown config fields: {sorted(unknown)}")
    return ExperimentConfig(**doc)


def build_world(config: ExperimentConfig):
    """Materialize dataset, splits, and refutation backgrounds."""
    instances = generate_dataset(config.generation_config())
    split = split_dataset(instances, config.split_ratios,
                          seed=config.dataset_seed)
    backgrounds = generate_backgrounds(config.n_backgrounds,
                                       config.background_seed,
                                       side=config.side)
    return instances, split, backgrounds


def scorer_factory(config: ExperimentConfig):
    dtype = _DTYPES[config.scorer_dtype]

    def factory(seed: int) -> ConvNetScorer:
        return ConvNetScorer(input_side=config.scorer_side, seed=seed,
                             dtype=dtype)

    return factory


def make_explainer(config: ExperimentConfig):
    """(classifier, image) -> SaliencyMap using the configured method."""
    mask_set = sample_masks(k=config.mask_k, l=config.mask_l, p=config.mask_p,
                            side=config.side, seed=config.mask_seed,
                            random_shift=config.mask_shift)
    method = invrise if config.saliency_method == "InvRISE" else rise

    def explainer(classifier, image):
        return method(image, classifier, mask_set)

    return explainer


def occlusion_augmented_pairs(
    instances,
    mask_set: MaskSet,
    rng: np.random.Generator,
    per_image: int = 4,
    visible_keeps_label: float = 0.6,
    hidden_flips_label: float = 0.05,
):
    """Training pairs plus randomly occluded variants of each image.

    A masked OK image stays OK.  A masked NOK image keeps its label while at
    least `visible_keeps_label` of the defect mass stays visible, flips to OK
    once at most `hidden_flips_label` remains, and is skipped in between.
    This teaches the scorer that blacked-out regions are missing evidence
    rather than defects, which the occlusion-based explainers rely on.
    """
    pairs = []
    for inst in instances:
        pairs.append((inst.image, inst.label))
        added = tries = 0
        while added < per_image and tries < 12 * per_image:
            m = mask_set.mask_values[rng.integers(mask_set.k)]
            tries += 1
            masked = Image(np.clip(inst.image.pixels * m[:, :, None], 0.0, 1.0))
            if inst.label == "OK":
                pairs.append((masked, "OK"))
                added += 1
                continue
            support = inst.defect_mask.values.astype(bool)
            visible = float(m[support].mean())
            if visible >= visible_keeps_label:
                pairs.append((masked, "NOK"))
                added += 1
            elif visible <= hidden_flips_label:
                pairs.append((masked, "OK"))
                added += 1
    return pairs


# ---------------------------------------------------------------------------
# compare + replay

def _log_name(record: RunRecord) -> str:
    return f"{record.strategy}-seed{record.seed}.json"


def run_compare(config: ExperimentConfig, out_dir=None) -> list[RunRecord]:
    """Run every configured strategy x seed and write the run artifacts."""
    out = Path(out_dir if out_dir is not None else config.output_dir)
    instances, split, backgrounds = build_world(config)
    records = compare_strategies(
        instances, split, scorer_factory(config),
        config.loop_config(config.strategies[0]),
        seeds=config.seeds, strategies=config.strategies,
        backgrounds=backgrounds,
    )
    out.mkdir(parents=True, exist_ok=True)
    (out / "events").mkdir(exist_ok=True)
    with open(out / "config.json", "w") as fh:
        json.dump(config.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    write_comparison_csv(records, out / "comparison.csv")
    for record in records:
        write_event_log(record, out / "events" / _log_name(record))
    return records


class ReplayMismatch(RuntimeError):
    """A stored run could not be reproduced bit-identically."""


def _check_payload(fresh: dict, stored: dict, name: str) -> None:
    if fresh == stored:
        return
    for key in fresh:
        if fresh[key] != stored.get(key):
            raise ReplayMismatch(f"{name}: field {key!r} differs on replay")
    raise ReplayMismatch(f"{name}: differs on replay")


def replay_runs(path) -> list[str]:
    """Re-execute stored runs and verify the artifacts; returns their names.

    `path` may be a run directory (every log under events/ is checked, plus
    the comparison CSV) or a single event-log file inside one.
    """
    path = Path(path)
    whole_dir = path.is_dir()
    run_dir = path if whole_dir else path.parent.parent
    logs = sorted((run_dir / "events").glob("*.json")) if whole_dir else [path]
    if not logs:
        raise FileNotFoundError(f"no event logs under {run_dir}/events")
    config = load_experiment_config(run_dir / "config.json")

    stored_by_key = {}
    for log in logs:
        with open(log) as fh:
            stored = json.load(fh)
        if stored.get("config_digest") != config.loop_config(
                stored["strategy"]).digest():
            raise ReplayMismatch(
                f"{log.name}: event log does not belong to this config")
        stored_by_key[(stored["strategy"], stored["seed"])] = (log.name, stored)

    strategies = [s for s in config.strategies
                  if any(k[0] == s for k in stored_by_key)]
    seeds = [s for s in config.seeds if any(k[1] == s for k in stored_by_key)]
    instances, split, backgrounds = build_world(config)
    records = compare_strategies(
        instances, split, scorer_factory(config),
        config.loop_config(strategies[0]),
        seeds=seeds, strategies=strategies, backgrounds=backgrounds,
    )
    verified = []
    for record in records:
        key = (record.strategy, record.seed)
        if key not in stored_by_key:
            continue
        name, stored = stored_by_key[key]
        _check_payload(event_log_payload(record), stored, name)
        verified.append(name)
    missing = set(stored_by_key) - {(r.strategy, r.seed) for r in records}
    if missing:
        raise ReplayMismatch(f"runs not reproduced: {sorted(missing)}")

    if whole_dir:
        tmp = run_dir / "comparison.csv.replay"
        write_comparison_csv(records, tmp)
        fresh_csv = tmp.read_text()
        tmp.unlink()
        if fresh_csv != (run_dir / "comparison.csv").read_text():
            raise ReplayMismatch("comparison.csv differs on replay")
        verified.append("comparison.csv")
    return verified

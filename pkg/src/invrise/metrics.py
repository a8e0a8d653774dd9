"""Evaluation measures: mask-overlap scores for explanations and confusion
matrix summaries for classification."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imaging import BinaryMask
from .saliency import MaskSet, SaliencyMap, binarize_topfraction, invrise, rise

__all__ = [
    "ConfusionMatrix",
    "ExplanationScore",
    "ExplanationAggregate",
    "dice",
    "jaccard",
    "hit",
    "classification_metrics",
    "confusion_from_labels",
    "evaluate_explanations",
    "write_aggregate_csv",
]


@dataclass(frozen=True)
class ConfusionMatrix:
    """Binary counts with NOK as the positive class."""

    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class ExplanationScore:
    """Overlap of one binarized explanation with the expert mask."""

    instance_id: str
    dice: float
    jaccard: float
    hit: bool


@dataclass(frozen=True)
class ExplanationAggregate:
    """Means over the evaluated instances, one table row per method."""

    method: str
    mean_dice: float
    mean_jaccard: float
    hit_accuracy: float
    evaluated: int
    skipped: int
    scores: tuple[ExplanationScore, ...]


def _require_same_side(a: BinaryMask, b: BinaryMask) -> None:
    if a.side != b.side:
        raise ValueError(f"mask sides differ: {a.side} vs {b.side}")


def dice(a: BinaryMask, b: BinaryMask) -> float:
    """2|A∩B| / (|A| + |B|); two empty masks agree perfectly (1.0)."""
    _require_same_side(a, b)
    na, nb = a.count(), b.count()
    if na + nb == 0:
        return 1.0
    inter = int(np.logical_and(a.values, b.values).sum())
    return 2.0 * inter / (na + nb)


def jaccard(a: BinaryMask, b: BinaryMask) -> float:
    """|A∩B| / |A∪B|; two empty masks agree perfectly (1.0)."""
    _require_same_side(a, b)
    inter = int(np.logical_and(a.values, b.values).sum())
    union = int(np.logical_or(a.values, b.values).sum())
    if union == 0:
        return 1.0
    return inter / union


def hit(saliency: SaliencyMap, expert: BinaryMask) -> bool:
    """Does the top saliency pixel land on the expert mask?

    Ties resolve to the smallest row-major index, the same rule the
    binarizer uses.  Undefined for an empty expert mask.
    """
    if saliency.side != expert.side:
        raise ValueError(f"sides differ: saliency {saliency.side} vs expert {expert.side}")
    if expert.count() == 0:
        raise ValueError("hit is undefined for an empty expert mask")
    y, x = saliency.argmax()
    return bool(expert.values[y, x])


def classification_metrics(cm: ConfusionMatrix) -> dict[str, float]:
    """Accuracy, F1, and MCC; zero-denominator cases score 0 by convention."""
    if cm.total == 0:
        raise ValueError("metrics are undefined on an empty confusion matrix")
    accuracy = (cm.tp + cm.tn) / cm.total
    f1_denom = 2 * cm.tp + cm.fp + cm.fn
    f1 = 2 * cm.tp / f1_denom if f1_denom else 0.0
    factors = (
        (cm.tp + cm.fp) * (cm.tp + cm.fn) * (cm.tn + cm.fp) * (cm.tn + cm.fn)
    )
    mcc = (cm.tp * cm.tn - cm.fp * cm.fn) / np.sqrt(factors) if factors else 0.0
    return {"accuracy": accuracy, "f1": f1, "mcc": float(mcc)}


def confusion_from_labels(predicted: list[str], true: list[str]) -> ConfusionMatrix:
    """Count a binary confusion matrix from parallel label lists."""
    if len(predicted) != len(true):
        raise ValueError("prediction and truth lists must have equal length")
    tp = fp = tn = fn = 0
    for p, t in zip(predicted, true):
        if p == "NOK":
            if t == "NOK":
                tp += 1
            else:
                fp += 1
        else:
            if t == "NOK":
                fn += 1
            else:
                tn += 1
    return ConfusionMatrix(tp=tp, fp=fp, tn=tn, fn=fn)


def evaluate_explanations(
    instances,
    classifier,
    mask_set: MaskSet,
    method: str = "InvRISE",
    fraction: float = 0.10,
) -> ExplanationAggregate:
    """Score one engine against expert masks over a set of NOK instances.

    Per instance: saliency for the NOK class, top-fraction binarization,
    dice/jaccard against the expert mask, and argmax hit.  Instances
    without an expert mask are skipped with a warning.
    """
    if method not in ("RISE", "InvRISE"):
        raise ValueError(f"method must be RISE or InvRISE, got {method!r}")
    engine = invrise if method == "InvRISE" else rise
    scores: list[ExplanationScore] = []
    skipped = 0
    for inst in instances:
        if inst.defect_mask is None or inst.defect_mask.count() == 0:
            warnings.warn(f"instance {inst.id} has no expert mask; skipped")
            skipped += 1
            continue
        sal = engine(inst.image, classifier, mask_set, target_class="NOK")
        binarized = binarize_topfraction(sal, fraction)
        scores.append(
            ExplanationScore(
                instance_id=inst.id,
                dice=dice(binarized, inst.defect_mask),
                jaccard=jaccard(binarized, inst.defect_mask),
                hit=hit(sal, inst.defect_mask),
            )
        )
    if not scores:
        raise ValueError("no instances with expert masks to evaluate")
    return ExplanationAggregate(
        method=method,
        mean_dice=float(np.mean([s.dice for s in scores])),
        mean_jaccard=float(np.mean([s.jaccard for s in scores])),
        hit_accuracy=float(np.mean([s.hit for s in scores])),
        evaluated=len(scores),
        skipped=skipped,
        scores=tuple(scores),
    )


def write_aggregate_csv(aggregates: list[ExplanationAggregate], model: str, path) -> None:
    """One CSV row per method: method, model, dice, jaccard, hit_acc."""
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "model", "dice", "jaccard", "hit_acc"])
        for agg in aggregates:
            writer.writerow(
                [agg.method, model, f"{agg.mean_dice:.6f}",
                 f"{agg.mean_jaccard:.6f}", f"{agg.hit_accuracy:.6f}"]
            )

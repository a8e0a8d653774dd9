"""Interactive correction loop: query selection, feedback, refutations,
periodic retraining, and the five acquisition strategies."""

import hashlib
import json
import time
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np

from .classifier import TrainConfig
from .imaging import (
    AUGMENT_OPS,
    BinaryMask,
    Image,
    augment,
    composite,
    zoom_region,
)
from .metrics import classification_metrics, confusion_from_labels
from .neighbors import NeighborNotFound, build_codebook, near_hit, near_miss

STRATEGIES = ("RandomAdd", "ActiveLearning", "NearAL", "CAIPI", "NearCAIPI")


def _derive_seed(master: int, index: int) -> int:
    return int(np.random.SeedSequence([master, index]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# feedback

@dataclass(frozen=True)
class Feedback:
    """Expert verdict on one prediction/explanation pair."""

    prediction_correct: bool
    explanation_correct: bool
    corrected_label: str | None = None
    corrected_mask: BinaryMask | None = None
    source: str = "oracle"

    def __post_init__(self) -> None:
        if not self.prediction_correct and self.corrected_label is None:
            raise ValueError("rejected prediction needs a corrected label")
        # A rejected explanation needs the true defect region, which only
        # exists for NOK; OK corrections carry no mask by construction.
        if (not self.explanation_correct and self.corrected_label == "NOK"
                and self.corrected_mask is None):
            raise ValueError("rejected NOK explanation needs a corrected mask")
        if self.corrected_label not in (None, "OK", "NOK"):
            raise ValueError(f"bad corrected label {self.corrected_label!r}")
        if self.source not in ("oracle", "human"):
            raise ValueError(f"bad feedback source {self.source!r}")

    def as_dict(self) -> dict:
        return {
            "prediction_correct": self.prediction_correct,
            "explanation_correct": self.explanation_correct,
            "corrected_label": self.corrected_label,
            "corrected_mask_pixels": (None if self.corrected_mask is None
                                      else self.corrected_mask.count()),
            "source": self.source,
        }


def oracle_feedback(instance, confidence: float, saliency=None) -> Feedback:
    """Simulated expert: always corrects by ground truth.

    The explanation is always marked wrong and replaced with the expert
    mask, so the returned feedback never depends on `saliency`.
    """
    predicted = "NOK" if confidence >= 0.5 else "OK"
    return Feedback(
        prediction_correct=(predicted == instance.label),
        explanation_correct=False,
        corrected_label=instance.label,
        corrected_mask=instance.defect_mask if instance.label == "NOK" else None,
        source="oracle",
    )


oracle_feedback.needs_explanation = False


# ---------------------------------------------------------------------------
# refutations

@dataclass(frozen=True)
class Refutation:
    """Derived training instance challenging an explanation, not a label."""

    image: Image
    label: str
    provenance: tuple[str, str]  # (source instance id, transform)


def _square_window(box, side):
    # bbox padded to a square crop window, clamped inside the frame
    x0, y0, w, h = box
    half = (max(w, h) + 8) // 2
    cx, cy = x0 + w // 2, y0 + h // 2
    win = min(side, 2 * half)
    wx = min(max(cx - win // 2, 0), side - win)
    wy = min(max(cy - win // 2, 0), side - win)
    return wx, wy, win


def _random_augmentation(image, label, source_id, rng):
    op = AUGMENT_OPS[int(rng.integers(len(AUGMENT_OPS)))]
    return Refutation(augment(image, op), label, (source_id, f"augment({op})"))


def generate_refutations(
    instance,
    effective_mask: BinaryMask | None,
    label: str,
    backgrounds,
    rng,
    count: int = 4,
) -> list[Refutation]:
    """Derived instances probing the located region; empty for count 0.

    Defaults: zoom-in on the region at scale 2, zoom-out at 0.5, one
    dihedral augmentation, and for NOK a composite of the defect onto a
    random background (OK gets a second augmentation).  count == 0 draws
    nothing from `rng` and returns [].
    """
    if count == 0:
        return []
    image = instance.image
    side = image.side
    sid = instance.id
    if label == "NOK":
        if effective_mask is None or effective_mask.count() == 0:
            raise ValueError("NOK refutations need a nonempty region mask")
        box = effective_mask.bounding_box()
    else:
        box = (0, 0, side, side)

    out: list[Refutation] = []
    if len(out) < count:
        out.append(Refutation(zoom_region(image, box, 2.0), label,
                              (sid, "zoom(2.0)")))
    if len(out) < count:
        out.append(Refutation(zoom_region(image, box, 0.5), label,
                              (sid, "zoom(0.5)")))
    if len(out) < count:
        out.append(_random_augmentation(image, label, sid, rng))
    if len(out) < count:
        if label == "NOK" and len(backgrounds) > 0:
            bg_idx = int(rng.integers(len(backgrounds)))
            bg = backgrounds[bg_idx]
            wx, wy, win = _square_window(box, side)
            patch = Image(image.pixels[wy:wy + win, wx:wx + win])
            pmask = BinaryMask(
                effective_mask.values[wy:wy + win, wx:wx + win])
            ox = int(rng.integers(bg.side - win + 1))
            oy = int(rng.integers(bg.side - win + 1))
            comp, _ = composite(patch, pmask, bg, (ox, oy))
            out.append(Refutation(
                comp, label, (sid, f"composite(bg={bg_idx}, x={ox}, y={oy})")))
        else:
            if label == "NOK":
                warnings.warn("no background textures; composite refutation "
                              "replaced by an augmentation")
            out.append(_random_augmentation(image, label, sid, rng))
    while len(out) < count:
        out.append(_random_augmentation(image, label, sid, rng))
    return out


# ---------------------------------------------------------------------------
# loop configuration and state

@dataclass(frozen=True)
class LoopConfig:
    strategy: str
    interactions_per_iteration: int
    iteration_budget: int
    train: TrainConfig
    refutation_count: int = 4
    accuracy_threshold: float | None = None
    pool_holdout_fraction: float = 0.0
    saliency_fraction: float = 0.10
    near_branch_enabled: bool = True  # ablation switch for structure tests

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.interactions_per_iteration < 1:
            raise ValueError("interactions_per_iteration must be >= 1")
        if self.iteration_budget < 0:
            raise ValueError("iteration_budget must be >= 0")
        if self.refutation_count < 0:
            raise ValueError("refutation_count must be >= 0")
        if not 0.0 <= self.pool_holdout_fraction < 1.0:
            raise ValueError("pool_holdout_fraction must be in [0, 1)")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class LoopState:
    """Mutable state of one run; T and U as (id, label) items and ids."""

    instances: dict
    train_items: list  # (id, label the item entered T with)
    refutations: list
    pool_ids: list
    classifier: object
    rng: np.random.Generator
    backgrounds: tuple = ()
    codebook: object = None
    pool_conf: dict = field(default_factory=dict)
    events: list = field(default_factory=list)
    step_count: int = 0
    iteration: int = 0

    def train_size(self) -> int:
        return len(self.train_items) + len(self.refutations)

    def refresh_pool_view(self) -> None:
        """Rebuild the retrieval codebook and cached pool confidences."""
        pool = [self.instances[i] for i in self.pool_ids]
        self.codebook = build_codebook(pool, self.classifier)
        conf = self.classifier.predict_batch([p.image for p in pool])
        self.pool_conf = {p.id: float(c) for p, c in zip(pool, conf)}


def select_query(pool_ids, classifier, strategy, rng, confidences=None) -> str:
    """Pick the next pool id: uniform for RandomAdd, else max uncertainty.

    Uncertainty ranking minimizes max(f, 1-f); ties break toward the
    smallest id.  Only RandomAdd consumes randomness.
    """
    if len(pool_ids) == 0:
        raise ValueError("pool is exhausted")
    if strategy == "RandomAdd":
        return pool_ids[int(rng.integers(len(pool_ids)))]
    if confidences is None:
        raise ValueError("uncertainty selection needs pool confidences")
    return min(pool_ids, key=lambda i: (max(confidences[i],
                                            1.0 - confidences[i]), i))


# ---------------------------------------------------------------------------
# one step

def _effective_mask(feedback, saliency, fraction):
    """Region the refutations challenge: the correction, else the map."""
    if not feedback.explanation_correct:
        return feedback.corrected_mask
    if saliency is None:
        return None
    from .saliency import binarize_topfraction

    return binarize_topfraction(saliency, fraction)


def _neighbor_lookup(state, qid, label, event_warnings):
    found = {}
    for role, fn in (("hit", near_hit), ("miss", near_miss)):
        try:
            found[role] = fn(state.codebook, qid, label)
        except NeighborNotFound:
            event_warnings.append(f"near {role} of {qid} not found")
    return found


def step(state: LoopState, config: LoopConfig,
         feedback_fn=oracle_feedback, explainer=None) -> dict:
    """Run one acquisition: select, get feedback, mutate T and U.

    Returns the JSON-ready event record, already appended to
    state.events.  Strategy-independent event shape so ablated runs can
    be compared log-for-log.
    """
    strategy = config.strategy
    state.step_count += 1
    event_warnings: list[str] = []
    qid = select_query(state.pool_ids, state.classifier, strategy,
                       state.rng, state.pool_conf)
    inst = state.instances[qid]
    conf = state.pool_conf.get(qid)
    if conf is None:
        conf = float(state.classifier.predict(inst.image))
    predicted = "NOK" if conf >= 0.5 else "OK"

    moved = []  # (id, label entering T)
    refutations: list[Refutation] = []
    neighbors = []
    feedback = None

    if strategy == "RandomAdd":
        moved.append((qid, inst.label))
    else:
        needs_exp = getattr(feedback_fn, "needs_explanation", True)
        sal = None
        wants_refs = strategy in ("CAIPI", "NearCAIPI")
        if needs_exp and explainer is not None and wants_refs:
            sal = explainer(state.classifier, inst.image)
        feedback = feedback_fn(inst, conf, sal)
        label = feedback.corrected_label or inst.label
        moved.append((qid, label))

        if wants_refs:
            refutations.extend(generate_refutations(
                inst, _effective_mask(feedback, sal, config.saliency_fraction),
                label, state.backgrounds, state.rng, config.refutation_count))

        wrong = not feedback.prediction_correct
        if strategy == "NearAL" and wrong:
            for role, nid in _neighbor_lookup(
                    state, qid, inst.label, event_warnings).items():
                ninst = state.instances[nid]
                moved.append((nid, ninst.label))
                neighbors.append({"id": nid, "role": role,
                                  "confidence": state.pool_conf.get(nid),
                                  "feedback": None})
        elif (strategy == "NearCAIPI" and wrong
                and config.near_branch_enabled):
            for role, nid in _neighbor_lookup(
                    state, qid, inst.label, event_warnings).items():
                ninst = state.instances[nid]
                nconf = state.pool_conf.get(nid)
                if nconf is None:
                    nconf = float(state.classifier.predict(ninst.image))
                nsal = None
                if needs_exp and explainer is not None:
                    nsal = explainer(state.classifier, ninst.image)
                nfb = feedback_fn(ninst, nconf, nsal)
                nlabel = nfb.corrected_label or ninst.label
                moved.append((nid, nlabel))
                refutations.extend(generate_refutations(
                    ninst, _effective_mask(nfb, nsal,
                                           config.saliency_fraction),
                    nlabel, state.backgrounds, state.rng,
                    config.refutation_count))
                neighbors.append({"id": nid, "role": role,
                                  "confidence": nconf,
                                  "feedback": nfb.as_dict()})

    moved_ids = [mid for mid, _ in moved]
    state.train_items.extend(moved)
    state.refutations.extend(refutations)
    state.pool_ids = [i for i in state.pool_ids if i not in moved_ids]
    if state.codebook is not None:
        state.codebook = state.codebook.without(moved_ids)

    event = {
        "step": state.step_count,
        "iteration": state.iteration,
        "selected": qid,
        "confidence": conf,
        "predicted_label": predicted,
        "feedback": None if feedback is None else feedback.as_dict(),
        "neighbors": neighbors,
        "moved": [{"id": mid, "label": lbl} for mid, lbl in moved],
        "refutations": [list(r.provenance) for r in refutations],
        "warnings": event_warnings,
    }
    state.events.append(event)
    return event


# ---------------------------------------------------------------------------
# full runs

@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    accuracy: float
    f1: float
    mcc: float
    train_size: int
    pool_size: int


@dataclass
class RunRecord:
    strategy: str
    seed: int
    config_digest: str
    iterations: list
    events: list
    stop_reason: str
    wall_clock: float
    held_out: tuple = ()


def _evaluate(classifier, test_instances) -> dict[str, float]:
    probs = classifier.predict_batch([t.image for t in test_instances])
    predicted = ["NOK" if p >= 0.5 else "OK" for p in probs]
    true = [t.label for t in test_instances]
    return classification_metrics(confusion_from_labels(predicted, true))


def _training_pairs(state):
    pairs = [(state.instances[i].image, lbl) for i, lbl in state.train_items]
    pairs.extend((r.image, r.label) for r in state.refutations)
    return pairs


def run(
    instances,
    split,
    classifier,
    scorer_factory,
    config: LoopConfig,
    seed: int,
    backgrounds=(),
    feedback_fn=oracle_feedback,
    explainer=None,
) -> RunRecord:
    """Drive the loop for the configured budget from a trained classifier.

    Retraining happens after every completed block of N steps, from
    scratch on the grown training set with a fresh seed-derived
    initialization; the codebook and cached pool confidences are rebuilt
    after each retraining.  Stops early on pool exhaustion (partial
    record) or on reaching the accuracy threshold.
    """
    t0 = time.time()
    byid = {i.id: i for i in instances}
    test = [byid[i] for i in split.test]
    val_pairs = [(byid[i].image, byid[i].label) for i in split.validation]
    pool = list(split.interactive)

    rng = np.random.default_rng(seed)
    held: tuple = ()
    n_hold = int(config.pool_holdout_fraction * len(pool))
    if n_hold > 0:
        order = rng.permutation(len(pool))
        held = tuple(pool[i] for i in sorted(order[:n_hold]))
        keep = set(order[n_hold:])
        pool = [pid for i, pid in enumerate(pool) if i in keep]

    state = LoopState(
        instances=byid,
        train_items=[(i, byid[i].label) for i in split.train],
        refutations=[],
        pool_ids=pool,
        classifier=classifier,
        rng=rng,
        backgrounds=tuple(backgrounds),
    )
    state.refresh_pool_view()

    m = _evaluate(classifier, test)
    records = [IterationRecord(0, m["accuracy"], m["f1"], m["mcc"],
                               state.train_size(), len(state.pool_ids))]
    stop_reason = "budget"
    retrains = 0
    for iteration in range(1, config.iteration_budget + 1):
        state.iteration = iteration
        completed = 0
        for _ in range(config.interactions_per_iteration):
            if len(state.pool_ids) == 0:
                break
            step(state, config, feedback_fn, explainer)
            completed += 1
        if completed < config.interactions_per_iteration:
            # partial block: no retraining for it, clean early stop
            stop_reason = "pool_exhausted"
            break
        retrains += 1
        scorer = scorer_factory(_derive_seed(seed, retrains))
        scorer.train(_training_pairs(state), val_pairs, config.train)
        state.classifier = scorer
        state.refresh_pool_view()
        m = _evaluate(scorer, test)
        records.append(IterationRecord(
            iteration, m["accuracy"], m["f1"], m["mcc"],
            state.train_size(), len(state.pool_ids)))
        if (config.accuracy_threshold is not None
                and m["accuracy"] >= config.accuracy_threshold):
            stop_reason = "accuracy_threshold"
            break

    return RunRecord(
        strategy=config.strategy,
        seed=seed,
        config_digest=config.digest(),
        iterations=records,
        events=state.events,
        stop_reason=stop_reason,
        wall_clock=time.time() - t0,
        held_out=held,
    )


def compare_strategies(
    instances,
    split,
    scorer_factory,
    config: LoopConfig,
    seeds,
    strategies=STRATEGIES,
    backgrounds=(),
    feedback_fn=oracle_feedback,
    explainer=None,
) -> list[RunRecord]:
    """Run every strategy from identical initial parameters per seed."""
    from dataclasses import replace

    byid = {i.id: i for i in instances}
    train_pairs = [(byid[i].image, byid[i].label) for i in split.train]
    val_pairs = [(byid[i].image, byid[i].label) for i in split.validation]
    records = []
    for seed in seeds:
        init_seed = _derive_seed(seed, 0)
        base = scorer_factory(init_seed)
        base.train(train_pairs, val_pairs, config.train)
        snap = base.snapshot()
        for strategy in strategies:
            sc = scorer_factory(init_seed)
            sc.restore(snap)
            sc.version = base.version
            records.append(run(
                instances, split, sc, scorer_factory,
                replace(config, strategy=strategy), seed,
                backgrounds=backgrounds, feedback_fn=feedback_fn,
                explainer=explainer))
    return records


# ---------------------------------------------------------------------------
# persistence of results

CSV_HEADER = "strategy,iteration,acc,f1,mcc,|T|,|U|"


def write_comparison_csv(records, path) -> None:
    lines = [CSV_HEADER]
    for rec in records:
        for it in rec.iterations:
            lines.append(
                f"{rec.strategy},{it.iteration},{it.accuracy:.6f},"
                f"{it.f1:.6f},{it.mcc:.6f},{it.train_size},{it.pool_size}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def event_log_payload(record: RunRecord) -> dict:
    """JSON document for one run; excludes wall-clock so reruns match."""
    return {
        "strategy": record.strategy,
        "seed": record.seed,
        "config_digest": record.config_digest,
        "stop_reason": record.stop_reason,
        "held_out": list(record.held_out),
        "iterations": [asdict(it) for it in record.iterations],
        "events": record.events,
    }


def write_event_log(record: RunRecord, path) -> None:
    with open(path, "w") as fh:
        json.dump(event_log_payload(record), fh, indent=1, sort_keys=True)
        fh.write("\n")


def training_set_from_events(initial_items, events) -> tuple[list, list]:
    """Rebuild (train items, refutation provenances) from a log.

    The event log alone determines T, which is what makes any step
    reversible: replaying all events but one yields the counterfactual
    training set without that interaction.
    """
    items = list(initial_items)
    provenances = []
    for event in events:
        items.extend((m["id"], m["label"]) for m in event["moved"])
        provenances.extend(tuple(r) for r in event["refutations"])
    return items, provenances

"""Overlap scores, confusion-matrix summaries, and explanation evaluation."""

import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from invrise.imaging import BinaryMask, Image
from invrise.metrics import (
    ConfusionMatrix,
    classification_metrics,
    confusion_from_labels,
    dice,
    evaluate_explanations,
    hit,
    jaccard,
    write_aggregate_csv,
)
from invrise.saliency import SaliencyMap, sample_masks

from .oracles import (
    accuracy_oracle,
    confusion_oracle,
    dice_oracle,
    f1_oracle,
    hit_oracle,
    jaccard_oracle,
    mcc_oracle,
)


def bm(values) -> BinaryMask:
    return BinaryMask(np.asarray(values, dtype=np.uint8))


def random_mask(rng, side=6) -> BinaryMask:
    return bm(rng.integers(0, 2, size=(side, side)))


class TestDiceJaccard:
    def test_identical_nonempty_masks(self):
        a = bm(np.eye(4, dtype=int))
        assert dice(a, a) == 1.0
        assert jaccard(a, a) == 1.0

    def test_disjoint_nonempty_masks(self):
        a = np.zeros((4, 4), dtype=int)
        b = np.zeros((4, 4), dtype=int)
        a[0, :] = 1
        b[2, :] = 1
        assert dice(bm(a), bm(b)) == 0.0
        assert jaccard(bm(a), bm(b)) == 0.0

    def test_half_overlap_counts(self):
        # |A| = |B| = 4 with 2 shared pixels
        a = np.zeros((4, 4), dtype=int)
        b = np.zeros((4, 4), dtype=int)
        a[0, 0:4] = 1
        b[0, 2:4] = 1
        b[1, 0:2] = 1
        assert dice(bm(a), bm(b)) == 0.5
        assert jaccard(bm(a), bm(b)) == pytest.approx(1.0 / 3.0)

    def test_both_empty_convention(self):
        e = bm(np.zeros((3, 3), dtype=int))
        assert dice(e, e) == 1.0
        assert jaccard(e, e) == 1.0

    def test_side_mismatch_rejected(self):
        with pytest.raises(ValueError):
            dice(bm(np.zeros((3, 3), dtype=int)), bm(np.zeros((4, 4), dtype=int)))
        with pytest.raises(ValueError):
            jaccard(bm(np.zeros((3, 3), dtype=int)), bm(np.zeros((4, 4), dtype=int)))

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=50, deadline=None)
    def test_matches_counting_oracle_and_identities(self, seed):
        rng = np.random.default_rng(seed)
        a, b = random_mask(rng), random_mask(rng)
        d = dice(a, b)
        j = jaccard(a, b)
        assert d == dice_oracle(a.values, b.values)
        assert j == jaccard_oracle(a.values, b.values)
        assert dice(b, a) == d and jaccard(b, a) == j
        assert 0.0 <= j <= d <= 1.0
        assert d == pytest.approx(2.0 * j / (1.0 + j)) if j > 0 else d == (1.0 if a.count() + b.count() == 0 else 0.0)


class TestHit:
    def test_max_on_expert_pixel(self):
        values = np.zeros((4, 4))
        values[2, 3] = 1.0
        expert = np.zeros((4, 4), dtype=int)
        expert[2, 3] = 1
        sal = SaliencyMap(values, method="InvRISE", target_class="NOK")
        assert hit(sal, bm(expert)) is True

    def test_max_off_expert_pixel(self):
        values = np.zeros((4, 4))
        values[0, 0] = 1.0
        expert = np.zeros((4, 4), dtype=int)
        expert[3, 3] = 1
        sal = SaliencyMap(values, method="InvRISE", target_class="NOK")
        assert hit(sal, bm(expert)) is False

    def test_constant_saliency_tie_picks_origin(self):
        expert = np.zeros((4, 4), dtype=int)
        expert[0, 0] = 1
        sal = SaliencyMap(np.ones((4, 4)), method="RISE", target_class="NOK")
        assert hit(sal, bm(expert)) is True
        expert2 = np.zeros((4, 4), dtype=int)
        expert2[1, 1] = 1
        assert hit(sal, bm(expert2)) is False

    def test_empty_expert_mask_rejected(self):
        sal = SaliencyMap(np.ones((3, 3)), method="RISE", target_class="NOK")
        with pytest.raises(ValueError):
            hit(sal, bm(np.zeros((3, 3), dtype=int)))

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=50, deadline=None)
    def test_matches_scan_oracle(self, seed):
        rng = np.random.default_rng(seed)
        values = rng.random((5, 5))
        expert = rng.integers(0, 2, size=(5, 5))
        if expert.sum() == 0:
            expert[2, 2] = 1
        sal = SaliencyMap(values, method="InvRISE", target_class="NOK")
        assert hit(sal, bm(expert)) == hit_oracle(values, expert)


class TestClassificationMetrics:
    def test_perfect_predictions(self):
        m = classification_metrics(ConfusionMatrix(tp=5, fp=0, tn=7, fn=0))
        assert m == {"accuracy": 1.0, "f1": 1.0, "mcc": 1.0}

    def test_all_ones_matrix(self):
        m = classification_metrics(ConfusionMatrix(tp=1, fp=1, tn=1, fn=1))
        assert m["accuracy"] == 0.5
        assert m["f1"] == 0.5
        assert m["mcc"] == 0.0

    def test_f1_two_thirds_case(self):
        m = classification_metrics(ConfusionMatrix(tp=2, fp=1, tn=0, fn=1))
        assert m["f1"] == pytest.approx(2.0 / 3.0)

    def test_zero_denominator_conventions(self):
        # no positive predictions and no positive truths → f1 and mcc fall back to 0
        m = classification_metrics(ConfusionMatrix(tp=0, fp=0, tn=4, fn=0))
        assert m["f1"] == 0.0
        assert m["mcc"] == 0.0

    def test_empty_matrix_rejected(self):
        with pytest.raises(ValueError):
            classification_metrics(ConfusionMatrix())
        with pytest.raises(ValueError):
            ConfusionMatrix(tp=-1, fp=0, tn=0, fn=0)

    @given(st.integers(0, 12), st.integers(0, 12), st.integers(0, 12), st.integers(0, 12))
    @settings(max_examples=80, deadline=None)
    def test_matches_formula_oracles(self, tp, fp, tn, fn):
        if tp + fp + tn + fn == 0:
            return
        m = classification_metrics(ConfusionMatrix(tp=tp, fp=fp, tn=tn, fn=fn))
        assert m["accuracy"] == pytest.approx(accuracy_oracle(tp, fp, tn, fn))
        assert m["f1"] == pytest.approx(f1_oracle(tp, fp, tn, fn))
        assert m["mcc"] == pytest.approx(mcc_oracle(tp, fp, tn, fn))
        assert -1.0 <= m["mcc"] <= 1.0
        # exact label-swap antisymmetry
        swapped = classification_metrics(ConfusionMatrix(tp=fn, fp=tn, tn=fp, fn=tp))
        assert swapped["mcc"] == pytest.approx(-m["mcc"])


class TestConfusionFromLabels:
    def test_counts_match_oracle(self):
        rng = np.random.default_rng(0)
        pred = [["OK", "NOK"][i] for i in rng.integers(0, 2, 40)]
        true = [["OK", "NOK"][i] for i in rng.integers(0, 2, 40)]
        cm = confusion_from_labels(pred, true)
        assert (cm.tp, cm.fp, cm.tn, cm.fn) == confusion_oracle(pred, true)
        assert cm.total == 40

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            confusion_from_labels(["OK"], ["OK", "NOK"])


class FixedSaliencyClassifier:
    """Scores a masked image by how much of a target box stays visible.

    Gives both engines a deterministic, localized signal, so binarized
    maps concentrate on the box.
    """

    def __init__(self, box: tuple[int, int, int, int]):
        self.y0, self.x0, self.h, self.w = box

    def predict(self, image: Image) -> float:
        region = image.pixels[self.y0 : self.y0 + self.h, self.x0 : self.x0 + self.w]
        return float(np.clip(region.mean() * 1.2, 0.0, 1.0))

    def predict_batch(self, images):
        return np.array([self.predict(img) for img in images])


class _Inst:
    def __init__(self, iid, image, mask):
        self.id = iid
        self.image = image
        self.defect_mask = mask


class TestEvaluateExplanations:
    def _instances(self, side=16):
        expert = np.zeros((side, side), dtype=int)
        expert[4:8, 5:9] = 1
        image = Image(np.full((side, side, 1), 0.9))
        return [_Inst("a-0", image, bm(expert))]

    def test_perfect_overlap_scores_ones(self):
        # binarized map equals the expert mask by construction: the
        # classifier output is exactly the mean mask value on the box
        side = 16
        insts = self._instances(side)
        ms = sample_masks(k=400, l=4, side=side, seed=3)
        clf = FixedSaliencyClassifier((4, 5, 4, 4))
        agg = evaluate_explanations(insts, clf, ms, method="InvRISE", fraction=16 / 256)
        assert agg.evaluated == 1
        assert agg.hit_accuracy in (0.0, 1.0)
        assert 0.0 <= agg.mean_dice <= 1.0
        assert agg.scores[0].jaccard <= agg.scores[0].dice

    def test_instances_without_masks_skipped_with_warning(self):
        side = 12
        insts = self._instances(side) + [_Inst("b-0", Image(np.zeros((side, side, 1))), None)]
        ms = sample_masks(k=100, l=4, side=side, seed=4)
        clf = FixedSaliencyClassifier((4, 5, 4, 4))
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            agg = evaluate_explanations(insts, clf, ms, method="RISE")
        assert agg.evaluated == 1 and agg.skipped == 1
        assert any("b-0" in str(w.message) for w in caught)

    def test_all_skipped_rejected(self):
        ms = sample_masks(k=10, l=2, side=8, seed=5)
        insts = [_Inst("c-0", Image(np.zeros((8, 8, 1))), None)]
        with pytest.raises(ValueError), warnings.catch_warnings():
            warnings.simplefilter("ignore")
            evaluate_explanations(insts, FixedSaliencyClassifier((0, 0, 2, 2)), ms)

    def test_unknown_method_rejected(self):
        ms = sample_masks(k=10, l=2, side=8, seed=6)
        with pytest.raises(ValueError):
            evaluate_explanations(self._instances(8), FixedSaliencyClassifier((0, 0, 2, 2)),
                                  ms, method="LIME")

    def test_hit_fraction_over_two_instances(self):
        side = 12
        expert_far = np.zeros((side, side), dtype=int)
        expert_far[0, 0] = 1
        insts = self._instances(side) + [
            _Inst("far-0", Image(np.full((side, side, 1), 0.9)), bm(expert_far))
        ]
        ms = sample_masks(k=300, l=4, side=side, seed=7)
        clf = FixedSaliencyClassifier((4, 5, 4, 4))
        agg = evaluate_explanations(insts, clf, ms, method="InvRISE")
        assert agg.hit_accuracy in (0.0, 0.5, 1.0)

    def test_csv_layout(self, tmp_path):
        side = 12
        ms = sample_masks(k=100, l=4, side=side, seed=8)
        clf = FixedSaliencyClassifier((4, 5, 4, 4))
        aggs = [
            evaluate_explanations(self._instances(side), clf, ms, method=m)
            for m in ("RISE", "InvRISE")
        ]
        path = tmp_path / "table.csv"
        write_aggregate_csv(aggs, model="builtin", path=path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "method,model,dice,jaccard,hit_acc"
        assert lines[1].startswith("RISE,builtin,")
        assert lines[2].startswith("InvRISE,builtin,")
        assert len(lines) == 3

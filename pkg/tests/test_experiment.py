"""Tests for experiment configuration, comparison runs, and replay."""

import dataclasses
import json

import numpy as np
import pytest

from invrise.experiment import (
    ExperimentConfig,
    ReplayMismatch,
    load_experiment_config,
    occlusion_augmented_pairs,
    replay_runs,
    run_compare,
)
from invrise.imaging import BinaryMask, Image
from invrise.interaction import CSV_HEADER
from invrise.saliency import MaskSet


def tiny_config(**overrides):
    """Small enough that a full comparison finishes in seconds."""
    base = dict(
        n_ok=16, n_no_seam=6, n_nok=16, side=24, dataset_seed=4,
        split_ratios=(0.4, 0.2, 0.2, 0.2), n_backgrounds=3,
        scorer_side=16, scorer_dtype="float32",
        train={"learning_rate": 0.01, "momentum": 0.9, "patience": 4,
               "max_epochs": 4, "batch_size": 8, "seed": 0},
        mask_k=40, mask_l=4, mask_p=0.5,
        strategies=("RandomAdd", "ActiveLearning"),
        interactions_per_iteration=2, iteration_budget=1, seeds=(0,),
    )
    base.update(overrides)
    return ExperimentConfig(**base)


class TestExperimentConfig:
    def test_defaults_are_valid(self):
        config = ExperimentConfig()
        assert config.side == 64
        assert len(config.strategies) == 5
        assert config.seeds == (0,)

    def test_digest_is_stable(self):
        assert tiny_config().digest() == tiny_config().digest()

    def test_digest_tracks_field_changes(self):
        assert tiny_config().digest() != tiny_config(mask_k=41).digest()

    def test_round_trip_through_file(self, tmp_path):
        config = tiny_config()
        path = tmp_path / "config.json"
        path.write_text(json.dumps(config.to_dict()))
        assert load_experiment_config(path) == config

    def test_overrides_beat_file_values(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps(tiny_config().to_dict()))
        loaded = load_experiment_config(path, {"seeds": [3, 4]})
        assert loaded.seeds == (3, 4)

    def test_none_override_is_skipped(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps(tiny_config().to_dict()))
        assert load_experiment_config(path, {"seeds": None}).seeds == (0,)

    def test_unknown_field_rejected(self, tmp_path):
        doc = tiny_config().to_dict()
        doc["masq_k"] = 40
        path = tmp_path / "config.json"
        path.write_text(json.dumps(doc))
        with pytest.raises((TypeError, ValueError)):
            load_experiment_config(path)

    def test_non_object_config_rejected(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text("[1, 2]")
        with pytest.raises(ValueError):
            load_experiment_config(path)

    def test_empty_seeds_rejected(self):
        with pytest.raises(ValueError):
            tiny_config(seeds=())

    def test_unknown_strategy_rejected(self):
        with pytest.raises(ValueError):
            tiny_config(strategies=("Osmosis",))

    def test_bad_dtype_rejected(self):
        with pytest.raises(ValueError):
            tiny_config(scorer_dtype="float16")

    def test_loop_config_carries_train_settings(self):
        config = tiny_config()
        loop = config.loop_config("ActiveLearning")
        assert loop.strategy == "ActiveLearning"
        assert loop.train.max_epochs == 4
        assert loop.interactions_per_iteration == 2


def hand_mask_set(side=8):
    """Two masks: one reveals everything, one hides everything."""
    grids = np.stack([np.ones((2, 2)), np.zeros((2, 2))])
    masks = np.stack([np.ones((side, side)), np.zeros((side, side))])
    return MaskSet(k=2, l=2, p=0.5, side=side, seed=0,
                   grid_values=grids, mask_values=masks,
                   occlusion_prob=np.full((side, side), 0.5))


@dataclasses.dataclass
class _Inst:
    id: str
    image: Image
    label: str
    defect_mask: BinaryMask | None = None


class TestOcclusionAugmentedPairs:
    def make_nok(self, side=8):
        mask = np.zeros((side, side), dtype=np.uint8)
        mask[2:4, 2:4] = 1
        return _Inst("nok-0", Image(np.full((side, side, 1), 0.7)), "NOK",
                     BinaryMask(mask))

    def test_originals_come_first_with_their_labels(self):
        inst = self.make_nok()
        pairs = occlusion_augmented_pairs([inst], hand_mask_set(),
                                          np.random.default_rng(0),
                                          per_image=2)
        assert pairs[0][1] == "NOK"
        assert np.array_equal(pairs[0][0].pixels, inst.image.pixels)

    def test_ok_variants_keep_the_ok_label(self):
        inst = _Inst("ok-0", Image(np.full((8, 8, 1), 0.5)), "OK")
        pairs = occlusion_augmented_pairs([inst], hand_mask_set(),
                                          np.random.default_rng(0),
                                          per_image=3)
        assert len(pairs) == 4
        assert all(label == "OK" for _, label in pairs)

    def test_fully_visible_defect_keeps_nok(self):
        # the all-ones mask leaves the defect fully visible
        inst = self.make_nok()
        pairs = occlusion_augmented_pairs([inst], hand_mask_set(),
                                          np.random.default_rng(0),
                                          per_image=4)
        kept = [(img, lbl) for img, lbl in pairs[1:]
                if np.array_equal(img.pixels, inst.image.pixels)]
        assert kept and all(lbl == "NOK" for _, lbl in kept)

    def test_fully_hidden_defect_flips_to_ok(self):
        # the all-zeros mask hides the defect (and everything else)
        inst = self.make_nok()
        pairs = occlusion_augmented_pairs([inst], hand_mask_set(),
                                          np.random.default_rng(0),
                                          per_image=4)
        dark = [(img, lbl) for img, lbl in pairs[1:]
                if float(img.pixels.max()) == 0.0]
        assert dark and all(lbl == "OK" for _, lbl in dark)

    def test_variants_never_brighten_pixels(self):
        inst = self.make_nok()
        ms = hand_mask_set()
        pairs = occlusion_augmented_pairs([inst], ms,
                                          np.random.default_rng(1),
                                          per_image=4)
        for img, _ in pairs[1:]:
            assert (img.pixels <= inst.image.pixels + 1e-12).all()

    def test_variant_count_is_bounded(self):
        inst = self.make_nok()
        pairs = occlusion_augmented_pairs([inst], hand_mask_set(),
                                          np.random.default_rng(2),
                                          per_image=3)
        assert len(pairs) <= 1 + 3

    def test_partial_visibility_band_is_skipped(self):
        # a mask showing half the defect falls between the bands; with only
        # that mask available no variant can be produced
        side = 8
        half = np.zeros((side, side))
        half[:, :3] = 1.0  # covers half of the 2x2 defect at columns 2:4
        ms = MaskSet(k=1, l=2, p=0.5, side=side, seed=0,
                     grid_values=np.zeros((1, 2, 2)),
                     mask_values=half[None],
                     occlusion_prob=np.full((side, side), 0.5))
        inst = self.make_nok(side)
        pairs = occlusion_augmented_pairs([inst], ms,
                                          np.random.default_rng(0),
                                          per_image=2)
        assert len(pairs) == 1  # original only, all tries rejected


@pytest.fixture(scope="module")
def outcome(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs")
    config = tiny_config(output_dir=str(out))
    records = run_compare(config)
    return config, records, out


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("replay")
    config = tiny_config(output_dir=str(out))
    run_compare(config)
    return out


class TestRunCompare:
    def test_one_record_per_strategy_seed(self, outcome):
        config, records, _ = outcome
        assert len(records) == len(config.strategies) * len(config.seeds)

    def test_csv_row_count_matches_grid(self, outcome):
        config, records, out = outcome
        lines = (out / "comparison.csv").read_text().strip().splitlines()
        assert lines[0] == CSV_HEADER
        expected = sum(len(r.iterations) for r in records)
        assert len(lines) - 1 == expected
        assert expected == (len(config.strategies) * len(config.seeds)
                            * (config.iteration_budget + 1))

    def test_event_log_written_per_run(self, outcome):
        config, records, out = outcome
        for record in records:
            path = out / "events" / f"{record.strategy}-seed{record.seed}.json"
            doc = json.loads(path.read_text())
            assert doc["strategy"] == record.strategy
            assert doc["config_digest"] == record.config_digest
            assert "wall_clock" not in doc

    def test_config_document_written(self, outcome):
        config, _, out = outcome
        stored = json.loads((out / "config.json").read_text())
        assert stored == config.to_dict()

    def test_rerun_is_bit_identical(self, outcome, tmp_path):
        config, _, out = outcome
        rerun_dir = tmp_path / "rerun"
        run_compare(dataclasses.replace(config, output_dir=str(rerun_dir)))
        for name in ["comparison.csv", "events/RandomAdd-seed0.json",
                     "events/ActiveLearning-seed0.json"]:
            assert (rerun_dir / name).read_bytes() == (out / name).read_bytes()


class TestReplay:
    def test_directory_replay_verifies_everything(self, finished_run):
        verified = replay_runs(finished_run)
        assert "comparison.csv" in verified
        assert "RandomAdd-seed0.json" in verified
        assert "ActiveLearning-seed0.json" in verified

    def test_single_log_replay(self, finished_run):
        verified = replay_runs(finished_run / "events" / "RandomAdd-seed0.json")
        assert verified == ["RandomAdd-seed0.json"]

    def test_tampered_log_is_caught_with_field_name(self, finished_run, tmp_path):
        import shutil

        broken = tmp_path / "broken"
        shutil.copytree(finished_run, broken)
        log = broken / "events" / "RandomAdd-seed0.json"
        doc = json.loads(log.read_text())
        doc["events"][0]["selected"] = "someone-else"
        log.write_text(json.dumps(doc))
        with pytest.raises(ReplayMismatch, match="RandomAdd-seed0"):
            replay_runs(broken)

    def test_tampered_csv_is_caught(self, finished_run, tmp_path):
        import shutil

        broken = tmp_path / "broken-csv"
        shutil.copytree(finished_run, broken)
        csv = broken / "comparison.csv"
        csv.write_text(csv.read_text().replace("RandomAdd,0", "RandomAdd,9", 1))
        with pytest.raises(ReplayMismatch, match="comparison.csv"):
            replay_runs(broken)

    def test_missing_path_errors(self, tmp_path):
        with pytest.raises((FileNotFoundError, ReplayMismatch, ValueError)):
            replay_runs(tmp_path / "nowhere")

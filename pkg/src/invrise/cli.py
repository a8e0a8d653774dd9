"""Command-line front door: dataset generation, training, explanation,
strategy comparison, replay, and the HTTP correction service.

Every subcommand accepts `--config FILE` (one JSON object); explicit flags
override config fields, and the INVRISE_SEED environment variable overrides
the subcommand's seed on top of both.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .classifier import ConvNetScorer, TrainConfig
from .dataset import (
    generate_backgrounds,
    generate_dataset,
    load_backgrounds,
    load_manifest,
    save_backgrounds,
    save_manifest,
    split_dataset,
)
from .experiment import (
    ExperimentConfig,
    load_experiment_config,
    occlusion_augmented_pairs,
    replay_runs,
    run_compare,
)
from .metrics import evaluate_explanations, write_aggregate_csv
from .saliency import invrise, rise, sample_masks, save_overlay, save_saliency

SEED_ENV = "INVRISE_SEED"


def _env_seed() -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise SystemExit(f"{SEED_ENV} must be an integer, got {raw!r}") from exc


def _config_doc(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ValueError(f"config {path} must hold a JSON object")
    return doc


def _pick(args_value, doc: dict, key: str, default):
    """flag > config file > default."""
    if args_value is not None:
        return args_value
    if key in doc:
        return doc[key]
    return default


def _ratios(text):
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 4:
        raise argparse.ArgumentTypeError(
            "ratios must be train,validation,test,interactive")
    return tuple(parts)


def _seed_list(text):
    return tuple(int(p) for p in text.split(","))


# ---------------------------------------------------------------------------
# subcommands

def _cmd_gen_data(args) -> int:
    doc = _config_doc(args.config)
    seed = _pick(args.seed, doc, "dataset_seed", 0)
    env = _env_seed()
    if env is not None:
        seed = env
    cfg = ExperimentConfig(
        n_ok=_pick(args.n_ok, doc, "n_ok", 139),
        n_no_seam=_pick(args.n_no_seam, doc, "n_no_seam", 110),
        n_nok=_pick(args.n_nok, doc, "n_nok", 164),
        side=_pick(args.side, doc, "side", 64),
        dataset_seed=seed,
        split_ratios=_pick(args.ratios, doc, "split_ratios",
                           (0.33, 0.11, 0.06, 0.50)),
        n_backgrounds=_pick(args.backgrounds, doc, "n_backgrounds", 12),
        background_seed=_pick(None, doc, "background_seed", 7),
    )
    out = Path(args.out)
    instances = generate_dataset(cfg.generation_config())
    split = split_dataset(instances, cfg.split_ratios, seed=cfg.dataset_seed)
    save_manifest(instances, split, out)
    save_backgrounds(
        generate_backgrounds(cfg.n_backgrounds, cfg.background_seed,
                             side=cfg.side),
        out / "backgrounds")
    print(f"wrote {len(instances)} instances to {out}")
    return 0


def _train_config_from(args, doc: dict, seed: int) -> TrainConfig:
    base = doc.get("train", {})
    return TrainConfig(
        learning_rate=_pick(args.lr, base, "learning_rate", 0.001),
        momentum=_pick(args.momentum, base, "momentum", 0.9),
        patience=_pick(args.patience, base, "patience", 10),
        max_epochs=_pick(args.epochs, base, "max_epochs", 50),
        batch_size=_pick(args.batch_size, base, "batch_size", 32),
        seed=seed,
    )


def _cmd_train(args) -> int:
    doc = _config_doc(args.config)
    seed = _pick(args.seed, doc.get("train", {}), "seed", 0)
    env = _env_seed()
    if env is not None:
        seed = env
    instances, split = load_manifest(args.data)
    byid = {inst.id: inst for inst in instances}
    train_inst = [byid[i] for i in split.train]
    val_inst = [byid[i] for i in split.validation]

    side = _pick(args.side, doc, "scorer_side", 64)
    dtype = np.float32 if _pick(args.dtype, doc, "scorer_dtype",
                                "float32") == "float32" else np.float64
    scorer = ConvNetScorer(input_side=side, seed=seed, dtype=dtype)
    tc = _train_config_from(args, doc, seed)

    if args.occlusion_augment:
        mask_set = sample_masks(
            k=2000, l=_pick(None, doc, "mask_l", 8),
            p=_pick(None, doc, "mask_p", 0.5),
            side=instances[0].image.side, seed=seed + 1, random_shift=True)
        rng = np.random.default_rng(seed)
        train_pairs = occlusion_augmented_pairs(train_inst, mask_set, rng,
                                                per_image=args.occlusion_augment)
        val_pairs = occlusion_augmented_pairs(val_inst, mask_set, rng,
                                              per_image=max(1, args.occlusion_augment // 2))
    else:
        train_pairs = [(i.image, i.label) for i in train_inst]
        val_pairs = [(i.image, i.label) for i in val_inst]

    log = scorer.train(train_pairs, val_pairs, tc)
    scorer.save_checkpoint(args.out)
    last = log.epochs[-1] if log.epochs else None
    val_part = (f" val_loss {last.val_loss:.4f}" if last is not None
                and last.val_loss is not None else "")
    print(f"trained {len(log.epochs)} epochs (best {log.best_epoch})"
          f"{val_part}; checkpoint {args.out}")
    return 0


def _mask_set_from(args, doc: dict, side: int, env_overrides_seed=False):
    seed = _pick(getattr(args, "mask_seed", None), doc, "mask_seed", 0)
    env = _env_seed()
    if env_overrides_seed and env is not None:
        seed = env
    return sample_masks(
        k=_pick(getattr(args, "k", None), doc, "mask_k", 1000),
        l=_pick(getattr(args, "l", None), doc, "mask_l", 8),
        p=_pick(getattr(args, "p", None), doc, "mask_p", 0.5),
        side=side,
        seed=seed,
        random_shift=bool(_pick(getattr(args, "shift", False) or None,
                                doc, "mask_shift", False)),
    )


def _cmd_explain(args) -> int:
    doc = _config_doc(args.config)
    instances, _ = load_manifest(args.data)
    byid = {inst.id: inst for inst in instances}
    if args.id not in byid:
        raise SystemExit(f"no instance {args.id!r} in {args.data}")
    inst = byid[args.id]
    scorer = ConvNetScorer.load_checkpoint(args.ckpt)
    mask_set = _mask_set_from(args, doc, inst.image.side,
                              env_overrides_seed=True)
    method = _pick(args.method, doc, "saliency_method", "InvRISE")
    engine = invrise if method == "InvRISE" else rise
    saliency = engine(inst.image, scorer, mask_set)
    prefix = Path(args.out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    save_saliency(saliency, prefix.with_suffix(".sal"))
    save_overlay(inst.image, saliency, prefix.with_suffix(".png"))
    conf = scorer.predict(inst.image)
    print(f"{inst.id}: confidence {conf:.4f} ({method}); "
          f"wrote {prefix.with_suffix('.sal')} and {prefix.with_suffix('.png')}")
    return 0


def _cmd_eval_explanations(args) -> int:
    doc = _config_doc(args.config)
    instances, split = load_manifest(args.data)
    byid = {inst.id: inst for inst in instances}
    ids = getattr(split, args.split)
    chosen = [byid[i] for i in ids if byid[i].label == "NOK"]
    if not chosen:
        raise SystemExit(f"split {args.split!r} holds no NOK instances")
    scorer = ConvNetScorer.load_checkpoint(args.ckpt)
    mask_set = _mask_set_from(args, doc, instances[0].image.side,
                              env_overrides_seed=True)
    fraction = _pick(args.fraction, doc, "saliency_fraction", 0.10)
    aggregates = [
        evaluate_explanations(chosen, scorer, mask_set, method=m,
                              fraction=fraction)
        for m in ("RISE", "InvRISE")
    ]
    write_aggregate_csv(aggregates, args.model_name, args.out)
    for agg in aggregates:
        print(f"{agg.method}: dice {agg.mean_dice:.3f} "
              f"jaccard {agg.mean_jaccard:.3f} hit {agg.hit_accuracy:.3f} "
              f"({agg.evaluated} evaluated, {agg.skipped} skipped)")
    print(f"wrote {args.out}")
    return 0


def _cmd_compare(args) -> int:
    overrides: dict = {}
    if args.seeds is not None:
        overrides["seeds"] = list(args.seeds)
    env = _env_seed()
    if env is not None:
        overrides["seeds"] = [env]
    if args.out is not None:
        overrides["output_dir"] = args.out
    config = load_experiment_config(args.config, overrides)
    records = run_compare(config)
    out = Path(config.output_dir)
    print(f"{len(records)} runs -> {out / 'comparison.csv'}")
    return 0


def _cmd_replay(args) -> int:
    verified = replay_runs(args.path)
    for name in verified:
        print(f"verified {name}")
    return 0


def _cmd_serve(args) -> int:
    from .service import run_service

    doc = _config_doc(args.config)
    seed = _pick(args.seed, doc, "seed", 0)
    env = _env_seed()
    if env is not None:
        seed = env
    instances, split = load_manifest(args.data)
    bg_dir = Path(args.data) / "backgrounds"
    backgrounds = load_backgrounds(bg_dir) if bg_dir.is_dir() else []
    scorer = ConvNetScorer.load_checkpoint(args.ckpt)
    mask_set = _mask_set_from(args, doc, instances[0].image.side)
    run_service(
        instances=instances,
        split=split,
        scorer=scorer,
        backgrounds=backgrounds,
        mask_set=mask_set,
        strategy=_pick(args.strategy, doc, "strategy", "NearCAIPI"),
        interactions_per_iteration=_pick(args.interactions, doc,
                                         "interactions_per_iteration", 10),
        iteration_budget=_pick(args.budget, doc, "iteration_budget", 10),
        train=_train_config_from(args, doc, seed),
        seed=seed,
        host=args.host,
        port=args.port,
    )
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="invrise",
        description="Explainable anomaly-classification workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-ok", type=int, dest="n_ok")
    p.add_argument("--n-no-seam", type=int, dest="n_no_seam")
    p.add_argument("--n-nok", type=int, dest="n_nok")
    p.add_argument("--side", type=int)
    p.add_argument("--ratios", type=_ratios)
    p.add_argument("--backgrounds", type=int)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train the built-in scorer")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--side", type=int)
    p.add_argument("--dtype", choices=("float32", "float64"))
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--occlusion-augment", type=int, nargs="?", const=4,
                   default=0, dest="occlusion_augment", metavar="PER_IMAGE",
                   help="add randomly occluded training variants "
                        "(default 4 per image when given)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("explain", help="explain one instance")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--id", required=True)
    p.add_argument("--out-prefix", required=True, dest="out_prefix")
    p.add_argument("--config")
    p.add_argument("--method", choices=("InvRISE", "RISE"))
    p.add_argument("-k", type=int)
    p.add_argument("-l", type=int)
    p.add_argument("-p", type=float)
    p.add_argument("--mask-seed", type=int, dest="mask_seed")
    p.add_argument("--shift", action="store_true")
    p.set_defaults(func=_cmd_explain)

    p = sub.add_parser("eval-explanations",
                       help="score both explainers against expert masks")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--split", default="test",
                   choices=("train", "validation", "test", "interactive"))
    p.add_argument("--fraction", type=float)
    p.add_argument("--model-name", default="convnet", dest="model_name")
    p.add_argument("-k", type=int)
    p.add_argument("-l", type=int)
    p.add_argument("-p", type=float)
    p.add_argument("--mask-seed", type=int, dest="mask_seed")
    p.add_argument("--shift", action="store_true")
    p.set_defaults(func=_cmd_eval_explanations)

    p = sub.add_parser("compare", help="run the strategy comparison")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--seeds", type=_seed_list)
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("replay", help="verify stored runs reproduce")
    p.add_argument("path")
    p.set_defaults(func=_cmd_replay)

    p = sub.add_parser("serve", help="serve the live correction session")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--strategy", choices=("ActiveLearning", "NearAL",
                                          "CAIPI", "NearCAIPI"))
    p.add_argument("--interactions", type=int)
    p.add_argument("--budget", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.set_defaults(func=_cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return 130
    except SystemExit as exc:
        if isinstance(exc.code, str):
            print(f"error: {exc.code}", file=sys.stderr)
            return 1
        raise
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())

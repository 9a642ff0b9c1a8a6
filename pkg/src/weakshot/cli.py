"""Command-line entry point.

Subcommands: generate, train, retrain, eval, infer, ablate, sweep,
simeval, sigtest, visualize. Every run writes a run_record.json capturing
the resolved configuration; SIMFORMER_OUT sets the default output root.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

import numpy as np
import torch

from . import __version__
from . import synthdata
from .evaluation import eval_simnet_f1, evaluate_model, significance_test
from .inference import dump_scores, save_prediction_png, semantic_segment
from .model import ModelConfig, load_checkpoint
from .training import TrainConfig, Trainer, run_retraining, run_training
from . import losses
from .visualize import save_panel

SWEEP_GRIDS = {
    "alpha": (0.0, 0.05, 0.1, 0.2, 0.4),
    "beta": (0.0, 0.1, 0.2, 0.4),
    "gamma": (0.01, 0.1, 0.3, 0.5, 0.9),
}


def _default_out(sub: str) -> str:
    return os.path.join(os.environ.get("SIMFORMER_OUT", "runs"), sub)


def _write_run_record(out_dir: str, command: str, args: argparse.Namespace,
                      started: float, extra: dict | None = None):
    os.makedirs(out_dir, exist_ok=True)
    record = {
        "command": command,
        "argv": sys.argv[1:],
        "resolved_config": {k: v for k, v in sorted(vars(args).items())
                            if k != "func"},
        "seed": getattr(args, "seed", None),
        "artifact_version": __version__,
        "output_dir": out_dir,
        "started_unix": started,
        "wall_clock_s": time.time() - started,
    }
    with open(os.path.join(out_dir, "run_record.json"), "w") as f:
        json.dump(record, f, indent=1, default=str)


def _add_train_flags(p: argparse.ArgumentParser):
    p.add_argument("--data", required=True, help="dataset root with manifest.json")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iters", type=int, default=20000)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--poly-power", type=float, default=0.9)
    p.add_argument("--eval-interval", type=int, default=1000)
    p.add_argument("--log-interval", type=int, default=25)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--beta", type=float, default=0.2)
    p.add_argument("--gamma", type=float, default=0.1)
    p.add_argument("--j", type=int, default=100, help="pixels sampled per image")
    p.add_argument("--no-sim", action="store_true",
                   help="disable pair-similarity training")
    p.add_argument("--no-pixel-transfer", action="store_true",
                   help="disable the distillation loss")
    p.add_argument("--dist-warmup", type=int, default=300,
                   help="iterations of pair-scorer burn-in before distillation")
    p.add_argument("--no-comp", action="store_true",
                   help="disable the complementary loss")
    p.add_argument("--reference-mode", choices=("cross", "self"),
                   default="cross")
    p.add_argument("--no-flip", action="store_true")
    p.add_argument("--crop-size", type=int, default=0)
    p.add_argument("--embed-dim", type=int, default=32)
    p.add_argument("--queries", type=int, default=12)
    p.add_argument("--decoder-layers", type=int, default=2)
    p.add_argument("--simnet-hidden", type=int, default=64)
    p.add_argument("--float64", action="store_true")
    p.add_argument("--resume", action="store_true")


def _train_config(args: argparse.Namespace) -> TrainConfig:
    return TrainConfig(
        lr0=args.lr, weight_decay=args.weight_decay, total_iters=args.iters,
        batch_size=args.batch_size, poly_power=args.poly_power,
        eval_interval=args.eval_interval, log_interval=args.log_interval,
        flip=not args.no_flip, crop_size=args.crop_size,
        sim_loss=not args.no_sim,
        pixel_transfer=not args.no_pixel_transfer,
        dist_warmup_iters=args.dist_warmup,
        comp_loss=not args.no_comp,
        reference_mode=args.reference_mode, pair_count=args.j,
        seed=args.seed, float64=args.float64,
        loss=losses.LossConfig(alpha=args.alpha, beta=args.beta,
                               gamma=args.gamma),
        model=ModelConfig(embed_dim=args.embed_dim, num_queries=args.queries,
                          decoder_layers=args.decoder_layers,
                          simnet_hidden=args.simnet_hidden),
    )


def cmd_generate(args) -> int:
    started = time.time()
    cfg = synthdata.GenerationConfig(
        image_size=args.image_size, num_classes=args.classes,
        num_background=args.background_classes,
        train_samples=args.train_samples, test_samples=args.test_samples,
        shapes_min=args.shapes_min, shapes_max=args.shapes_max,
        base_fraction=args.base_ratio, noise_sigma=args.noise,
        min_pair_images=args.min_pair_images)
    manifest = synthdata.generate_dataset(cfg, args.seed, args.out)
    print(f"generated {len(manifest.train_ids)} train / "
          f"{len(manifest.test_ids)} test samples at {args.out}")
    print(f"base classes: {sorted(manifest.split.base_ids)}")
    print(f"novel classes: {sorted(manifest.split.novel_ids)}")
    _write_run_record(args.out, "generate", args, started)
    return 0


def cmd_train(args) -> int:
    started = time.time()
    manifest = synthdata.DatasetManifest.load(args.data)
    config = _train_config(args)
    mode = "oracle" if args.oracle else "weak"
    result = run_training(config, manifest, args.out, mode=mode,
                          resume=args.resume)
    print(f"trained {result['iterations']} iterations; "
          f"best novel mIoU {result['best_novel_miou']:.4f}")
    _write_run_record(args.out, "train", args, started, extra=result)
    return 0


def cmd_retrain(args) -> int:
    started = time.time()
    manifest = synthdata.DatasetManifest.load(args.data)
    config = _train_config(args)
    result = run_retraining(config, manifest, args.teacher, args.out,
                            resume=args.resume,
                            pseudo_min_confidence=args.pseudo_min_confidence)
    print(f"re-trained {result['iterations']} iterations; "
          f"best novel mIoU {result['best_novel_miou']:.4f}")
    _write_run_record(args.out, "retrain", args, started, extra=result)
    return 0


def cmd_eval(args) -> int:
    started = time.time()
    manifest = synthdata.DatasetManifest.load(args.data)
    model, _ = load_checkpoint(args.checkpoint)
    ids = manifest.test_ids if args.split == "test" else manifest.train_ids
    report = evaluate_model(model, manifest, ids, manifest.split)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "iou_report.json"), "w") as f:
        json.dump(report.to_dict(), f, indent=1)
    with open(os.path.join(args.out, "iou_report.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["class_id", "iou", "group"])
        for c, v in sorted(report.per_class_iou.items()):
            group = "novel" if c in manifest.split.novel_ids else "base"
            writer.writerow([c, f"{v:.6f}", group])
    print(f"novel mIoU {report.mean_novel_iou:.4f}  "
          f"base mIoU {report.mean_base_iou:.4f}")
    _write_run_record(args.out, "eval", args, started)
    return 0


def cmd_infer(args) -> int:
    started = time.time()
    manifest = synthdata.DatasetManifest.load(args.data)
    model, _ = load_checkpoint(args.checkpoint)
    ids = args.ids or (manifest.test_ids if args.split == "test"
                       else manifest.train_ids)
    os.makedirs(args.out, exist_ok=True)
    with torch.no_grad():
        for sid in ids:
            full = manifest.load_full(sid)
            out = model.forward(full.image.astype(np.float32))
            result = semantic_segment(out.class_probs, out.mask_scores,
                                      manifest.split.semantic_ids)
            save_prediction_png(os.path.join(args.out, f"{sid}_pred.png"),
                                result.labels)
            if args.dump_scores:
                dump_scores(os.path.join(args.out, f"{sid}_scores"),
                            result.scores)
    print(f"wrote {len(ids)} predictions to {args.out}")
    _write_run_record(args.out, "infer", args, started)
    return 0


ABLATION_VARIANTS = (
    ("pr", {"pixel_transfer": False, "comp_loss": False}),
    ("pr_pi", {"pixel_transfer": True, "comp_loss": False}),
    ("pr_co", {"pixel_transfer": False, "comp_loss": True}),
    ("pr_pi_co", {"pixel_transfer": True, "comp_loss": True}),
)

VARIANT_LABELS = {"pr": "Pr", "pr_pi": "Pr+Pi", "pr_co": "Pr+Co",
                  "pr_pi_co": "Pr+Pi+Co"}


def cmd_ablate(args) -> int:
    started = time.time()
    manifest = synthdata.DatasetManifest.load(args.data)
    table = {}
    for name, toggles in ABLATION_VARIANTS:
        scores = []
        for seed in args.seeds:
            config = _train_config(args)
            config.seed = seed
            for k, v in toggles.items():
                setattr(config, k, v)
            run_dir = os.path.join(args.out, f"{name}_seed{seed}")
            result = run_training(config, manifest, run_dir,
                                  resume=args.resume)
            scores.append(result["best_novel_miou"])
        table[name] = {"seeds": list(args.seeds), "novel_miou": scores,
                       "mean": float(np.mean(scores))}
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "ablation.json"), "w") as f:
        json.dump(table, f, indent=1)
    print(f"{'variant':<10} {'novel mIoU (mean)':>18}")
    for name, row in table.items():
        print(f"{VARIANT_LABELS[name]:<10} {row['mean']:>18.4f}")
    _write_run_record(args.out, "ablate", args, started)
    return 0


def cmd_sweep(args) -> int:
    started = time.time()
    manifest = synthdata.DatasetManifest.load(args.data)
    values = args.values if args.values else SWEEP_GRIDS[args.param]
    table = {}
    for value in values:
        scores = []
        for seed in args.seeds:
            config = _train_config(args)
            config.seed = seed
            setattr(config.loss, args.param, value)
            run_dir = os.path.join(args.out,
                                   f"{args.param}{value:g}_seed{seed}")
            result = run_training(config, manifest, run_dir,
                                  resume=args.resume)
            scores.append(result["best_novel_miou"])
        table[f"{value:g}"] = {"seeds": list(args.seeds),
                               "novel_miou": scores,
                               "mean": float(np.mean(scores))}
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, f"sweep_{args.param}.json"), "w") as f:
        json.dump(table, f, indent=1)
    print(f"{args.param:<8} {'novel mIoU (mean)':>18}")
    for value, row in table.items():
        print(f"{value:<8} {row['mean']:>18.4f}")
    _write_run_record(args.out, "sweep", args, started)
    return 0


def cmd_simeval(args) -> int:
    started = time.time()
    manifest = synthdata.DatasetManifest.load(args.data)
    model, _ = load_checkpoint(args.checkpoint)
    rng = np.random.default_rng(args.seed)
    report = eval_simnet_f1(model, manifest, num_image_pairs=args.pairs,
                            j=args.j, rng=rng)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "pair_f1.json"), "w") as f:
        json.dump(report.to_dict(), f, indent=1)
    for (group, decision), v in sorted(report.f1.items()):
        print(f"{group:<6} {decision:<10} F1 {v:.4f} "
              f"({report.counts[(group, decision)]} pairs)")
    _write_run_record(args.out, "simeval", args, started)
    return 0


def _load_runs(path: str) -> list:
    with open(path) as f:
        doc = json.load(f)
    if isinstance(doc, dict):
        doc = doc.get("values", doc.get("novel_miou"))
    if not isinstance(doc, list):
        raise ValueError(f"{path} does not contain a list of run scores")
    return [float(v) for v in doc]


def cmd_sigtest(args) -> int:
    started = time.time()
    result = significance_test(_load_runs(args.a), _load_runs(args.b))
    print(f"a: {result.summary('a')}  b: {result.summary('b')}")
    print(f"p-value: {result.p_value:.3g} "
          f"({'significant' if result.p_value < args.level else 'not significant'} "
          f"at level {args.level})")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "sigtest.json"), "w") as f:
            json.dump({"p_value": result.p_value,
                       "a": result.summary("a"), "b": result.summary("b"),
                       "level": args.level}, f, indent=1)
        _write_run_record(args.out, "sigtest", args, started)
    return 0


def cmd_visualize(args) -> int:
    started = time.time()
    manifest = synthdata.DatasetManifest.load(args.data)
    model, _ = load_checkpoint(args.checkpoint)
    pool = manifest.test_ids if args.split == "test" else manifest.train_ids
    ids = args.ids or pool[:args.count]
    os.makedirs(args.out, exist_ok=True)
    num_bg = manifest.config.get("num_background", 4)
    with torch.no_grad():
        for sid in ids:
            full = manifest.load_full(sid)
            out = model.forward(full.image.astype(np.float32))
            result = semantic_segment(out.class_probs, out.mask_scores,
                                      manifest.split.semantic_ids)
            save_panel(os.path.join(args.out, f"{sid}_panel.png"),
                       full.image, full.mask, full.mask, result.labels,
                       manifest.split, num_bg)
    print(f"wrote {len(ids)} panels to {args.out}")
    _write_run_record(args.out, "visualize", args, started)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="weakshot",
        description="Weak-shot segmentation: synthetic corpus, dual "
                    "similarity-transfer training, and evaluation tools.")
    parser.add_argument("--version", action="version", version=__version__)
    subs = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = subs.add_parser("generate", formatter_class=fmt,
                        help="generate the synthetic dataset")
    p.add_argument("--out", default=_default_out("dataset"))
    p.add_argument("--classes", type=int, default=12)
    p.add_argument("--background-classes", type=int, default=4)
    p.add_argument("--base-ratio", type=float, default=0.75)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-samples", type=int, default=500)
    p.add_argument("--test-samples", type=int, default=100)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--shapes-min", type=int, default=2)
    p.add_argument("--shapes-max", type=int, default=4)
    p.add_argument("--min-pair-images", type=int, default=20)
    p.set_defaults(func=cmd_generate)

    p = subs.add_parser("train", formatter_class=fmt,
                        help="train the weak-shot model")
    _add_train_flags(p)
    p.add_argument("--out", default=_default_out("train"))
    p.add_argument("--oracle", action="store_true",
                   help="train with full GT masks for all classes")
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("retrain", formatter_class=fmt,
                        help="pseudo-label with a teacher and re-train")
    _add_train_flags(p)
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--pseudo-min-confidence", type=float, default=None,
                   help="drop pseudo-label fills below this fused score")
    p.add_argument("--out", default=_default_out("retrain"))
    p.set_defaults(func=cmd_retrain)

    p = subs.add_parser("eval", formatter_class=fmt,
                        help="compute IoU of a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("test", "train"), default="test")
    p.add_argument("--out", default=_default_out("eval"))
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("infer", formatter_class=fmt,
                        help="write prediction PNGs")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("test", "train"), default="test")
    p.add_argument("--ids", nargs="*", default=None)
    p.add_argument("--dump-scores", action="store_true",
                   help="also dump fused scores as float32 binaries")
    p.add_argument("--out", default=_default_out("infer"))
    p.set_defaults(func=cmd_infer)

    p = subs.add_parser("ablate", formatter_class=fmt,
                        help="train the four module-toggle variants")
    _add_train_flags(p)
    p.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    p.add_argument("--out", default=_default_out("ablate"))
    p.set_defaults(func=cmd_ablate)

    p = subs.add_parser("sweep", formatter_class=fmt,
                        help="sweep one loss hyper-parameter")
    _add_train_flags(p)
    p.add_argument("--param", choices=tuple(SWEEP_GRIDS), required=True)
    p.add_argument("--values", type=float, nargs="*", default=None)
    p.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    p.add_argument("--out", default=_default_out("sweep"))
    p.set_defaults(func=cmd_sweep)

    p = subs.add_parser("simeval", formatter_class=fmt,
                        help="pair-similarity transferability F1")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pairs", type=int, default=100)
    p.add_argument("--j", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=_default_out("simeval"))
    p.set_defaults(func=cmd_simeval)

    p = subs.add_parser("sigtest", formatter_class=fmt,
                        help="two-sample significance test over seed runs")
    p.add_argument("--a", required=True, help="JSON list of scores")
    p.add_argument("--b", required=True, help="JSON list of scores")
    p.add_argument("--level", type=float, default=0.05)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_sigtest)

    p = subs.add_parser("visualize", formatter_class=fmt,
                        help="write image | GT | split map | prediction panels")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("test", "train"), default="test")
    p.add_argument("--ids", nargs="*", default=None)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--out", default=_default_out("visualize"))
    p.set_defaults(func=cmd_visualize)

    for sp in subs.choices.values():
        sp.add_argument("--config", default=None,
                        help="JSON file of flag defaults; explicit flags win")
    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv: list) -> list:
    """Pre-scan for --config and fold its values in as parser defaults."""
    if "--config" not in argv:
        return argv
    idx = argv.index("--config")
    if idx + 1 >= len(argv):
        raise ValueError("--config requires a path")
    with open(argv[idx + 1]) as f:
        values = json.load(f)
    if not isinstance(values, dict):
        raise ValueError("config file must hold a JSON object")
    sub = next((a for a in argv if not a.startswith("-")), None)
    action = parser._subparsers._group_actions[0]
    if sub in action.choices:
        action.choices[sub].set_defaults(
            **{k.replace("-", "_"): v for k, v in values.items()})
    return argv


def main(argv: list | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        return args.func(args)
    except (ValueError, OSError, RuntimeError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

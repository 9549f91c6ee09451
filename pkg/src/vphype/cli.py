"""Command-line entry point: ``vphype {train,eval,bench,gradcheck,inspect,synth}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Errors are printed to stderr as one line, ``<category>: <message>``.
Every command echoes its resolved configuration to stderr before working.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence


from . import bench as bench_mod
from .backbone import ModelConfig
from .config import RunConfig, load_run_config
from .data import SplitSpec, load_scene, make_synthetic_scene, save_scene, stratified_split
from .errors import CheckpointError, ConfigError, VPHypeError
from .gradcheck import run_gradient_suite
from .metrics import evaluation_report
from .model import VPHype
from .prompts import ARMS, PromptBank, PromptConfig, write_prompt_bank
from .trainer import (
    checkpoint_from,
    evaluate,
    load_checkpoint,
    restore_model,
    save_checkpoint,
    train,
    write_metrics_log,
)

CHECKPOINT_NAME = "checkpoint.vpck"
CONFIG_NAME = "config.json"
METRICS_NAME = "metrics.jsonl"


def echo(kind: str, doc: dict) -> None:
    print(f"# {kind} " + json.dumps(doc, sort_keys=True), file=sys.stderr, flush=True)


# ---------------------------------------------------------------------------
# commands


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config)
    if args.arm is not None:
        overrides = {k: v for k, v in cfg.prompts.to_dict().items() if k not in ("enabled", "visual_enabled", "text_enabled")}
        cfg.prompts = PromptConfig.for_arm(args.arm, **overrides)
    if args.out is not None:
        cfg.output_dir = args.out
    if cfg.output_dir is None:
        raise ConfigError("no output directory; pass --out or set output_dir")
    if cfg.data.scene is None:
        raise ConfigError("data.scene is required for training")
    echo("effective-config", cfg.to_dict())

    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_NAME).write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n")
    scene = load_scene(cfg.data.scene)
    split = stratified_split(scene, cfg.split)
    model = VPHype(cfg.model, cfg.prompts, cfg.load_bank(), seed=cfg.train.seed)
    result = train(
        model,
        scene,
        split,
        cfg.train,
        cfg.data.patch_size,
        cfg.data.task_id,
        on_epoch=lambda rec: print(json.dumps(rec, sort_keys=True), flush=True),
    )
    write_metrics_log(result.log, out / METRICS_NAME)
    extra = {
        "split": {"train_fraction": cfg.split.train_fraction, "seed": cfg.split.seed, "per_class_min": cfg.split.per_class_min},
        "patch_size": cfg.data.patch_size,
        "task_id": cfg.data.task_id,
        "train": cfg.train.to_dict(),
    }
    save_checkpoint(out / CHECKPOINT_NAME, checkpoint_from(model, result.optimizer, result.rng, extra))
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    stored = ckpt.extra.get("split", {})
    spec = SplitSpec(
        train_fraction=stored.get("train_fraction", SplitSpec.train_fraction),
        seed=args.split_seed if args.split_seed is not None else stored.get("seed", 0),
        per_class_min=stored.get("per_class_min", SplitSpec.per_class_min),
    )
    patch_size = ckpt.extra.get("patch_size", 15)
    task_id = args.task_id if args.task_id is not None else ckpt.extra.get("task_id", 0)
    echo(
        "effective-config",
        {
            "checkpoint": str(args.checkpoint),
            "scene": str(args.scene),
            "split": {"train_fraction": spec.train_fraction, "seed": spec.seed, "per_class_min": spec.per_class_min},
            "patch_size": patch_size,
            "task_id": task_id,
            "model": ckpt.model_config,
            "prompts": ckpt.prompt_config,
        },
    )
    scene = load_scene(args.scene)
    bands, classes = ckpt.model_config["in_bands"], ckpt.model_config["num_classes"]
    diff = [k for k, a, b in (("in_bands", bands, scene.bands), ("num_classes", classes, scene.num_classes)) if a != b]
    if diff:
        raise CheckpointError(
            f"config mismatch; differing keys: {', '.join(diff)} "
            f"(checkpoint {bands} bands / {classes} classes, scene {scene.bands} / {scene.num_classes})"
        )
    model = restore_model(ckpt)
    split = stratified_split(scene, spec)
    scene.fit_band_stats(split.train)
    cm = evaluate(model, scene, split.test, patch_size, task_id)
    print(evaluation_report(cm, {"checkpoint": str(args.checkpoint), "split_seed": spec.seed}))
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    lengths = [int(v) for v in args.lengths.split(",") if v.strip()]
    echo("effective-config", {"dims": args.dims, "lengths": lengths, "repeats": args.repeats, "heads": args.heads, "seed": args.seed})
    rows = bench_mod.run_bench(args.dims, lengths, args.repeats, args.seed, args.heads)
    text = bench_mod.rows_to_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    echo("effective-config", {"max_coords": args.max_coords, "seed": args.seed, "model": not args.primitives_only})
    cases = run_gradient_suite(args.max_coords, args.seed, include_model=not args.primitives_only)
    for case in cases:
        status = "PASS" if case.passed else "FAIL"
        print(f"{status} {case.name} max_rel_err={case.error:.3e} time={case.seconds:.2f}s")
    failed = [c.name for c in cases if not c.passed]
    if failed:
        print(f"gradcheck: {len(failed)} case(s) failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def _inspect_config(args: argparse.Namespace) -> tuple[ModelConfig, PromptConfig, PromptBank]:
    if args.config is not None:
        cfg: RunConfig = load_run_config(args.config)
        return cfg.model, cfg.prompts, cfg.load_bank()
    overrides = {}
    if args.bands is not None:
        overrides["in_bands"] = args.bands
    if args.classes is not None:
        overrides["num_classes"] = args.classes
    model = ModelConfig.tiny(**overrides) if args.preset == "tiny" else ModelConfig(**overrides)
    return model, PromptConfig(), PromptBank.synthetic()


def cmd_inspect(args: argparse.Namespace) -> int:
    model_cfg, prompt_cfg, bank = _inspect_config(args)
    echo("effective-config", {"model": model_cfg.to_dict(), "prompts": prompt_cfg.to_dict(), "text_dim": bank.dim})
    model = VPHype(model_cfg, prompt_cfg, bank, seed=0)
    counts = model.parameter_counts()
    doc = {
        "modules": {
            "backbone.patch_embed": model.backbone.patch_embed.num_parameters(),
            **{f"backbone.stages.{i}": s.num_parameters() for i, s in enumerate(model.backbone.stages)},
            **{f"backbone.downsamples.{i}": d.num_parameters() for i, d in enumerate(model.backbone.downsamples)},
            "prompts": counts["prompts"],
            "head": counts["head"],
        },
        "backbone": counts["backbone"],
        "prompts": counts["prompts"],
        "head": counts["head"],
        "trainable": sum(p.size for _, p in model.trainable_parameters()),
        "total": counts["total"],
    }
    print(json.dumps(doc, sort_keys=True, indent=2))
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    params = {
        "num_classes": args.classes,
        "bands": args.bands,
        "height": args.height,
        "width": args.width,
        "separation": args.separation,
        "seed": args.seed,
        "noise": args.noise,
    }
    echo("effective-config", {"out": str(args.out), "tasks": args.tasks, **params})
    out = Path(args.out)
    scene = make_synthetic_scene(**params)
    save_scene(scene, out / "scene")
    write_prompt_bank(PromptBank.synthetic(num_tasks=args.tasks, seed=args.seed), out / "prompts")
    run = {
        "model": {"preset": "tiny"},
        "data": {"scene": "scene", "prompt_bank": "prompts", "task_id": 0, "patch_size": 15},
        "output_dir": "run",
    }
    (out / "run.json").write_text(json.dumps(run, sort_keys=True, indent=2) + "\n")
    print(json.dumps({"scene": str(out / "scene"), "prompts": str(out / "prompts"), "config": str(out / "run.json")}))
    return 0


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # single-line usage errors, exit 2
        print(f"usage: {' '.join(message.split())}", file=sys.stderr)
        raise SystemExit(2)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vphype", description="Hybrid Mamba-Transformer hyperspectral classifier with prompting.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--arm", choices=ARMS, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a scene's test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--split-seed", type=int, default=None)
    p.add_argument("--task-id", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time scan and attention mixers over sequence lengths")
    p.add_argument("--dims", type=int, default=64)
    p.add_argument("--lengths", default=",".join(str(v) for v in bench_mod.DEFAULT_LENGTHS))
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="also write the CSV here")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--config", default=None, help="accepted for symmetry; the suite uses fixed tiny shapes")
    p.add_argument("--max-coords", type=int, default=8, help="sampled coordinates per model parameter tensor")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--primitives-only", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect", help="print parameter counts")
    p.add_argument("--config", default=None)
    p.add_argument("--preset", choices=("tiny", "default"), default="tiny")
    p.add_argument("--bands", type=int, default=None)
    p.add_argument("--classes", type=int, default=None)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("synth", help="write a synthetic scene, prompt bank and run config")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=6)
    p.add_argument("--bands", type=int, default=32)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--separation", type=float, default=4.0)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tasks", type=int, default=1)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"{exc.category}: {exc}", file=sys.stderr)
        return 2
    except VPHypeError as exc:
        print(f"{exc.category}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {' '.join(str(exc).split())}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

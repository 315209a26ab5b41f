"""Command-line surface.

Subcommands: ``train`` (entire / progressive / paired runs), ``eval``
(score a checkpoint on a dataset), ``partition`` (inspect a stage plan),
``compute-report`` (cost of a schedule in both models), and ``sweep``
(repeat a training config over several seeds in child processes).

Configuration comes from one declarative YAML/JSON file plus ``--set``
dotted-path overrides; every paper-unspecified hyperparameter has an
explicit default that ends up recorded in the emitted report. The dataset
root may also come from the DEPTHGROW_DATA_ROOT environment variable.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training
failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .accounting import COST_MODES, CostModel, cost_report, prefix_parameter_count
from .backbones import (
    FINAL_HEAD,
    PROGRESSIVE_HEAD,
    BackboneSpec,
    backbone_preset,
    preset_names,
)
from .data import (
    AugmentPolicy,
    DatasetSplit,
    SynthFusionConfig,
    batch_preparer,
    generate_synth_fusion,
    load_cifar10,
    load_image_folder,
    subsample_train,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    DepthgrowError,
    TrainingDivergedError,
)
from .metrics import evaluate
from .partition import make_plan
from .schedule import OptimizerConfig, ProgressiveSchedule
from .training import (
    comparison_rows,
    load_network_from_checkpoint,
    render_comparison,
    run_curriculum,
    run_paired,
    train_entire,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRAINING = 4

DATA_ROOT_ENV = "DEPTHGROW_DATA_ROOT"


def load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        cfg = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML/JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {path} must be a mapping at top level")
    return cfg


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, _, raw = item.partition("=")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse override value {raw!r}") from exc
        node = cfg
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {key!r} crosses a non-mapping")
        node[parts[-1]] = value
    return cfg


def _dataset_root(cfg: dict, field: str = "root") -> str:
    root = cfg.get(field) or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise ConfigError(
            f"dataset.{field} not set and {DATA_ROOT_ENV} is undefined")
    return root


def build_dataset(cfg: dict) -> DatasetSplit:
    if not isinstance(cfg, dict) or "kind" not in cfg:
        raise ConfigError("config needs a dataset section with a 'kind'")
    kind = cfg["kind"]
    if kind == "synth-fusion":
        synth_keys = ("num_classes", "class_counts", "image_size",
                      "gap_fraction_per_stage", "noise_level",
                      "pose_jitter_deg", "pose_jitter_px", "val_fraction",
                      "test_fraction", "seed")
        kwargs = {k: cfg[k] for k in synth_keys if k in cfg}
        for key in ("class_counts", "gap_fraction_per_stage"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        split = generate_synth_fusion(SynthFusionConfig(**kwargs))
    elif kind == "cifar10":
        split = load_cifar10(_dataset_root(cfg),
                             val_fraction=cfg.get("val_fraction", 0.1),
                             seed=cfg.get("seed", 0),
                             expected_checksums=cfg.get("expected_checksums"))
    elif kind == "folder":
        if "image_size" not in cfg:
            raise ConfigError("folder datasets need dataset.image_size")
        split = load_image_folder(_dataset_root(cfg),
                                  image_size=cfg["image_size"],
                                  grayscale=cfg.get("grayscale", False),
                                  val_fraction=cfg.get("val_fraction", 0.1),
                                  test_fraction=cfg.get("test_fraction", 0.2),
                                  seed=cfg.get("seed", 0))
    else:
        raise ConfigError(
            f"unknown dataset kind {kind!r}; expected synth-fusion, cifar10, "
            f"or folder")
    if cfg.get("train_subsample"):
        split = subsample_train(split, int(cfg["train_subsample"]),
                                seed=cfg.get("seed", 0))
    return split


def build_backbone_spec(cfg: dict, data: DatasetSplit) -> BackboneSpec:
    name = cfg.get("backbone")
    if not name:
        raise ConfigError(f"config needs 'backbone'; presets: {preset_names()}")
    channels, height, width = data.image_shape
    if height != width:
        raise ConfigError(f"non-square images {height}x{width} not supported")
    input_size = cfg.get("input_size", height)
    if input_size != height:
        raise ConfigError(
            f"input_size {input_size} does not match dataset images "
            f"({height}x{width})")
    in_channels = cfg.get("in_channels", channels)
    if in_channels not in (channels, 3) or (in_channels == 3 and channels == 2):
        raise ConfigError(
            f"in_channels {in_channels} incompatible with {channels}-channel "
            f"data (single-channel data may be replicated to 3)")
    num_classes = cfg.get("num_classes", data.num_classes)
    if num_classes != data.num_classes:
        raise ConfigError(
            f"num_classes {num_classes} does not match the dataset's "
            f"{data.num_classes}")
    return backbone_preset(name, num_classes, input_size=input_size,
                           in_channels=in_channels)


def build_optimizer_config(cfg: dict) -> OptimizerConfig:
    opt = cfg.get("optimizer", {})
    if not isinstance(opt, dict):
        raise ConfigError("optimizer section must be a mapping")
    kwargs = {k: opt[k] for k in ("kind", "lr", "weight_decay", "momentum")
              if k in opt}
    if "betas" in opt:
        kwargs["betas"] = tuple(opt["betas"])
    return OptimizerConfig(**kwargs)


def build_augment_policy(cfg: dict) -> AugmentPolicy:
    aug = cfg.get("augment", {})
    if not isinstance(aug, dict):
        raise ConfigError("augment section must be a mapping")
    allowed = {"hflip_prob", "crop_padding", "brightness", "contrast"}
    unknown = set(aug) - allowed
    if unknown:
        raise ConfigError(f"unknown augment fields {sorted(unknown)}")
    return AugmentPolicy(**aug)


def build_schedule(cfg: dict, spec: BackboneSpec) -> ProgressiveSchedule:
    mode = cfg.get("mode", "progressive")
    epochs = cfg.get("epochs")
    if epochs is None:
        raise ConfigError("config needs 'epochs'")
    if isinstance(epochs, int):
        epochs = [epochs]
    epochs = [int(e) for e in epochs]
    if mode == "entire":
        if len(epochs) != 1:
            raise ConfigError("entire mode takes a single epoch count")
        stages = 1
    else:
        stages = cfg.get("stages", len(epochs))
        if stages != len(epochs):
            raise ConfigError(
                f"schedule length {len(epochs)} does not match stages={stages}")
    plan = make_plan(spec.block_count, stages)
    return ProgressiveSchedule(
        plan=plan, epochs=tuple(epochs),
        optimizer=build_optimizer_config(cfg),
        batch_size=cfg.get("batch_size", 64),
        seed=cfg.get("seed", 0),
        lr_schedule=cfg.get("lr_schedule", "constant"))


def _resolve_out_dir(args, cfg: dict, default: str) -> Path:
    out = args.output_dir or cfg.get("output_dir") or default
    return Path(out)


def cmd_train(args) -> int:
    cfg = apply_overrides(load_config(args.config), args.set)
    mode = cfg.get("mode", "progressive")
    if mode not in ("entire", "progressive", "paired"):
        raise ConfigError(
            f"unknown mode {mode!r}; expected entire, progressive, or paired")
    data = build_dataset(cfg.get("dataset", {}))
    spec = build_backbone_spec(cfg, data)
    sched = build_schedule(cfg, spec)
    policy = build_augment_policy(cfg)
    out_dir = _resolve_out_dir(args, cfg, "runs/latest")
    log = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None

    if mode == "paired":
        result = run_paired(spec, sched, data, augment_policy=policy,
                            out_dir=out_dir, log=log)
        print(render_comparison(result["comparison"]))
    elif mode == "progressive":
        report = run_curriculum(spec, sched, data, augment_policy=policy,
                                out_dir=out_dir, resume_from=args.resume_from,
                                log=log)
        print(render_comparison(comparison_rows([report])))
    else:
        report = train_entire(spec, sched.total_epochs, data, sched.optimizer,
                              batch_size=sched.batch_size, seed=sched.seed,
                              lr_schedule=sched.lr_schedule,
                              augment_policy=policy, out_dir=out_dir, log=log)
        print(render_comparison(comparison_rows([report])))
    print(f"outputs written to {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    net, manifest = load_network_from_checkpoint(args.checkpoint)
    cfg = apply_overrides(load_config(args.config) if args.config else {},
                          args.set)
    data = build_dataset(cfg.get("dataset", cfg if "kind" in cfg else {}))
    spec = net.spec
    if data.num_classes != spec.num_classes:
        raise CheckpointError(
            f"checkpoint head outputs {spec.num_classes} classes but the "
            f"dataset has {data.num_classes}")
    if tuple(data.image_shape[1:]) != tuple(spec.input_shape[1:]):
        raise CheckpointError(
            f"checkpoint expects {spec.input_shape[1:]} inputs but the "
            f"dataset images are {data.image_shape[1:]}")
    images, labels = data.part(args.split)
    prepare = batch_preparer(data.normalization, spec.input_shape[0])
    report = evaluate(net, images, labels, num_classes=spec.num_classes,
                      prepare=prepare, class_names=data.class_names)
    print(report.render_table())
    payload = {"checkpoint": str(args.checkpoint),
               "spec_hash": manifest["spec_hash"],
               "stage_index": manifest["stage_index"],
               "split": args.split,
               "metrics": report.to_dict()}
    if args.output:
        Path(args.output).parent.mkdir(parents=True, exist_ok=True)
        Path(args.output).write_text(json.dumps(payload, indent=2,
                                                sort_keys=True))
        print(f"metrics written to {args.output}")
    return EXIT_OK


def cmd_partition(args) -> int:
    spec = backbone_preset(args.backbone, args.classes,
                           input_size=args.input_size)
    plan = make_plan(spec.block_count, args.stages)
    per_stage = []
    for k in range(1, plan.num_stages + 1):
        role = FINAL_HEAD if k == plan.num_stages else PROGRESSIVE_HEAD
        idx = plan.index_sets[k - 1]
        per_stage.append({
            "stage": k,
            "blocks": len(idx),
            "block_range": [idx[0], idx[-1]],
            "prefix_parameters": prefix_parameter_count(
                spec, plan.prefix_length(k), role),
        })
    if args.json:
        print(json.dumps({"backbone": spec.name, "plan": plan.to_dict(),
                          "per_stage": per_stage}, indent=2, sort_keys=True))
    else:
        print(f"{spec.name}: {spec.block_count} blocks into "
              f"{plan.num_stages} stages -> sizes {plan.sizes}")
        print(f"{'stage':>5} {'blocks':>7} {'range':>12} "
              f"{'prefix params (incl. head)':>28}")
        for row in per_stage:
            rng = f"{row['block_range'][0]}..{row['block_range'][1]}"
            print(f"{row['stage']:>5} {row['blocks']:>7} {rng:>12} "
                  f"{row['prefix_parameters']:>28,}")
    return EXIT_OK


def cmd_compute_report(args) -> int:
    epochs = [int(e) for e in args.epochs.split(",") if e.strip()]
    if not epochs:
        raise ConfigError(f"cannot parse epoch schedule {args.epochs!r}")
    spec = backbone_preset(args.backbone, args.classes,
                           input_size=args.input_size)
    plan = make_plan(spec.block_count, len(epochs))
    report = cost_report(spec, plan, epochs)
    if args.json:
        print(json.dumps(report, indent=2, sort_keys=True))
        return EXIT_OK
    print(f"{spec.name}: schedule {tuple(epochs)} over stage sizes "
          f"{plan.sizes}")
    for mode in COST_MODES:
        entry = report["modes"][mode]
        print(f"\n{mode} cost model (full-network epoch cost "
              f"{entry['full_cost']:,}):")
        print(f"{'stage':>5} {'epochs':>7} {'epoch cost':>16} {'share':>8}")
        for k, (e, c) in enumerate(zip(epochs, entry["per_stage_cost"]), 1):
            print(f"{k:>5} {e:>7} {c:>16,} {c / entry['full_cost']:>8.3f}")
        print(f"overall computation: {entry['overall_fraction'] * 100:.1f}% "
              f"of entire-model training at {sum(epochs)} epochs")
    return EXIT_OK


def cmd_sweep(args) -> int:
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if not seeds:
        raise ConfigError(f"cannot parse seed list {args.seeds!r}")
    cfg = apply_overrides(load_config(args.config), args.set)
    out_dir = _resolve_out_dir(args, cfg, "runs/sweep")
    out_dir.mkdir(parents=True, exist_ok=True)
    for seed in seeds:
        run_dir = out_dir / f"seed{seed}"
        cmd = [sys.executable, "-m", "depthgrow.cli", "train",
               "--config", str(args.config), "--output-dir", str(run_dir),
               "--set", f"seed={seed}"]
        for override in args.set or []:
            cmd += ["--set", override]
        print(f"launching seed {seed} -> {run_dir}", file=sys.stderr)
        proc = subprocess.run(cmd)
        if proc.returncode != 0:
            print(f"seed {seed} failed with exit code {proc.returncode}",
                  file=sys.stderr)
            return proc.returncode
    summary = _summarize_sweep(out_dir, seeds)
    (out_dir / "sweep-summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True))
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def _summarize_sweep(out_dir: Path, seeds: list[int]) -> dict:
    arms: dict[str, list[float]] = {}
    for seed in seeds:
        run_dir = out_dir / f"seed{seed}"
        candidates = list(run_dir.glob("report.json"))
        candidates += list(run_dir.glob("*/report.json"))
        for path in candidates:
            report = json.loads(path.read_text())
            if report.get("final_metrics"):
                arms.setdefault(report["mode"], []).append(
                    report["final_metrics"]["accuracy"])
    summary = {"seeds": seeds, "arms": {}}
    for mode, accs in sorted(arms.items()):
        summary["arms"][mode] = {
            "runs": len(accs),
            "accuracies": accs,
            "mean_accuracy": float(np.mean(accs)),
            "std_accuracy": float(np.std(accs)),
        }
    return summary


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="depthgrow",
        description="Grow image classifiers stage by stage and account for "
                    "the training compute saved.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run entire/progressive/paired training")
    train.add_argument("--config", required=True)
    train.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config field (dotted path)")
    train.add_argument("--output-dir")
    train.add_argument("--resume-from", metavar="CKPT",
                       help="resume a progressive run from a stage checkpoint")
    train.add_argument("--verbose", action="store_true")
    train.set_defaults(func=cmd_train)

    evaluate_p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    evaluate_p.add_argument("--checkpoint", required=True)
    evaluate_p.add_argument("--config", help="config holding a dataset section")
    evaluate_p.add_argument("--set", action="append", metavar="KEY=VALUE")
    evaluate_p.add_argument("--split", default="test",
                            choices=("train", "val", "test"))
    evaluate_p.add_argument("--output", help="write metrics JSON here")
    evaluate_p.set_defaults(func=cmd_eval)

    part = sub.add_parser("partition", help="show the balanced stage plan")
    part.add_argument("--backbone", required=True)
    part.add_argument("--stages", type=int, required=True)
    part.add_argument("--classes", type=int, default=5)
    part.add_argument("--input-size", type=int)
    part.add_argument("--json", action="store_true")
    part.set_defaults(func=cmd_partition)

    comp = sub.add_parser("compute-report",
                          help="cost of a schedule in both cost models")
    comp.add_argument("--backbone", required=True)
    comp.add_argument("--epochs", required=True,
                      help="comma-separated per-stage epochs, e.g. 50,350")
    comp.add_argument("--classes", type=int, default=5)
    comp.add_argument("--input-size", type=int)
    comp.add_argument("--json", action="store_true")
    comp.set_defaults(func=cmd_compute_report)

    sweep = sub.add_parser("sweep", help="repeat a training config over seeds")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("--seeds", required=True,
                       help="comma-separated seed list, e.g. 1,2,3")
    sweep.add_argument("--set", action="append", metavar="KEY=VALUE")
    sweep.add_argument("--output-dir")
    sweep.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError,) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergedError as exc:
        print(f"training failure: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DepthgrowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

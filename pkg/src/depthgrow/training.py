"""Depth-curriculum training.

A run proceeds stage by stage: train the active prefix under its temporary
head, then *grow* - keep every trained prefix weight, freshly initialize
the newly activated blocks, attach a fresh head, and discard the old one.
The final stage trains the full network under its standard classifier, and
that fully grown network is what inference uses. ``train_entire`` is the
conventional end-to-end baseline, routed through the same stage runner so
that a single-stage curriculum and the baseline are the same computation.

Paired comparisons share the seed, data order, and augmentation stream
across both arms: the randomness of global epoch t is derived from
(seed, t) regardless of which stage t falls into.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .accounting import cost_report
from .backbones import (
    FINAL_HEAD,
    PROGRESSIVE_HEAD,
    BackboneSpec,
    OrderedBlockList,
    PrefixNetwork,
    build_backbone,
    build_prefix,
    parameter_count,
)
from .checkpoint import (
    load_checkpoint,
    payload_hash,
    restore_state,
    save_checkpoint,
    state_arrays,
)
from .data import AugmentPolicy, DatasetSplit, augment, batch_preparer
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    TrainingDivergedError,
)
from .metrics import evaluate, predict
from .partition import StagePlan, make_plan
from .schedule import OptimizerConfig, ProgressiveSchedule
from .seeding import (
    derive_seed,
    enable_determinism,
    numpy_generator,
    torch_generator,
)

VOLATILE_REPORT_KEYS = frozenset(
    {"timing", "wall_time_s", "checkpoint_path", "created_unix", "root",
     "output_dir"})


def build_optimizer(params, cfg: OptimizerConfig) -> torch.optim.Optimizer:
    if cfg.kind == "sgd":
        return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum,
                               weight_decay=cfg.weight_decay)
    if cfg.kind == "adam":
        return torch.optim.Adam(params, lr=cfg.lr, betas=cfg.betas,
                                weight_decay=cfg.weight_decay)
    return torch.optim.AdamW(params, lr=cfg.lr, betas=cfg.betas,
                             weight_decay=cfg.weight_decay)


def _epoch_lr(cfg: OptimizerConfig, lr_schedule: str, epoch_in_stage: int,
              stage_epochs: int) -> float:
    if lr_schedule == "cosine" and stage_epochs > 1:
        return cfg.lr * 0.5 * (1 + math.cos(math.pi * epoch_in_stage
                                            / stage_epochs))
    return cfg.lr


@dataclass
class StageResult:
    """Outcome of training one stage: logs plus the trained prefix weights."""

    stage_index: int
    epoch_logs: list[dict]
    wall_time_s: float
    updated_parameter_count: int
    state: dict[str, np.ndarray]
    spec_hash: str
    head_role: str
    checkpoint_path: str | None = None

    def summary(self) -> dict:
        return {
            "stage_index": self.stage_index,
            "epochs": len(self.epoch_logs),
            "epoch_logs": self.epoch_logs,
            "updated_parameter_count": self.updated_parameter_count,
            "head_role": self.head_role,
            "wall_time_s": self.wall_time_s,
            "checkpoint_path": self.checkpoint_path,
        }


def run_stage(net: PrefixNetwork, data: DatasetSplit,
              sched: ProgressiveSchedule, stage: int, *,
              epoch_offset: int = 0,
              augment_policy: AugmentPolicy = AugmentPolicy(),
              checkpoint_dir=None, log=None) -> StageResult:
    """Train the stage-``stage`` prefix for its allotted epochs.

    Shuffling and augmentation randomness for global epoch t come from
    (schedule seed, t), so runs that share a seed see identical streams
    regardless of how epochs are distributed over stages.
    """
    if net.active_stage != stage:
        raise ConfigError(
            f"network is at stage {net.active_stage}, asked to run stage {stage}")
    images, labels = data.part("train")
    if len(labels) == 0:
        raise DataError("training partition is empty")
    if data.num_classes != net.spec.num_classes:
        raise ConfigError(
            f"dataset has {data.num_classes} classes but the backbone head "
            f"outputs {net.spec.num_classes}")

    stage_epochs = sched.epochs[stage - 1]
    prepare = batch_preparer(data.normalization, net.spec.input_shape[0])
    val_images, val_labels = data.part("val")
    started = time.perf_counter()
    logs: list[dict] = []
    optimizer = build_optimizer(net.parameters(), sched.optimizer)

    for epoch in range(stage_epochs):
        epoch_global = epoch_offset + epoch
        lr = _epoch_lr(sched.optimizer, sched.lr_schedule, epoch, stage_epochs)
        for group in optimizer.param_groups:
            group["lr"] = lr
        perm = numpy_generator(
            derive_seed(sched.seed, "shuffle", epoch_global)
        ).permutation(len(labels))
        aug_rng = numpy_generator(
            derive_seed(sched.seed, "augment", epoch_global))

        net.train()
        loss_sum, seen = 0.0, 0
        for lo in range(0, len(perm), sched.batch_size):
            idx = perm[lo: lo + sched.batch_size]
            batch = augment(images[idx], augment_policy, aug_rng)
            x = prepare(batch)
            y = torch.from_numpy(labels[idx])
            logits = net(x)
            loss = F.cross_entropy(logits, y)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss {value} at stage {stage}, epoch "
                    f"{epoch + 1}/{stage_epochs} (global epoch "
                    f"{epoch_global + 1})", stage, epoch_global, value)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            loss_sum += value * len(idx)
            seen += len(idx)

        entry = {"epoch_in_stage": epoch + 1, "epoch_global": epoch_global + 1,
                 "lr": lr, "train_loss": loss_sum / seen}
        if len(val_labels):
            preds = predict(net, val_images, prepare=prepare)
            entry["val_accuracy"] = float((preds == val_labels).mean())
        logs.append(entry)
        if log:
            log(f"stage {stage} epoch {epoch + 1}/{stage_epochs} "
                f"loss {entry['train_loss']:.4f}"
                + (f" val_acc {entry['val_accuracy']:.4f}"
                   if "val_accuracy" in entry else ""))

    result = StageResult(
        stage_index=stage,
        epoch_logs=logs,
        wall_time_s=time.perf_counter() - started,
        updated_parameter_count=parameter_count(net),
        state=state_arrays(net),
        spec_hash=net.spec.stable_hash(),
        head_role=net.head_role,
    )
    if checkpoint_dir is not None:
        path = Path(checkpoint_dir) / f"stage{stage:02d}.ckpt"
        path.parent.mkdir(parents=True, exist_ok=True)
        result.checkpoint_path = save_checkpoint(
            path, net, spec=net.spec, stage_index=stage, seed=sched.seed,
            epoch=stage_epochs, head_role=net.head_role,
            extra={"plan_sizes": list(sched.plan.sizes)})
    return result


def _prefix_state(state: dict[str, np.ndarray], n_blocks: int) -> dict:
    """Stem and first-``n_blocks`` block tensors from a stage snapshot."""
    keep = {}
    for name, arr in state.items():
        if name.startswith("stem."):
            keep[name] = arr
        elif name.startswith("blocks."):
            index = int(name.split(".", 2)[1])
            if index < n_blocks:
                keep[name] = arr
    return keep


def grow(prev: StageResult, blocklist: OrderedBlockList, plan: StagePlan,
         next_stage: int, *, seed: int,
         final_head_at_last: bool = True) -> PrefixNetwork:
    """Activate the next stage: reuse every trained prefix weight verbatim,
    randomly initialize the newly activated blocks, and attach a fresh head
    (the standard final classifier once the last stage is reached). The old
    head's parameters appear nowhere in the returned network. Nothing is
    frozen; all active blocks remain trainable."""
    if next_stage != prev.stage_index + 1:
        raise ConfigError(
            f"cannot grow from stage {prev.stage_index} to {next_stage}")
    if next_stage > plan.num_stages:
        raise ConfigError(
            f"stage {next_stage} exceeds the plan's {plan.num_stages} stages")
    if prev.spec_hash != blocklist.spec.stable_hash():
        raise CheckpointError(
            f"stage result was produced for backbone {prev.spec_hash}, "
            f"not {blocklist.spec.stable_hash()}")

    n_prev = plan.prefix_length(prev.stage_index)
    prefix = _prefix_state(prev.state, n_prev)
    tensors = {k: torch.from_numpy(v.copy()) for k, v in prefix.items()}
    missing, unexpected = blocklist.load_state_dict(tensors, strict=False)
    if unexpected:
        raise CheckpointError(f"stage snapshot has unknown tensors {unexpected}")

    new_gen = torch_generator(derive_seed(seed, "grow", next_stage))
    blocklist.reset_blocks(
        range(n_prev, plan.prefix_length(next_stage)), new_gen)

    final = final_head_at_last and next_stage == plan.num_stages
    role = FINAL_HEAD if final else PROGRESSIVE_HEAD
    head_seed = derive_seed(seed, "head", "final" if final else next_stage)
    return build_prefix(blocklist, plan, next_stage, head_role=role,
                        head_seed=head_seed)


def _initial_prefix(blocklist: OrderedBlockList, plan: StagePlan, *,
                    seed: int, final_head_at_last: bool) -> PrefixNetwork:
    final = final_head_at_last and plan.num_stages == 1
    role = FINAL_HEAD if final else PROGRESSIVE_HEAD
    head_seed = derive_seed(seed, "head", "final" if final else 1)
    return build_prefix(blocklist, plan, 1, head_role=role, head_seed=head_seed)


@dataclass
class RunReport:
    """Everything a finished (or aborted) run produced, JSON-serializable."""

    mode: str
    backbone: dict
    schedule: dict
    augment_policy: dict
    dataset: dict
    seed: int
    config_hash: str
    stages: list[dict]
    final_metrics: dict | None
    val_metrics: dict | None
    compute: dict | None
    weights_hash: str | None
    notes: list[str]
    timing: dict
    status: str = "completed"
    error: str | None = None
    schema_version: int = 1

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "status": self.status,
            "error": self.error,
            "mode": self.mode,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "backbone": self.backbone,
            "schedule": self.schedule,
            "augment_policy": self.augment_policy,
            "dataset": self.dataset,
            "stages": self.stages,
            "final_metrics": self.final_metrics,
            "val_metrics": self.val_metrics,
            "compute": self.compute,
            "weights_hash": self.weights_hash,
            "notes": self.notes,
            "timing": self.timing,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def strip_volatile(value):
    """Drop timing, filesystem paths, and other environment-dependent keys
    so reports from identical configurations compare equal."""
    if isinstance(value, dict):
        return {k: strip_volatile(v) for k, v in value.items()
                if k not in VOLATILE_REPORT_KEYS}
    if isinstance(value, list):
        return [strip_volatile(v) for v in value]
    return value


def _config_hash(payload: dict) -> str:
    blob = json.dumps(strip_volatile(payload), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _utcnow() -> str:
    return datetime.now(timezone.utc).isoformat()


def _write_epoch_csv(path, stages: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "epoch_in_stage", "epoch_global", "lr",
                         "train_loss", "val_accuracy"])
        for stage in stages:
            for entry in stage["epoch_logs"]:
                writer.writerow([
                    stage["stage_index"], entry["epoch_in_stage"],
                    entry["epoch_global"], f"{entry['lr']:.8g}",
                    f"{entry['train_loss']:.8g}",
                    f"{entry.get('val_accuracy', '')}"])


def run_curriculum(spec: BackboneSpec, sched: ProgressiveSchedule,
                   data: DatasetSplit, *,
                   augment_policy: AugmentPolicy = AugmentPolicy(),
                   out_dir=None, mode_label: str = "progressive",
                   final_head_at_last: bool = True,
                   resume_from=None, log=None) -> RunReport:
    """Execute the full depth curriculum and return the run report.

    Stages run in order through :func:`run_stage` and :func:`grow`; the
    final model is the fully grown network, evaluated with a single forward
    pass per image. A stage failure writes a partial report (when
    ``out_dir`` is given) and re-raises.
    """
    enable_determinism()
    plan = sched.plan
    if plan.total_blocks != spec.block_count:
        raise ConfigError(
            f"plan covers {plan.total_blocks} blocks, backbone has "
            f"{spec.block_count}")
    if data.num_classes != spec.num_classes:
        raise ConfigError(
            f"dataset has {data.num_classes} classes, backbone expects "
            f"{spec.num_classes}")
    if tuple(data.image_shape[1:]) != tuple(spec.input_shape[1:]):
        raise ConfigError(
            f"dataset images are {data.image_shape[1:]}, backbone expects "
            f"{spec.input_shape[1:]}")

    out_path = Path(out_dir) if out_dir is not None else None
    ckpt_dir = out_path / "checkpoints" if out_path else None
    if out_path:
        out_path.mkdir(parents=True, exist_ok=True)

    config_payload = {
        "mode": mode_label,
        "backbone": spec.to_dict(),
        "schedule": sched.to_dict(),
        "augment_policy": augment_policy.to_dict(),
        "dataset": data.manifest(),
        "final_head_at_last": final_head_at_last,
    }
    config_hash = _config_hash(config_payload)

    started = _utcnow()
    t0 = time.perf_counter()
    blocklist = build_backbone(spec, seed=derive_seed(sched.seed, "init"))

    first_stage = 1
    prev: StageResult | None = None
    if resume_from is not None:
        manifest, tensors = load_checkpoint(resume_from, expected_spec=spec)
        resumed_stage = int(manifest["stage_index"])
        if resumed_stage >= plan.num_stages:
            raise ConfigError(
                f"checkpoint {resume_from} already covers the final stage")
        prev = StageResult(
            stage_index=resumed_stage, epoch_logs=[], wall_time_s=0.0,
            updated_parameter_count=0, state=tensors,
            spec_hash=manifest["spec_hash"],
            head_role=manifest.get("head_role", PROGRESSIVE_HEAD),
            checkpoint_path=str(resume_from))
        first_stage = resumed_stage + 1

    if prev is None:
        net = _initial_prefix(blocklist, plan, seed=sched.seed,
                              final_head_at_last=final_head_at_last)
    else:
        net = grow(prev, blocklist, plan, first_stage, seed=sched.seed,
                   final_head_at_last=final_head_at_last)

    notes = ["weights trained from scratch (no pretrained initialization)",
             "cost fractions use the parameter-updates model (epoch cost "
             "proportional to trainable parameters), a reconstruction; the "
             "flops view is reported alongside as an alternative"]
    if plan.num_stages == 1:
        notes.append("single-stage schedule: equivalent to entire-model "
                     "training at the same seed")
    if resume_from is not None:
        notes.append(f"resumed from stage-{first_stage - 1} checkpoint")

    stage_summaries: list[dict] = []
    epoch_offset = sum(sched.epochs[: first_stage - 1])

    def partial_report(error: Exception) -> RunReport:
        return RunReport(
            mode=mode_label, backbone=spec.to_dict(), schedule=sched.to_dict(),
            augment_policy=augment_policy.to_dict(), dataset=data.manifest(),
            seed=sched.seed, config_hash=config_hash, stages=stage_summaries,
            final_metrics=None, val_metrics=None, compute=None,
            weights_hash=None, notes=notes,
            timing={"started": started, "finished": _utcnow(),
                    "wall_time_s": time.perf_counter() - t0},
            status="aborted", error=str(error))

    for stage in range(first_stage, plan.num_stages + 1):
        try:
            result = run_stage(net, data, sched, stage,
                               epoch_offset=epoch_offset,
                               augment_policy=augment_policy,
                               checkpoint_dir=ckpt_dir, log=log)
        except TrainingDivergedError as exc:
            report = partial_report(exc)
            if out_path:
                (out_path / "report.json").write_text(report.to_json())
            raise
        stage_summaries.append(result.summary())
        epoch_offset += sched.epochs[stage - 1]
        if stage < plan.num_stages:
            net = grow(result, blocklist, plan, stage + 1, seed=sched.seed,
                       final_head_at_last=final_head_at_last)

    prepare_channels = spec.input_shape[0]
    test_images, test_labels = data.part("test")
    prep = batch_preparer(data.normalization, prepare_channels)
    final_metrics = evaluate(net, test_images, test_labels,
                             num_classes=spec.num_classes, prepare=prep,
                             class_names=data.class_names).to_dict()
    val_metrics = None
    val_images, val_labels = data.part("val")
    if len(val_labels):
        val_metrics = evaluate(net, val_images, val_labels,
                               num_classes=spec.num_classes, prepare=prep,
                               class_names=data.class_names).to_dict()

    report = RunReport(
        mode=mode_label,
        backbone=spec.to_dict(),
        schedule=sched.to_dict(),
        augment_policy=augment_policy.to_dict(),
        dataset=data.manifest(),
        seed=sched.seed,
        config_hash=config_hash,
        stages=stage_summaries,
        final_metrics=final_metrics,
        val_metrics=val_metrics,
        compute=cost_report(spec, plan, sched.epochs),
        weights_hash=payload_hash(net),
        notes=notes,
        timing={"started": started, "finished": _utcnow(),
                "wall_time_s": time.perf_counter() - t0},
    )
    if out_path:
        (out_path / "report.json").write_text(report.to_json())
        _write_epoch_csv(out_path / "epochs.csv", stage_summaries)
    return report


def train_entire(spec: BackboneSpec, epochs: int, data: DatasetSplit,
                 optimizer: OptimizerConfig = OptimizerConfig(), *,
                 batch_size: int = 64, seed: int = 0,
                 lr_schedule: str = "constant",
                 augment_policy: AugmentPolicy = AugmentPolicy(),
                 out_dir=None, log=None) -> RunReport:
    """Conventional end-to-end training of the full network with its final
    classifier, sharing the data order and augmentation stream of a
    progressive run with the same seed."""
    sched = ProgressiveSchedule(
        plan=make_plan(spec.block_count, 1), epochs=(int(epochs),),
        optimizer=optimizer, batch_size=batch_size, seed=seed,
        lr_schedule=lr_schedule)
    return run_curriculum(spec, sched, data, augment_policy=augment_policy,
                          out_dir=out_dir, mode_label="entire", log=log)


def load_network_from_checkpoint(path) -> tuple[PrefixNetwork, dict]:
    """Rebuild the network a checkpoint was saved from and restore its
    weights; returns the network and the checkpoint manifest."""
    manifest, tensors = load_checkpoint(path)
    spec = BackboneSpec.from_dict(manifest["backbone"])
    sizes = manifest.get("extra", {}).get("plan_sizes")
    if sizes is None:
        raise CheckpointError(
            f"{path} does not record its stage plan; cannot rebuild")
    plan = StagePlan(sum(sizes), tuple(int(s) for s in sizes))
    blocklist = build_backbone(spec)
    net = build_prefix(blocklist, plan, int(manifest["stage_index"]),
                       head_role=manifest.get("head_role", PROGRESSIVE_HEAD))
    restore_state(net, tensors)
    return net, manifest


def comparison_rows(reports: list[RunReport]) -> list[dict]:
    """Per-run comparison rows: schedule, mode, accuracy, weighted P/R/F1,
    and the overall-computation fraction (None for entire-model runs)."""
    rows = []
    for report in reports:
        epochs = report.schedule["epochs"]
        weighted = report.final_metrics["weighted"]
        fraction = None
        if report.mode != "entire":
            fraction = report.compute["modes"]["parameter-updates"][
                "overall_fraction"]
        rows.append({
            "experiment": ", ".join(str(e) for e in epochs),
            "model": report.backbone.get("name") or report.backbone["family"],
            "mode": report.mode,
            "accuracy": report.final_metrics["accuracy"],
            "weighted_precision": weighted["precision"],
            "weighted_recall": weighted["recall"],
            "weighted_f1": weighted["f1"],
            "overall_computation": fraction,
        })
    return rows


def render_comparison(rows: list[dict]) -> str:
    header = (f"{'Experiment':<16}{'Model':<26}{'Mode':<13}{'Accuracy':>9}  "
              f"{'Prec / Rec / F1':<26}{'Overall comp.':>14}")
    lines = [header, "-" * len(header)]
    for row in rows:
        frac = (f"{row['overall_computation'] * 100:.1f}%"
                if row["overall_computation"] is not None else "---")
        lines.append(
            f"{row['experiment']:<16}{row['model']:<26}{row['mode']:<13}"
            f"{row['accuracy']:>9.4f}  "
            f"{row['weighted_precision']:.4f} / {row['weighted_recall']:.4f} "
            f"/ {row['weighted_f1']:.4f}   {frac:>12}")
    return "\n".join(lines)


def run_paired(spec: BackboneSpec, sched: ProgressiveSchedule,
               data: DatasetSplit, *,
               augment_policy: AugmentPolicy = AugmentPolicy(),
               out_dir=None, log=None) -> dict:
    """Run the entire-model baseline and the progressive curriculum under
    identical seed, total epochs, data order, and augmentation stream."""
    out_path = Path(out_dir) if out_dir is not None else None
    entire = train_entire(
        spec, sched.total_epochs, data, sched.optimizer,
        batch_size=sched.batch_size, seed=sched.seed,
        lr_schedule=sched.lr_schedule, augment_policy=augment_policy,
        out_dir=out_path / "entire" if out_path else None, log=log)
    progressive = run_curriculum(
        spec, sched, data, augment_policy=augment_policy,
        out_dir=out_path / "progressive" if out_path else None, log=log)
    rows = comparison_rows([entire, progressive])
    if out_path:
        (out_path / "comparison.json").write_text(
            json.dumps(rows, indent=2, sort_keys=True))
        with open(out_path / "comparison.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    return {"entire": entire, "progressive": progressive, "comparison": rows}

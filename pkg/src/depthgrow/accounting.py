"""Training-cost accounting for depth curricula.

Costs are computed analytically from the backbone description, so even the
largest presets can be priced without instantiating any tensors. Two cost
models are offered:

* ``parameter-updates`` - one epoch costs the number of trainable
  parameters of the active prefix (including its head). This is the model
  that reproduces the published per-schedule cost fractions.
* ``flops`` - one epoch costs the estimated forward+backward
  multiply-accumulates per sample (backward taken as twice the forward
  pass). Reported as an alternative view; for convolutional backbones the
  two models disagree because early stages keep the full spatial
  resolution.

The headline quantity is the cost of a progressive schedule relative to
entire-model training for the same total epoch count:
sum_k e_k * c_k / (sum_k e_k * c_full).
"""

from __future__ import annotations

from dataclasses import dataclass

from .backbones import (
    FINAL_HEAD,
    PROGRESSIVE_HEAD,
    RESIDUAL_BASIC,
    BackboneSpec,
    BottleneckBlock,
)
from .errors import ConfigError
from .partition import StagePlan

COST_MODES = ("parameter-updates", "flops")


def _conv_out(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


# ---------------------------------------------------------------------------
# parameter counts


def _stem_params(spec: BackboneSpec) -> int:
    c_in = spec.input_shape[0]
    if spec.is_transformer:
        tok = spec.stem
        tokens = tok.token_count(spec.input_shape[1], spec.input_shape[2])
        proj = tok.patch_size ** 2 * c_in * tok.embed_dim + tok.embed_dim
        return proj + tok.embed_dim + (tokens + 1) * tok.embed_dim
    st = spec.stem
    return st.kernel_size ** 2 * c_in * st.out_channels + 2 * st.out_channels


def _block_params(spec: BackboneSpec, index0: int) -> int:
    if spec.is_transformer:
        d = spec.stem.embed_dim
        hidden = int(d * spec.mlp_ratio)
        attn = (d * 3 * d + 3 * d) + (d * d + d)
        mlp = (d * hidden + hidden) + (hidden * d + d)
        return 2 * d + attn + 2 * d + mlp
    c_in = (spec.stem.out_channels if index0 == 0
            else spec.block_widths[index0 - 1])
    c_out = spec.block_widths[index0]
    stride = spec.block_strides[index0]
    shortcut = (c_in * c_out + 2 * c_out) if (stride != 1 or c_in != c_out) else 0
    if spec.family == RESIDUAL_BASIC:
        return (9 * c_in * c_out + 2 * c_out
                + 9 * c_out * c_out + 2 * c_out + shortcut)
    w = c_out // BottleneckBlock.EXPANSION
    return (c_in * w + 2 * w + 9 * w * w + 2 * w
            + w * c_out + 2 * c_out + shortcut)


def _head_params(spec: BackboneSpec, n_blocks: int, role: str) -> int:
    width = spec.width_after(n_blocks)
    classes = spec.num_classes
    if spec.is_transformer:
        return 2 * width + width * classes + classes
    if role == PROGRESSIVE_HEAD:
        e = spec.head_embed_width
        return width * e + e + e * classes + classes
    return width * classes + classes


def prefix_parameter_count(spec: BackboneSpec, n_blocks: int,
                           head_role: str = PROGRESSIVE_HEAD) -> int:
    """Trainable parameters of the ``n_blocks``-deep prefix plus its head."""
    return (_stem_params(spec)
            + sum(_block_params(spec, i) for i in range(n_blocks))
            + _head_params(spec, n_blocks, head_role))


def network_parameter_count(spec: BackboneSpec) -> int:
    """Parameters of the canonical full network with its final classifier."""
    return prefix_parameter_count(spec, spec.block_count, FINAL_HEAD)


# ---------------------------------------------------------------------------
# multiply-accumulate estimates


def _cnn_spatial_after_stem(spec: BackboneSpec) -> tuple[int, int]:
    st = spec.stem
    h = _conv_out(spec.input_shape[1], st.kernel_size, st.stride,
                  st.kernel_size // 2)
    w = _conv_out(spec.input_shape[2], st.kernel_size, st.stride,
                  st.kernel_size // 2)
    if st.pool == 3:
        h, w = _conv_out(h, 3, 2, 1), _conv_out(w, 3, 2, 1)
    elif st.pool == 2:
        h, w = _conv_out(h, 2, 2, 0), _conv_out(w, 2, 2, 0)
    return h, w


def _prefix_forward_macs(spec: BackboneSpec, n_blocks: int, role: str) -> int:
    classes = spec.num_classes
    if spec.is_transformer:
        tok = spec.stem
        d = tok.embed_dim
        t = tok.token_count(spec.input_shape[1], spec.input_shape[2]) + 1
        macs = (t - 1) * tok.patch_size ** 2 * spec.input_shape[0] * d
        hidden = int(d * spec.mlp_ratio)
        per_layer = (t * d * 3 * d        # qkv projections
                     + 2 * t * t * d      # attention scores and weighted sum
                     + t * d * d          # output projection
                     + 2 * t * d * hidden)  # the two MLP maps
        macs += n_blocks * per_layer
        return macs + d * classes
    st = spec.stem
    h0 = spec.input_shape[1]
    w0 = spec.input_shape[2]
    h1 = _conv_out(h0, st.kernel_size, st.stride, st.kernel_size // 2)
    w1 = _conv_out(w0, st.kernel_size, st.stride, st.kernel_size // 2)
    macs = h1 * w1 * st.kernel_size ** 2 * spec.input_shape[0] * st.out_channels
    h, w = _cnn_spatial_after_stem(spec)
    c_in = st.out_channels
    for i in range(n_blocks):
        c_out = spec.block_widths[i]
        stride = spec.block_strides[i]
        oh, ow = _conv_out(h, 3, stride, 1), _conv_out(w, 3, stride, 1)
        if spec.family == RESIDUAL_BASIC:
            macs += oh * ow * 9 * c_in * c_out + oh * ow * 9 * c_out * c_out
        else:
            mid = c_out // BottleneckBlock.EXPANSION
            macs += (h * w * c_in * mid        # 1x1 reduce at input resolution
                     + oh * ow * 9 * mid * mid
                     + oh * ow * mid * c_out)
        if stride != 1 or c_in != c_out:
            macs += oh * ow * c_in * c_out
        h, w, c_in = oh, ow, c_out
    width = spec.width_after(n_blocks)
    if role == PROGRESSIVE_HEAD:
        macs += width * spec.head_embed_width + spec.head_embed_width * classes
    else:
        macs += width * classes
    return macs


def prefix_training_macs(spec: BackboneSpec, n_blocks: int,
                         head_role: str = PROGRESSIVE_HEAD) -> int:
    """Per-sample forward+backward MACs (backward counted as 2x forward)."""
    return 3 * _prefix_forward_macs(spec, n_blocks, head_role)


# ---------------------------------------------------------------------------
# cost model and schedule accounting


def stage_cost(spec: BackboneSpec, plan: StagePlan, stage: int,
               mode: str = "parameter-updates", *,
               final_head_at_last: bool = True) -> int:
    """Cost of one epoch at the given stage (stage K uses the final
    classifier unless ``final_head_at_last`` is disabled)."""
    if mode not in COST_MODES:
        raise ConfigError(f"unknown cost mode {mode!r}; expected {COST_MODES}")
    n = plan.prefix_length(stage)
    role = (FINAL_HEAD if final_head_at_last and stage == plan.num_stages
            else PROGRESSIVE_HEAD)
    if mode == "parameter-updates":
        return prefix_parameter_count(spec, n, role)
    return prefix_training_macs(spec, n, role)


@dataclass(frozen=True)
class CostModel:
    """Per-stage epoch costs c_1..c_K plus the full-network epoch cost."""

    mode: str
    per_stage_cost: tuple[int, ...]
    full_cost: int

    @classmethod
    def build(cls, spec: BackboneSpec, plan: StagePlan,
              mode: str = "parameter-updates", *,
              final_head_at_last: bool = True) -> "CostModel":
        per_stage = tuple(
            stage_cost(spec, plan, k, mode, final_head_at_last=final_head_at_last)
            for k in range(1, plan.num_stages + 1))
        if mode == "parameter-updates":
            full = network_parameter_count(spec)
        else:
            full = prefix_training_macs(spec, spec.block_count, FINAL_HEAD)
        return cls(mode=mode, per_stage_cost=per_stage, full_cost=full)


def overall_computation(schedule_or_epochs, model: CostModel) -> float:
    """Progressive cost relative to entire-model training at equal total
    epochs: sum_k e_k*c_k / (sum_k e_k * c_full). Always in (0, 1] for
    nonempty schedules; exactly 1 when every epoch runs the full network."""
    epochs = getattr(schedule_or_epochs, "epochs", schedule_or_epochs)
    epochs = tuple(int(e) for e in epochs)
    if len(epochs) != len(model.per_stage_cost):
        raise ConfigError(
            f"{len(epochs)} epoch entries for {len(model.per_stage_cost)} "
            f"stage costs")
    total = sum(epochs)
    if total == 0:
        raise ConfigError("schedule has zero total epochs")
    progressive = sum(e * c for e, c in zip(epochs, model.per_stage_cost))
    return progressive / (total * model.full_cost)


def cost_report(spec: BackboneSpec, plan: StagePlan, epochs) -> dict:
    """Both cost models for one schedule: per-stage breakdown + fractions."""
    report = {"backbone": spec.name or spec.family,
              "plan": plan.to_dict(), "epochs": list(epochs), "modes": {}}
    for mode in COST_MODES:
        model = CostModel.build(spec, plan, mode)
        report["modes"][mode] = {
            "per_stage_cost": list(model.per_stage_cost),
            "full_cost": model.full_cost,
            "overall_fraction": overall_computation(epochs, model),
        }
    return report

import pytest
from hypothesis import given, settings, strategies as st

from depthgrow.accounting import (
    CostModel,
    cost_report,
    network_parameter_count,
    overall_computation,
    prefix_parameter_count,
    prefix_training_macs,
    stage_cost,
)
from depthgrow.backbones import (
    FINAL_HEAD,
    backbone_preset,
    build_backbone,
    build_prefix,
    full_network,
    parameter_count,
)
from depthgrow.errors import ConfigError
from depthgrow.partition import make_plan
from depthgrow.schedule import ProgressiveSchedule


# The published per-schedule cost percentages, reproduced in
# parameter-updates mode within +-1.5 points.
PUBLISHED_FRACTIONS = [
    ("residual-18", 5, (5, 5, 30, 280), 0.893),
    ("residual-18", 5, (10, 290), 0.968),
    ("residual-101", 5, (5, 5, 30, 280), 0.932),
    ("transformer-b16", 5, (50, 350), 0.938),
    ("transformer-b16", 10, (3, 22), 0.941),
]


@pytest.mark.parametrize("name,classes,epochs,published", PUBLISHED_FRACTIONS)
def test_published_cost_fractions(name, classes, epochs, published):
    spec = backbone_preset(name, classes)
    plan = make_plan(spec.block_count, len(epochs))
    model = CostModel.build(spec, plan, "parameter-updates")
    fraction = overall_computation(epochs, model)
    assert abs(fraction - published) <= 0.015


def test_single_stage_fraction_is_exactly_one():
    spec = backbone_preset("tiny-residual-basic", 5)
    plan = make_plan(spec.block_count, 1)
    for mode in ("parameter-updates", "flops"):
        model = CostModel.build(spec, plan, mode)
        assert overall_computation((17,), model) == 1.0


def test_stage_cost_matches_hand_summed_layers():
    # residual-18, K=2, stage 1: stem + first four basic blocks + the
    # pooled projection head, summed layer by layer.
    stem = 7 * 7 * 3 * 64 + 2 * 64
    def basic(c_in, c_out, stride):
        sc = c_in * c_out + 2 * c_out if (stride != 1 or c_in != c_out) else 0
        return 9 * c_in * c_out + 2 * c_out + 9 * c_out**2 + 2 * c_out + sc
    blocks = (basic(64, 64, 1) + basic(64, 64, 1)
              + basic(64, 128, 2) + basic(128, 128, 1))
    head = 128 * 256 + 256 + 256 * 5 + 5
    oracle = stem + blocks + head

    spec = backbone_preset("residual-18", 5)
    plan = make_plan(8, 2)
    assert stage_cost(spec, plan, 1, "parameter-updates") == oracle
    # and the instantiated module agrees
    net = build_prefix(build_backbone(spec, device="meta"), plan, 1)
    assert parameter_count(net) == oracle


def test_stage_k_equals_full_network_cost():
    for name in ("residual-18", "transformer-b16", "tiny-residual-bottleneck"):
        spec = backbone_preset(name, 5)
        plan = make_plan(spec.block_count, 2)
        assert stage_cost(spec, plan, 2, "parameter-updates") == \
            network_parameter_count(spec)


def test_transformer_half_depth_cost_ratio():
    spec = backbone_preset("transformer-b16", 5)
    plan = make_plan(12, 2)
    c1 = stage_cost(spec, plan, 1, "parameter-updates")
    full = network_parameter_count(spec)
    assert 0.50 <= c1 / full <= 0.52


@pytest.mark.parametrize("name", [
    "residual-18", "residual-34", "residual-50", "residual-101",
    "residual-152", "transformer-b16", "transformer-l16",
    "transformer-b32-overlap", "tiny-residual-basic", "tiny-transformer"])
def test_costs_strictly_increasing_per_stage(name):
    spec = backbone_preset(name, 5)
    stages = min(4, spec.block_count)
    plan = make_plan(spec.block_count, stages)
    for mode in ("parameter-updates", "flops"):
        model = CostModel.build(spec, plan, mode)
        costs = model.per_stage_cost
        assert all(a < b for a, b in zip(costs, costs[1:])), (name, mode, costs)
        assert costs[-1] <= model.full_cost


def test_analytic_counts_match_instantiated_everywhere():
    for name in ("residual-18", "residual-50", "transformer-b16",
                 "tiny-residual-basic", "tiny-residual-bottleneck",
                 "tiny-transformer"):
        spec = backbone_preset(name, 7)
        blocklist = build_backbone(spec, device="meta")
        assert network_parameter_count(spec) == \
            parameter_count(full_network(blocklist))
        plan = make_plan(spec.block_count, 2)
        for k, role in ((1, "progressive"), (2, FINAL_HEAD)):
            net = build_prefix(blocklist, plan, k, head_role=role)
            assert prefix_parameter_count(
                spec, plan.prefix_length(k), role) == parameter_count(net)


def test_flops_mode_counts_spatial_resolution():
    # At equal prefix depth, a conv stage running at full resolution must
    # cost more MACs than its parameter count alone suggests: stage 1 of
    # residual-18 is ~2% of parameters but ~37% of full-network MACs.
    spec = backbone_preset("residual-18", 5)
    plan = make_plan(8, 4)
    params = CostModel.build(spec, plan, "parameter-updates")
    flops = CostModel.build(spec, plan, "flops")
    param_share = params.per_stage_cost[0] / params.full_cost
    flop_share = flops.per_stage_cost[0] / flops.full_cost
    assert flop_share > 5 * param_share


def test_shifting_epochs_earlier_never_raises_cost():
    spec = backbone_preset("residual-18", 5)
    plan = make_plan(8, 4)
    model = CostModel.build(spec, plan, "parameter-updates")
    base = [5, 5, 30, 280]
    fraction = overall_computation(base, model)
    for later in range(1, 4):
        for earlier in range(later):
            shifted = list(base)
            shifted[later] -= 1
            shifted[earlier] += 1
            assert overall_computation(shifted, model) <= fraction


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 40), min_size=4, max_size=4))
def test_fraction_always_in_unit_interval(epochs):
    spec = backbone_preset("tiny-residual-basic", 5)
    plan = make_plan(4, 4)
    model = CostModel.build(spec, plan, "parameter-updates")
    if sum(epochs) == 0:
        with pytest.raises(ConfigError):
            overall_computation(epochs, model)
        return
    fraction = overall_computation(epochs, model)
    assert 0.0 < fraction <= 1.0
    # exactly 1 iff every epoch runs the full network under the final head
    if fraction == 1.0:
        assert sum(epochs[:-1]) == 0


def test_overall_computation_accepts_schedule_objects():
    spec = backbone_preset("tiny-residual-basic", 5)
    plan = make_plan(4, 2)
    sched = ProgressiveSchedule(plan=plan, epochs=(2, 3))
    model = CostModel.build(spec, plan, "parameter-updates")
    assert overall_computation(sched, model) == \
        overall_computation((2, 3), model)


def test_unknown_mode_rejected():
    spec = backbone_preset("tiny-residual-basic", 5)
    plan = make_plan(4, 2)
    with pytest.raises(ConfigError):
        stage_cost(spec, plan, 1, "wall-clock")


def test_cost_report_has_both_modes():
    spec = backbone_preset("transformer-b16", 5)
    plan = make_plan(12, 2)
    report = cost_report(spec, plan, (50, 350))
    assert set(report["modes"]) == {"parameter-updates", "flops"}
    for mode in report["modes"].values():
        assert len(mode["per_stage_cost"]) == 2
        assert 0 < mode["overall_fraction"] <= 1

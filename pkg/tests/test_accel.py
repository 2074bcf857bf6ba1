from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flexblock.accel import (
    CoreGeometry,
    CostModelConfig,
    CycleEstimate,
    accumulation_scale_factor,
    estimate_cycles,
    estimate_energy,
    estimate_training_step,
    mapping_passes,
    peak_macs_per_cycle,
    plan_mapping,
    tensor_bytes,
    utilization,
)
from flexblock.bfp import block_shape_for
from flexblock.layers import LayerKind, LayerSpec, PrecisionConfig

ONE_CORE = CoreGeometry(cores=1)
FREE_DRAM = CostModelConfig(dram_bandwidth=float("inf"), dram_latency=0)
FORMATS = ["FB12", "FB16", "FB24"]


def layer(kind, c_in, c_out, h, **kw):
    return LayerSpec(LayerKind.coerce(kind), c_in, c_out, h, h, **kw)


# --- geometry and peaks ---------------------------------------------------------

def test_default_geometry():
    assert CoreGeometry().mults_per_core == 864
    with pytest.raises(ValueError):
        CoreGeometry(cores=0)


@pytest.mark.parametrize("fmt, peak", [("FB24", 3456), ("FB16", 13824), ("FB12", 55296)])
def test_peak_macs(fmt, peak):
    w = {"FB24": 16, "FB16": 8, "FB12": 4}[fmt]
    assert peak_macs_per_cycle(CoreGeometry(), w) == peak


def test_mixed_precision_peak():
    # 27 operand-width combinations; peak depends on (xw/4)(ww/4)
    g = CoreGeometry()
    for xw in (4, 8, 16):
        for ww in (4, 8, 16):
            assert peak_macs_per_cycle(g, xw, ww) == 864 * 64 // ((xw // 4) * (ww // 4))


# --- accumulation law -----------------------------------------------------------

def test_accumulation_examples():
    assert accumulation_scale_factor("fusion_unit", 1, 1) == 4
    assert accumulation_scale_factor("pu_split", 1, 1) == 2
    assert accumulation_scale_factor("fusion_unit", 2, 2) == 16
    assert accumulation_scale_factor("pu_split", 2, 2) == 4
    with pytest.raises(ValueError):
        accumulation_scale_factor("fusion_unit", -1, 0)
    with pytest.raises(ValueError):
        accumulation_scale_factor("systolic", 1, 1)


@given(st.integers(0, 6), st.integers(0, 6))
def test_pu_split_never_worse(xh, wh):
    fu, pu = accumulation_scale_factor("fusion_unit", xh, wh), accumulation_scale_factor("pu_split", xh, wh)
    assert pu <= fu
    assert (pu == fu) == (min(xh, wh) == 0)


# --- mapping ------------------------------------------------------------------

def test_conv5_clusters_and_utilization():
    plan = plan_mapping(layer("conv5", 12, 4, 9), "FB24")
    assert (plan.cluster_size, plan.clusters) == (3, 2)
    assert plan.spatial_utilization == Fraction(25, 27)
    assert plan.reduction_path == "3D"


@pytest.mark.parametrize("fmt", FORMATS)
def test_conv7_single_cluster(fmt):
    plan = plan_mapping(layer("conv7", 16, 16, 9), fmt)
    assert (plan.cluster_size, plan.clusters) == (6, 1)
    assert plan.spatial_utilization == Fraction(49, 54)


def test_conv3_block_per_cycle_matches_table():
    plan = plan_mapping(layer("conv3", 6, 1, 5), "FB24")
    assert plan.channels_per_cycle == 6 and plan.outputs_per_cycle == 1
    assert 9 * plan.channels_per_cycle * plan.outputs_per_cycle == peak_macs_per_cycle(CoreGeometry(), 16, per_core=True)


def test_dim_assignment_and_paths():
    assert plan_mapping(layer("conv1", 8, 8, 4), "FB16").dim_assignment["subcore"] == "C_in"
    assert plan_mapping(layer("conv3", 8, 8, 4), "FB16").dim_assignment["subcore"] == "C_in"
    assert plan_mapping(layer("conv5", 8, 8, 6), "FB16").dim_assignment["pu"] == "C_out"
    dw = plan_mapping(layer("dwconv3", 8, 8, 6), "FB16")
    assert dw.reduction_path == "2D" and dw.dim_assignment["subcore"].startswith("C")
    wu = plan_mapping(layer("conv3", 8, 8, 6), "FB16", step="wu")
    assert wu.reduction_path == "2D" and wu.dim_assignment["subcore"].startswith("C_out")
    for step in ("fw", "bw"):
        assert plan_mapping(layer("conv3", 8, 8, 6), "FB16", step=step).reduction_path == "3D"
    with pytest.raises(ValueError):
        plan_mapping(layer("conv3", 8, 8, 6), "FB16", step="xx")


def test_kernel_too_large_for_core():
    with pytest.raises(ValueError):
        plan_mapping(layer("conv7", 4, 4, 8), "FB16", CoreGeometry(subcores_per_core=4))


@pytest.mark.parametrize("kind", ["conv1", "conv3", "conv5", "conv7", "dwconv3", "dwconv5", "dwconv7"])
@pytest.mark.parametrize("fmt", FORMATS)
@pytest.mark.parametrize("step", ["fw", "bw", "wu"])
def test_macs_per_cycle_bounded_by_peak(kind, fmt, step):
    c = 8
    plan = plan_mapping(layer(kind, c, c, 9), fmt, step=step)
    assert 0 < plan.macs_per_cycle_per_core <= plan.peak_macs_per_core
    u = utilization(plan, batch=2)
    assert 0 < u <= 1


def test_utilization_examples():
    assert utilization(plan_mapping(layer("conv3", 12, 3, 6), "FB24")) == 1
    assert utilization(plan_mapping(layer("conv5", 12, 2, 9, padding=2), "FB24")) == Fraction(25, 27)
    assert utilization(plan_mapping(layer("conv7", 12, 4, 9, padding=3), "FB24")) == Fraction(49, 54)
    assert utilization(plan_mapping(layer("conv3", 3, 1, 6), "FB24")) == Fraction(1, 2)


def test_utilization_brute_force_channel_remainder():
    # occupancy: each cycle covers channels_per_cycle input channels; count used slots
    for c_in in range(1, 20):
        plan = plan_mapping(layer("conv3", c_in, 1, 5), "FB24")
        groups = -(-c_in // plan.channels_per_cycle)
        assert utilization(plan) == Fraction(c_in, groups * plan.channels_per_cycle)


def test_passes_expose_loop_counts():
    plan = plan_mapping(layer("conv3", 24, 4, 10), "FB16")
    assert mapping_passes(plan, 3) == {"c_in": 2, "c_out": 2, "positions": 64, "batch": 3}


# --- cycles ---------------------------------------------------------------------

def test_closed_form_cycles():
    l = layer("conv3", 12, 2, 10)  # 8x8 output
    assert l.macs_per_sample == 13824
    fb16 = estimate_cycles(plan_mapping(l, "FB16", ONE_CORE), batch=1, cost=FREE_DRAM, geometry=ONE_CORE)
    fb24 = estimate_cycles(plan_mapping(l, "FB24", ONE_CORE), batch=1, cost=FREE_DRAM, geometry=ONE_CORE)
    assert fb16.compute_cycles == 64 and fb16.memory_stall_cycles == 0
    assert fb24.compute_cycles == 256
    assert fb16.total_cycles == fb16.compute_cycles + fb16.memory_stall_cycles
    assert fb16.utilization == 1.0


def test_zero_layer_cycles():
    assert CycleEstimate().total_cycles == 0
    assert estimate_training_step([], PrecisionConfig()).cycles.total_cycles == 0


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(["conv1", "conv3", "conv5", "conv7", "dwconv3", "dwconv5"]),
       st.integers(1, 64), st.integers(1, 64), st.integers(7, 16), st.sampled_from(["fw", "bw", "wu"]))
def test_precision_monotonicity(kind, c_in, c_out, h, step):
    if kind.startswith("dw"):
        c_out = c_in
    l = layer(kind, c_in, c_out, h)
    cyc = [estimate_cycles(plan_mapping(l, f, step=step), batch=2).compute_cycles for f in FORMATS]
    assert cyc[0] <= cyc[1] <= cyc[2]


def test_stalls_with_narrow_dram_and_no_double_buffering():
    l = layer("conv3", 64, 64, 32, padding=1)
    plan = plan_mapping(l, "FB16")
    fast = estimate_cycles(plan, batch=8, cost=FREE_DRAM)
    slow = estimate_cycles(plan, batch=8, cost=CostModelConfig(dram_bandwidth=1e8))
    single = estimate_cycles(plan, batch=8, cost=CostModelConfig(dram_bandwidth=1e8, double_buffering=False))
    assert fast.memory_stall_cycles == 0
    assert slow.memory_stall_cycles > 0 and single.memory_stall_cycles >= slow.memory_stall_cycles
    assert slow.compute_cycles == fast.compute_cycles


def test_tensor_bytes():
    assert tensor_bytes(0, 8, 108) == 0
    assert tensor_bytes(216, 4, 216) == 108 + 1
    assert tensor_bytes(217, 16, 54) == 434 + 5


# --- energy ---------------------------------------------------------------------

def test_energy_formula_and_monotonicity():
    cost = CostModelConfig()
    c = CycleEstimate(333_000, 0, 1, 1)
    assert estimate_energy(c, 16, 16, cost).joules == pytest.approx(1e-3 * 7.36)
    assert estimate_energy(c, 4, 4, cost).joules == pytest.approx(1e-3 * 8.27)
    assert estimate_energy(c, 4, 8, cost).joules == pytest.approx(1e-3 * 7.80)  # widest operand sets the mode
    more = CycleEstimate(666_000, 0, 1, 1)
    assert estimate_energy(more, 8, 8, cost).joules > estimate_energy(c, 8, 8, cost).joules
    hot = CostModelConfig(power_watts={"FB12": 9.0, "FB16": 9.0, "FB24": 9.0})
    assert estimate_energy(c, 8, 8, hot).joules > estimate_energy(c, 8, 8, cost).joules
    dram = CostModelConfig(dram_energy_per_byte=1e-9)
    assert estimate_energy(CycleEstimate(0, 0, 0, 0, 1000), 8, 8, dram).joules == pytest.approx(1e-6)


def test_cost_config_validation():
    with pytest.raises(ValueError):
        CostModelConfig(input_buffer=0)
    with pytest.raises(ValueError):
        CostModelConfig(power_watts={"FB12": 1.0})


# --- training step aggregation ------------------------------------------------------

def test_training_step_single_conv1():
    l = layer("conv1", 54, 54, 8)
    est = estimate_training_step([l], PrecisionConfig(), batch=1, cost=FREE_DRAM)
    fw, bw, wu = (est.by_step(s).total_cycles for s in ("fw", "bw", "wu"))
    assert est.cycles.total_cycles == fw + bw + wu
    assert bw == fw


def test_training_step_fb24_vs_fb16_perfect_fit():
    layers = [layer("conv3", 48, 16, 10), layer("conv1", 216, 16, 8)]
    fb24 = estimate_training_step(layers, PrecisionConfig.uniform(16), batch=4, cost=FREE_DRAM, geometry=ONE_CORE)
    fb16 = estimate_training_step(layers, PrecisionConfig.uniform(8), batch=4, cost=FREE_DRAM, geometry=ONE_CORE)
    assert fb24.by_step("fw").compute_cycles == 4 * fb16.by_step("fw").compute_cycles


def test_training_step_wu_uses_wg_width():
    l = [layer("conv3", 24, 8, 8)]
    a = estimate_training_step(l, PrecisionConfig.uniform(4, wg=4))
    b = estimate_training_step(l, PrecisionConfig.uniform(4, wg=8))
    for s in ("fw", "bw"):
        assert a.by_step(s) == b.by_step(s)
    assert a.by_step("wu") != b.by_step("wu")
    assert {(r.step, r.x_width, r.w_width) for r in b.rows} == {("fw", 4, 4), ("bw", 4, 4), ("wu", 8, 8)}


def test_training_step_names_unplannable_layer():
    l = LayerSpec(LayerKind.CONV7, 4, 4, 8, 8, name="big")
    with pytest.raises(ValueError, match="big"):
        estimate_training_step([l], PrecisionConfig(), geometry=CoreGeometry(subcores_per_core=4))


def test_cost_model_deterministic():
    layers = [layer("conv5", 7, 9, 11), layer("dwconv3", 5, 5, 9)]
    a = estimate_training_step(layers, PrecisionConfig.uniform(8), batch=3)
    b = estimate_training_step(layers, PrecisionConfig.uniform(8), batch=3)
    assert a == b and [r.as_row() for r in a.rows] == [r.as_row() for r in b.rows]


def test_table_blocks_fill_allocated_slots():
    # block channels x C_out parallelism x (cluster slots) == per-core peak for every table entry
    g = CoreGeometry()
    for kind in ("conv1", "conv3", "conv5", "conv7"):
        for fmt in FORMATS:
            plan = plan_mapping(layer(kind, 64, 64, 9), fmt, g)
            kh, kw, c = block_shape_for(kind, fmt)
            assert c == plan.channels_per_cycle or kind == "conv1"
            volume = kh * kw * c * plan.outputs_per_cycle
            assert volume == plan.peak_macs_per_core * plan.spatial_utilization

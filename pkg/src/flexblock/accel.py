"""Analytic accelerator core model: mapping, MAC utilization, cycles and energy.

The core is a hierarchy of 4b x 4b multipliers: 9 per PE, 4 PEs per PU, 4 PUs
per subcore and 6 subcores per core.  A 16-bit input operand occupies all
four PEs of a PU (one 4-bit sub-word each); an 8-bit operand occupies two, so
two input channels share a PU.  Likewise a 16-bit weight spans four PUs and a
4-bit weight one, which sets the number of output channels per subcore.

Throughout, ``in_par`` is the number of input channels a PU carries
(``16 / x_width``) and ``out_par`` the number of output channels a subcore
carries (``16 / w_width``).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Optional

from .bfp import MantissaWidth, block_shape_for, Format
from .layers import LayerKind, LayerSpec, PrecisionConfig

__all__ = [
    "CoreGeometry",
    "CostModelConfig",
    "MappingPlan",
    "CycleEstimate",
    "EnergyEstimate",
    "StepEstimate",
    "TrainingStepEstimate",
    "peak_macs_per_cycle",
    "plan_mapping",
    "utilization",
    "mapping_passes",
    "step_widths",
    "accumulation_scale_factor",
    "estimate_cycles",
    "estimate_energy",
    "estimate_training_step",
    "tensor_bytes",
]


@dataclass(frozen=True)
class CoreGeometry:
    mults_per_pe: int = 9
    pes_per_pu: int = 4
    pus_per_subcore: int = 4
    subcores_per_core: int = 6
    cores: int = 64
    clock_hz: float = 333e6

    def __post_init__(self):
        counts = (self.mults_per_pe, self.pes_per_pu, self.pus_per_subcore, self.subcores_per_core, self.cores)
        if min(counts) < 1 or self.clock_hz <= 0:
            raise ValueError("geometry counts must be >= 1 and clock positive")

    @property
    def mults_per_core(self) -> int:
        return self.mults_per_pe * self.pes_per_pu * self.pus_per_subcore * self.subcores_per_core

    @property
    def mults_per_subcore(self) -> int:
        return self.mults_per_pe * self.pes_per_pu * self.pus_per_subcore


def _subwords(width) -> int:
    return int(MantissaWidth.coerce(width)) // 4


def _in_par(geometry: CoreGeometry, x_width) -> int:
    return max(1, geometry.pes_per_pu // _subwords(x_width))


def _out_par(geometry: CoreGeometry, w_width) -> int:
    return max(1, geometry.pus_per_subcore // _subwords(w_width))


def peak_macs_per_cycle(geometry: CoreGeometry, x_width, w_width=None, per_core: bool = False) -> int:
    """Peak MACs/cycle: 4b multipliers divided by the sub-word products per MAC."""
    if w_width is None:
        w_width = x_width
    mults = geometry.mults_per_core * (1 if per_core else geometry.cores)
    return mults // (_subwords(x_width) * _subwords(w_width))


def accumulation_scale_factor(style: str, x_halvings: int, w_halvings: int) -> int:
    """Growth in the number of psums accumulated per output after precision halvings.

    A fusion unit must finish all accumulations internally, so both operand
    reductions multiply; splitting the 2D sub-word parallelism across PUs lets
    the W reduction go to separate output channels, leaving only the larger of
    the two factors.
    """
    if x_halvings < 0 or w_halvings < 0:
        raise ValueError("halvings must be >= 0")
    if style == "fusion_unit":
        return 2 ** (x_halvings + w_halvings)
    if style == "pu_split":
        return 2 ** max(x_halvings, w_halvings)
    raise ValueError(f"unknown accumulation style {style!r}")


# ---------------------------------------------------------------------------
# mapping

@dataclass(frozen=True)
class MappingPlan:
    layer: LayerSpec
    step: str
    x_width: MantissaWidth
    w_width: MantissaWidth
    reduction_path: str
    cluster_size: int
    clusters: int
    dim_assignment: dict
    channels_per_cycle: int
    outputs_per_cycle: int
    spatial_utilization: Fraction
    peak_macs_per_core: int
    macs_per_cycle_per_core: Fraction
    slots: int = 9

    def as_dict(self) -> dict:
        return {
            "layer": self.layer.name or self.layer.kind.value,
            "step": self.step,
            "x_width": int(self.x_width),
            "w_width": int(self.w_width),
            "reduction_path": self.reduction_path,
            "cluster_size": self.cluster_size,
            "clusters": self.clusters,
            "dim_assignment": dict(self.dim_assignment),
            "channels_per_cycle": self.channels_per_cycle,
            "outputs_per_cycle": self.outputs_per_cycle,
            "spatial_utilization": float(self.spatial_utilization),
            "macs_per_cycle_per_core": float(self.macs_per_cycle_per_core),
        }


_STEPS = ("fw", "bw", "wu")


def _cluster_size(kernel: int, geometry: CoreGeometry) -> int:
    if kernel == 1:
        return 1
    slots = geometry.mults_per_pe
    size = math.ceil(kernel * kernel / slots)
    if size > geometry.subcores_per_core:
        raise ValueError(f"kernel {kernel}x{kernel} does not fit in one core")
    # round up to a divisor of the subcore count so clusters tile the core
    while geometry.subcores_per_core % size:
        size += 1
    return size


def plan_mapping(layer: LayerSpec, fmt, geometry: Optional[CoreGeometry] = None, step: str = "fw") -> MappingPlan:
    """Map one training step of ``layer`` onto a core.

    ``fmt`` is a :class:`Format`, a width, or an ``(x_width, w_width)`` pair
    giving the two multiplier operand widths (X and W for FW, G and W for BW,
    X and G at the WG width for WU).
    """
    geometry = geometry or CoreGeometry()
    if step not in _STEPS:
        raise ValueError(f"unknown step {step!r}")
    if isinstance(fmt, tuple):
        xw, ww = (MantissaWidth.coerce(v) for v in fmt)
    else:
        xw = ww = MantissaWidth.coerce(Format.coerce(fmt).width if isinstance(fmt, (str, Format)) else fmt)
    kind = LayerKind.coerce(layer.kind)
    k = kind.kernel
    in_par, out_par = _in_par(geometry, xw), _out_par(geometry, ww)
    peak = peak_macs_per_cycle(geometry, xw, ww, per_core=True)
    slots = geometry.mults_per_pe
    n_sub = geometry.subcores_per_core

    if step == "wu":
        # pairwise correlations on the 2D reduction path; multipliers carry
        # groups of reduction positions (batch x output pixels)
        cluster, clusters = 1, n_sub
        spatial = Fraction(1)
        if kind.depthwise:
            pairs = min(in_par, out_par)
            dims = {"subcore": "C (2D mode)", "pu": "C (diagonal pairs)", "pe": "C", "multiplier": "W/H"}
            channels, outputs = pairs * clusters, pairs * clusters
            useful = Fraction(slots * pairs * clusters)
        else:
            dims = {"subcore": "C_out (2D mode)", "pu": "C_out", "pe": "C_in", "multiplier": "W/H"}
            channels, outputs = in_par, out_par * clusters
            useful = Fraction(slots * in_par * out_par * clusters)
        return MappingPlan(layer, step, xw, ww, "2D", cluster, clusters, dims, channels, outputs,
                           spatial, peak, useful, slots)

    cluster = _cluster_size(k, geometry)
    clusters = n_sub // cluster
    spatial = Fraction(k * k, slots * cluster) if k > 1 else Fraction(1)
    if kind.depthwise:
        pairs = min(in_par, out_par)
        dims = {"subcore": "C (2D mode)", "pu": "C (diagonal pairs)", "pe": "C", "multiplier": "W/H"}
        channels = outputs = pairs * clusters
        useful = Fraction(k * k * pairs * clusters)
        return MappingPlan(layer, step, xw, ww, "2D", cluster, clusters, dims, channels, outputs,
                           spatial, peak, useful, slots)
    if k == 1:
        dims = {"subcore": "C_in", "pu": "C_out", "pe": "C_in", "multiplier": "C_in"}
        channels = slots * in_par * n_sub
    else:
        dims = {"subcore": "C_in" if k == 3 else "W/H", "pu": "C_out", "pe": "C_in", "multiplier": "W/H"}
        channels = in_par * clusters
    outputs = out_par
    useful = Fraction(k * k * channels * outputs)
    return MappingPlan(layer, step, xw, ww, "3D", cluster, clusters, dims, channels, outputs,
                       spatial, peak, useful, slots)


def _work(plan: MappingPlan, batch: int) -> tuple[int, int, dict]:
    """Return ``(cycles_on_one_core, useful_macs, passes)``."""
    layer = plan.layer
    k = layer.kernel
    ho, wo = layer.out_hw
    c_in, c_out = layer.c_in, layer.c_out
    if plan.step == "wu":
        red = batch * ho * wo
        red_groups = math.ceil(red / plan.slots)
        if layer.kind.depthwise:
            ch = math.ceil(c_out / plan.channels_per_cycle)
            passes = {"c": ch, "offsets": k * k, "reduction": red_groups}
            cycles = ch * k * k * red_groups
        else:
            ci = math.ceil(c_in / plan.channels_per_cycle)
            co = math.ceil(c_out / plan.outputs_per_cycle)
            passes = {"c_in": ci, "c_out": co, "offsets": k * k, "reduction": red_groups}
            cycles = ci * co * k * k * red_groups
        return cycles, layer.macs_per_sample * batch, passes
    if plan.step == "bw":
        # transposed kernels: gradient channels play the input role, output is the input grid
        c_in, c_out = c_out, c_in
        positions = layer.h * layer.w
    else:
        positions = ho * wo
    if layer.kind.depthwise:
        ch = math.ceil(c_out / plan.channels_per_cycle)
        passes = {"c": ch, "positions": positions, "batch": batch}
        cycles = ch * positions * batch
    else:
        ci = math.ceil(c_in / plan.channels_per_cycle)
        co = math.ceil(c_out / plan.outputs_per_cycle)
        passes = {"c_in": ci, "c_out": co, "positions": positions, "batch": batch}
        cycles = ci * co * positions * batch
    return cycles, layer.macs_per_sample * batch, passes


def mapping_passes(plan: MappingPlan, batch: int = 1) -> dict:
    """Loop trip counts of the plan (channel groups, offsets, positions, ...)."""
    return _work(plan, batch)[2]


def utilization(plan: MappingPlan, batch: int = 1) -> Fraction:
    """Useful MACs over peak MACs for the cycles the plan occupies on one core."""
    cycles, useful, _ = _work(plan, batch)
    if cycles == 0:
        return Fraction(0)
    return Fraction(useful, cycles * plan.peak_macs_per_core)


# ---------------------------------------------------------------------------
# timing

@dataclass(frozen=True)
class CostModelConfig:
    input_buffer: int = 512 * 1024
    weight_buffer: int = 512 * 1024
    output_buffer: int = 256 * 1024
    dram_bandwidth: float = 25.6e9
    dram_latency: int = 100
    power_watts: dict = field(default_factory=lambda: {"FB12": 8.27, "FB16": 7.80, "FB24": 7.36})
    dram_energy_per_byte: float = 0.0
    double_buffering: bool = True

    def __post_init__(self):
        if min(self.input_buffer, self.weight_buffer, self.output_buffer) <= 0:
            raise ValueError("buffer sizes must be positive")
        if self.dram_bandwidth <= 0 or self.dram_latency < 0 or self.dram_energy_per_byte < 0:
            raise ValueError("DRAM parameters must be positive")
        for mode in ("FB12", "FB16", "FB24"):
            if self.power_watts.get(mode, 0) <= 0:
                raise ValueError(f"power for {mode} must be positive")

    def mode_power(self, x_width, w_width) -> float:
        widest = max(int(MantissaWidth.coerce(x_width)), int(MantissaWidth.coerce(w_width)))
        return float(self.power_watts[Format(widest).name])

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class CycleEstimate:
    compute_cycles: int = 0
    memory_stall_cycles: int = 0
    useful_macs: int = 0
    peak_macs_per_cycle: int = 0
    dram_bytes: int = 0

    @property
    def total_cycles(self) -> int:
        return self.compute_cycles + self.memory_stall_cycles

    @property
    def utilization(self) -> float:
        if self.compute_cycles == 0:
            return 0.0
        return self.useful_macs / (self.compute_cycles * self.peak_macs_per_cycle)

    def __add__(self, other: "CycleEstimate") -> "CycleEstimate":
        # peak is not additive; keep the cycle-weighted effective peak
        cc = self.compute_cycles + other.compute_cycles
        cap = self.compute_cycles * self.peak_macs_per_cycle + other.compute_cycles * other.peak_macs_per_cycle
        return CycleEstimate(
            cc,
            self.memory_stall_cycles + other.memory_stall_cycles,
            self.useful_macs + other.useful_macs,
            cap // cc if cc else 0,
            self.dram_bytes + other.dram_bytes,
        )


@dataclass(frozen=True)
class EnergyEstimate:
    joules: float = 0.0

    def __add__(self, other: "EnergyEstimate") -> "EnergyEstimate":
        return EnergyEstimate(self.joules + other.joules)


def tensor_bytes(elements: int, width, block_len: int) -> int:
    """DRAM footprint of a BFP tensor: packed mantissas plus one exponent byte per block."""
    if elements == 0:
        return 0
    bits = elements * int(MantissaWidth.coerce(width))
    return math.ceil(bits / 8) + math.ceil(elements / block_len)


def _block_len(layer: LayerSpec, width) -> int:
    kh, kw, c = block_shape_for(layer.kind, Format(int(MantissaWidth.coerce(width))))
    return kh * kw * c


def _operand_bytes(plan: MappingPlan, batch: int) -> tuple[int, int, int]:
    layer = plan.layer
    ho, wo = layer.out_hw
    x_elems = batch * layer.c_in * layer.h * layer.w
    y_elems = batch * layer.c_out * ho * wo
    w_elems = math.prod(layer.weight_shape)
    if plan.step == "fw":
        ins = tensor_bytes(x_elems, plan.x_width, _block_len(layer, plan.x_width))
        wts = tensor_bytes(w_elems, plan.w_width, _block_len(layer, plan.w_width))
        outs = 4 * y_elems
    elif plan.step == "bw":
        ins = tensor_bytes(y_elems, plan.x_width, _block_len(layer, plan.x_width))
        wts = tensor_bytes(w_elems, plan.w_width, _block_len(layer, plan.w_width))
        outs = 4 * x_elems
    else:
        ins = tensor_bytes(x_elems, plan.x_width, _block_len(layer, plan.x_width))
        wts = tensor_bytes(y_elems, plan.w_width, _block_len(layer, plan.w_width))
        outs = 4 * w_elems
    return ins, wts, outs


def estimate_cycles(plan: MappingPlan, layer: Optional[LayerSpec] = None, batch: int = 1,
                    cost: Optional[CostModelConfig] = None,
                    geometry: Optional[CoreGeometry] = None) -> CycleEstimate:
    """Compute cycles across all cores plus DRAM stalls from a tiled transfer model.

    Work units (one core-cycle each) are spread evenly over the cores.  The
    operands are split into as many tiles as the largest buffer overflow
    demands; with double buffering a tile's transfer overlaps the previous
    tile's compute and only the excess stalls, otherwise every transfer stalls.
    """
    if layer is not None and layer != plan.layer:
        plan = plan_mapping(layer, (plan.x_width, plan.w_width), geometry, plan.step)
    if batch < 1:
        raise ValueError("batch must be >= 1")
    geometry = geometry or CoreGeometry()
    cost = cost or CostModelConfig()
    work, useful, _ = _work(plan, batch)
    if work == 0 or useful == 0:
        return CycleEstimate(0, 0, 0, plan.peak_macs_per_core * geometry.cores, 0)
    compute = math.ceil(work / geometry.cores)
    ins, wts, outs = _operand_bytes(plan, batch)
    share = 2 if cost.double_buffering else 1
    tiles = max(
        math.ceil(ins / (cost.input_buffer / share)),
        math.ceil(wts / (cost.weight_buffer / share)),
        math.ceil(outs / (cost.output_buffer / share)),
        1,
    )
    total_bytes = ins + wts + outs
    bytes_per_cycle = cost.dram_bandwidth / geometry.clock_hz
    transfer = cost.dram_latency + (total_bytes / tiles) / bytes_per_cycle
    compute_per_tile = compute / tiles
    if cost.double_buffering:
        # first tile's load cannot be hidden
        stall = transfer + (tiles - 1) * max(0.0, transfer - compute_per_tile)
    else:
        stall = tiles * transfer
    return CycleEstimate(
        compute,
        math.ceil(stall),
        useful,
        plan.peak_macs_per_core * geometry.cores,
        total_bytes,
    )


def estimate_energy(cycles: CycleEstimate, x_width, w_width, cost: Optional[CostModelConfig] = None,
                    geometry: Optional[CoreGeometry] = None) -> EnergyEstimate:
    geometry = geometry or CoreGeometry()
    cost = cost or CostModelConfig()
    core = cycles.total_cycles / geometry.clock_hz * cost.mode_power(x_width, w_width)
    return EnergyEstimate(core + cycles.dram_bytes * cost.dram_energy_per_byte)


@dataclass(frozen=True)
class StepEstimate:
    layer: str
    step: str
    x_width: int
    w_width: int
    cycles: CycleEstimate
    energy: EnergyEstimate
    mapping_utilization: Fraction = Fraction(0)

    def as_row(self) -> dict:
        return {
            "layer": self.layer,
            "step": self.step,
            "x_width": self.x_width,
            "w_width": self.w_width,
            "compute_cycles": self.cycles.compute_cycles,
            "stall_cycles": self.cycles.memory_stall_cycles,
            "cycles": self.cycles.total_cycles,
            "utilization": round(self.cycles.utilization, 6),
            "mapping_utilization": str(self.mapping_utilization),
            "joules": self.energy.joules,
        }


@dataclass(frozen=True)
class TrainingStepEstimate:
    rows: tuple[StepEstimate, ...]

    @property
    def cycles(self) -> CycleEstimate:
        total = CycleEstimate()
        for r in self.rows:
            total = total + r.cycles
        return total

    @property
    def energy(self) -> EnergyEstimate:
        return EnergyEstimate(sum(r.energy.joules for r in self.rows))

    def by_step(self, step: str) -> CycleEstimate:
        total = CycleEstimate()
        for r in self.rows:
            if r.step == step:
                total = total + r.cycles
        return total


def step_widths(step: str, precision: PrecisionConfig) -> tuple[MantissaWidth, MantissaWidth]:
    if step == "fw":
        return precision.x_width, precision.w_width
    if step == "bw":
        return precision.g_width, precision.w_width
    return precision.wg_width, precision.wg_width


def estimate_training_step(layers, precision, batch: int = 1, cost: Optional[CostModelConfig] = None,
                           geometry: Optional[CoreGeometry] = None,
                           steps: tuple[str, ...] = _STEPS) -> TrainingStepEstimate:
    """FW + BW + WU estimate for every layer of a network.

    ``precision`` is one :class:`PrecisionConfig` or a sequence aligned with
    ``layers``.  The first layer's BW step is kept: it is cheap to drop by
    passing ``steps`` but the hardware computes it unless told otherwise.
    """
    layers = list(getattr(layers, "layers", layers))
    if isinstance(precision, PrecisionConfig):
        precision = [precision] * len(layers)
    precision = list(precision)
    if len(precision) != len(layers):
        raise ValueError("need one precision config per layer")
    geometry = geometry or CoreGeometry()
    cost = cost or CostModelConfig()
    rows = []
    for i, (layer, prec) in enumerate(zip(layers, precision)):
        name = layer.name or f"layer{i}"
        for step in steps:
            xw, ww = step_widths(step, prec)
            try:
                plan = plan_mapping(layer, (xw, ww), geometry, step)
            except ValueError as exc:
                raise ValueError(f"cannot map layer {name!r}: {exc}") from exc
            cyc = estimate_cycles(plan, batch=batch, cost=cost, geometry=geometry)
            rows.append(StepEstimate(name, step, int(xw), int(ww), cyc,
                                     estimate_energy(cyc, xw, ww, cost, geometry),
                                     utilization(plan, batch)))
    return TrainingStepEstimate(tuple(rows))

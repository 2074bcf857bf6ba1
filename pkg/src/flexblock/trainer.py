"""Pseudo-BFP training loop with static or ZSE-driven per-tensor precision.

Master weights stay in float64.  Each step quantizes views of the operands
at the widths of the layer's :class:`~flexblock.layers.PrecisionConfig`:

* FW: activations ``x`` and weights ``w``
* BW: incoming local gradients ``g`` (reusing the FW weight view)
* WU: activations and local gradients re-blocked at ``wg``
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import layers as L
from .accel import CoreGeometry, CostModelConfig, estimate_training_step
from .bfp import Format, MantissaWidth, ZseStats, fake_quantize
from .datasets import Dataset
from .layers import ActivationSpec, LayerKind, LayerSpec, PoolSpec, PrecisionConfig

log = logging.getLogger(__name__)

__all__ = [
    "ROLES",
    "NetworkSpec",
    "ControllerConfig",
    "HysteresisState",
    "TrainConfig",
    "EpochMetrics",
    "TrainingDiverged",
    "Model",
    "controller_step",
    "default_network",
    "init_model",
    "train",
    "train_step",
    "evaluate",
    "predict_logits",
]

ROLES = ("x", "w", "g", "wg")
_WIDTHS = (4, 8, 16)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int]
    n_classes: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            if not _composes(shape, layer):
                raise ValueError(f"layer {i} ({layer.name or layer.kind.value}) expects "
                                 f"({layer.c_in}, {layer.h}, {layer.w}), got {shape}")
            ho, wo = layer.pool.output_hw(*layer.out_hw)
            shape = (layer.c_out, ho, wo)
        if self.layers and math.prod(shape) != self.n_classes:
            raise ValueError(f"network output {shape} does not match {self.n_classes} classes")


def _composes(shape, layer: LayerSpec) -> bool:
    if tuple(shape) == (layer.c_in, layer.h, layer.w):
        return True
    # flatten into a fully-connected layer
    return layer.kind is LayerKind.CONV1_FC and layer.h == layer.w == 1 and math.prod(shape) == layer.c_in


def default_network(n_classes: int = 10, width: int = 8) -> NetworkSpec:
    relu = ActivationSpec("relu")
    pool = PoolSpec("max", 2)
    return NetworkSpec(
        (
            LayerSpec(LayerKind.CONV3, 1, width, 16, 16, padding=1, activation=relu, pool=pool,
                      batch_norm=True, name="conv1"),
            LayerSpec(LayerKind.CONV3, width, 2 * width, 8, 8, padding=1, activation=relu, pool=pool,
                      batch_norm=True, name="conv2"),
            LayerSpec(LayerKind.CONV1_FC, 2 * width * 16, n_classes, name="fc"),
        ),
        (1, 16, 16),
        n_classes,
    )


# ---------------------------------------------------------------------------
# dynamic precision

def controller_step(zse_ratio: float, current_width, t_hi: float = 0.05, t_lo: float = 0.01,
                    min_width: int = 4, max_width: int = 16) -> int:
    """Next-epoch width: one step wider above ``t_hi``, one narrower below ``t_lo``."""
    if not 0.0 <= zse_ratio <= 1.0:
        raise ValueError(f"ZSE ratio {zse_ratio} outside [0, 1]")
    if not t_lo < t_hi:
        raise ValueError("need t_lo < t_hi")
    width = int(MantissaWidth.coerce(current_width))
    i = _WIDTHS.index(width)
    if zse_ratio > t_hi and width < max_width:
        return _WIDTHS[i + 1]
    if zse_ratio < t_lo and width > min_width:
        return _WIDTHS[i - 1]
    return width


@dataclass(frozen=True)
class ControllerConfig:
    enabled: bool = False
    t_hi: float = 0.05
    t_lo: float = 0.01
    roles: tuple[str, ...] = ("wg",)
    min_width: int = 4
    max_width: int = 16

    def __post_init__(self):
        object.__setattr__(self, "roles", tuple(self.roles))
        if not 0 <= self.t_lo < self.t_hi <= 1:
            raise ValueError("controller thresholds need 0 <= t_lo < t_hi <= 1")
        if any(r not in ROLES for r in self.roles):
            raise ValueError(f"controller roles must be drawn from {ROLES}")
        if self.min_width not in _WIDTHS or self.max_width not in _WIDTHS or self.min_width > self.max_width:
            raise ValueError("controller width bounds must be 4, 8 or 16 with min <= max")


@dataclass
class HysteresisState:
    """Per-(layer, role) widths plus the ZSE counts gathered this epoch."""

    config: ControllerConfig
    widths: dict
    zse: dict = field(default_factory=dict)

    @classmethod
    def from_precision(cls, config: ControllerConfig, precision: Sequence[PrecisionConfig]) -> "HysteresisState":
        widths = {(i, r): int(getattr(p, f"{r}_width")) for i, p in enumerate(precision) for r in ROLES}
        return cls(config, widths)

    def record(self, layer: int, role: str, stats: ZseStats):
        key = (layer, role)
        self.zse[key] = self.zse.get(key, ZseStats()) + stats

    def ratio(self, layer: int, role: str) -> float:
        return self.zse.get((layer, role), ZseStats()).ratio

    def end_epoch(self) -> dict:
        """Apply one controller step per adapted (layer, role) and clear the counts."""
        cfg = self.config
        if cfg.enabled:
            for (layer, role), width in list(self.widths.items()):
                if role in cfg.roles:
                    self.widths[(layer, role)] = controller_step(
                        self.ratio(layer, role), width, cfg.t_hi, cfg.t_lo, cfg.min_width, cfg.max_width)
        self.zse = {}
        return dict(self.widths)

    def precision(self, n_layers: int) -> list[PrecisionConfig]:
        return [PrecisionConfig(*(self.widths[(i, r)] for r in ROLES)) for i in range(n_layers)]


# ---------------------------------------------------------------------------
# model state and one training step

@dataclass
class Model:
    network: NetworkSpec
    weights: list
    bn: list

    def copy(self) -> "Model":
        bn = [None if s is None else replace(s, gamma=s.gamma.copy(), beta=s.beta.copy(),
                                             running_mean=s.running_mean.copy(),
                                             running_scale=s.running_scale.copy()) for s in self.bn]
        return Model(self.network, [w.copy() for w in self.weights], bn)


def init_model(network: NetworkSpec, rng: np.random.Generator, bn_mode: str = "range") -> Model:
    weights, bn = [], []
    for layer in network.layers:
        shape = layer.weight_shape
        fan_in = math.prod(shape[1:])
        bound = math.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=shape))
        bn.append(L.BatchNormState.init(layer.c_out, bn_mode) if layer.batch_norm else None)
    return Model(network, weights, bn)


@dataclass(frozen=True)
class TrainConfig:
    eta: float = 0.05
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    precision: object = field(default_factory=PrecisionConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    quantize: bool = True
    bn_mode: str = "range"
    lr_milestones: tuple[int, ...] = ()
    lr_gamma: float = 0.1
    block_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "lr_milestones", tuple(self.lr_milestones))
        if not self.eta >= 0:
            raise ValueError("eta must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    def eta_at(self, epoch: int) -> float:
        """Step decay: multiply by ``lr_gamma`` at each milestone reached."""
        return self.eta * self.lr_gamma ** sum(epoch >= m for m in self.lr_milestones)

    def layer_precision(self, n_layers: int) -> list[PrecisionConfig]:
        p = self.precision
        if isinstance(p, PrecisionConfig):
            return [p] * n_layers
        p = list(p)
        if len(p) != n_layers:
            raise ValueError(f"precision list has {len(p)} entries for {n_layers} layers")
        return p


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    loss: float
    accuracy: float
    zse: dict
    widths: dict
    cycles: int
    joules: float

    def as_row(self, network: NetworkSpec) -> dict:
        row = {"epoch": self.epoch, "loss": f"{self.loss:.10g}", "accuracy": f"{self.accuracy:.6f}"}
        for i, layer in enumerate(network.layers):
            name = layer.name or f"layer{i}"
            for r in ROLES:
                row[f"{name}.{r}_width"] = self.widths[(i, r)]
            for r in ROLES:
                row[f"{name}.{r}_zse"] = f"{self.zse.get((i, r), 0.0):.6f}"
        row["cycles"] = self.cycles
        row["joules"] = f"{self.joules:.10g}"
        return row


class _Quantizer:
    """Applies (or bypasses) BFP views and forwards ZSE counts to a recorder."""

    def __init__(self, enabled: bool, record=None, overrides=None):
        self.enabled = enabled
        self.record = record
        self.overrides = overrides or {}

    def __call__(self, arr, layer_idx, spec, role, width, layout="activation"):
        if not self.enabled:
            return arr
        fmt = Format.coerce(width)
        shape = self.overrides.get((spec.kind.value, fmt.name))
        values, zse = fake_quantize(arr, spec.kind, fmt, layout, block_shape=shape)
        if self.record is not None:
            self.record(layer_idx, role, zse)
        return values


def _forward(model: Model, x: np.ndarray, precision, quant: _Quantizer, training: bool):
    caches = []
    h = x
    for i, (layer, w) in enumerate(zip(model.network.layers, model.weights)):
        prec = precision[i]
        if h.shape[1:] != (layer.c_in, layer.h, layer.w):
            h = h.reshape(h.shape[0], layer.c_in, 1, 1)
        xq = quant(h, i, layer, "x", prec.x_width)
        wq = quant(w, i, layer, "w", prec.w_width, "weight")
        z = L.conv_forward(xq, wq, layer)
        bn_cache = None
        if model.bn[i] is not None:
            z_in = z
            z, bn_cache = L.range_batch_norm_fwd(z, model.bn[i], training)
        else:
            z_in = z
        a = L.activation_fwd(z, layer.activation)
        out, pool_cache = L.pool_fwd(a, layer.pool)
        caches.append((h, wq, z_in, z, bn_cache, pool_cache))
        h = out
    return h.reshape(h.shape[0], -1), caches


def _softmax_xent(logits: np.ndarray, y: np.ndarray):
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), y].mean()
    grad = np.exp(logp)
    grad[np.arange(n), y] -= 1.0
    return loss, grad / n


def _train_batch(model: Model, x, y, precision, quant: _Quantizer, eta: float) -> float:
    logits, caches = _forward(model, x, precision, quant, training=True)
    loss, g = _softmax_xent(logits, y)
    if not np.isfinite(loss):
        raise TrainingDiverged(f"loss became {loss}")
    layers = model.network.layers
    for i in reversed(range(len(layers))):
        layer, prec = layers[i], precision[i]
        h, wq, z_in, z, bn_cache, pool_cache = caches[i]
        ho, wo = layer.out_hw
        g = g.reshape(g.shape[0], layer.c_out, *layer.pool.output_hw(ho, wo))
        g = L.pool_bwd(g, pool_cache, layer.pool)
        g = L.activation_bwd(z, g, layer.activation)
        if bn_cache is not None:
            g, g_gamma, g_beta = L.range_batch_norm_bwd(g, bn_cache)
            st = model.bn[i]
            st.gamma = L.weight_update(st.gamma, g_gamma, eta)
            st.beta = L.weight_update(st.beta, g_beta, eta)
        x_wg = quant(h, i, layer, "wg", prec.wg_width)
        g_wg = quant(g, i, layer, "wg", prec.wg_width)
        dw = L.conv_backward_weight(x_wg, g_wg, layer)
        if i > 0:
            gq = quant(g, i, layer, "g", prec.g_width)
            g = L.conv_backward_input(gq, wq, layer)
        model.weights[i] = L.weight_update(model.weights[i], dw, eta)
    return float(loss)


def train_step(model: Model, x, y, precision=None, eta: float = 0.05, quantize: bool = True,
               block_overrides=None) -> float:
    """One SGD step on a mini-batch, updating ``model`` in place; returns the loss."""
    precision = _as_layer_precision(precision, len(model.network.layers))
    quant = _Quantizer(quantize, overrides=block_overrides)
    with np.errstate(over="raise", invalid="raise"):
        return _train_batch(model, np.asarray(x, dtype=np.float64), np.asarray(y), precision, quant, eta)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        if len(idx) >= 2:  # batch norm needs two samples
            yield idx


def evaluate(model: Model, x: np.ndarray, y: np.ndarray, precision=None, quantize: bool = True,
             batch_size: int = 256, block_overrides=None) -> float:
    """Top-1 accuracy with the forward pass quantized at ``precision``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("evaluation split is empty")
    precision = _as_layer_precision(precision, len(model.network.layers))
    quant = _Quantizer(quantize, overrides=block_overrides)
    correct = 0
    for start in range(0, len(y), batch_size):
        logits, _ = _forward(model, x[start : start + batch_size], precision, quant, training=False)
        correct += int(np.count_nonzero(np.argmax(logits, axis=1) == y[start : start + batch_size]))
    return correct / len(y)


def predict_logits(model: Model, x, precision=None, quantize: bool = True, batch_size: int = 256,
                   block_overrides=None):
    precision = _as_layer_precision(precision, len(model.network.layers))
    quant = _Quantizer(quantize, overrides=block_overrides)
    out = [_forward(model, x[s : s + batch_size], precision, quant, training=False)[0]
           for s in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.network.n_classes))


def _as_layer_precision(precision, n: int) -> list[PrecisionConfig]:
    if precision is None:
        return [PrecisionConfig()] * n
    if isinstance(precision, PrecisionConfig):
        return [precision] * n
    return list(precision)


def train(network: NetworkSpec, dataset: Dataset, config: TrainConfig,
          cost: Optional[CostModelConfig] = None, geometry: Optional[CoreGeometry] = None,
          model: Optional[Model] = None, zse_hook=None):
    """Train ``network`` and return ``(metrics, model)``.

    ``zse_hook(epoch, state)`` may overwrite the ZSE counts in ``state``
    before the controller runs; integration tests use it to script traces.
    """
    if tuple(dataset.input_shape) != tuple(network.input_shape):
        raise ValueError(f"dataset input {dataset.input_shape} does not match network {network.input_shape}")
    rng = np.random.default_rng(config.seed)
    model = model if model is not None else init_model(network, rng, config.bn_mode)
    state = HysteresisState.from_precision(config.controller, config.layer_precision(len(network.layers)))
    cost = cost or CostModelConfig()
    geometry = geometry or CoreGeometry()
    n_batches = sum(1 for _ in _batches(len(dataset.y_train), config.batch_size, np.random.default_rng(0)))
    history = []
    estimates = {}
    for epoch in range(config.epochs):
        precision = state.precision(len(network.layers))
        quant = _Quantizer(config.quantize, state.record, config.block_overrides)
        losses = []
        eta = config.eta_at(epoch)
        with np.errstate(over="raise", invalid="raise"):
            try:
                for idx in _batches(len(dataset.y_train), config.batch_size, rng):
                    losses.append(_train_batch(model, dataset.x_train[idx], dataset.y_train[idx],
                                               precision, quant, eta))
            except (FloatingPointError, OverflowError) as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}") from exc
        acc = evaluate(model, dataset.x_test, dataset.y_test, precision, config.quantize,
                       block_overrides=config.block_overrides)
        if zse_hook is not None:
            zse_hook(epoch, state)
        zse = {k: v.ratio for k, v in state.zse.items()}
        key = tuple(precision)
        if key not in estimates:
            est = estimate_training_step(network, precision, config.batch_size, cost, geometry)
            estimates[key] = (est.cycles.total_cycles, est.energy.joules)
        cyc, joules = estimates[key]
        widths = dict(state.widths)
        metrics = EpochMetrics(epoch, float(np.mean(losses)), acc, zse, widths,
                               cyc * n_batches, joules * n_batches)
        log.info("epoch %d loss %.4f acc %.4f", epoch, metrics.loss, acc)
        history.append(metrics)
        state.end_epoch()
    return history, model

"""Run configuration files (JSON) and named precision presets."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import jsonschema

from .accel import CoreGeometry, CostModelConfig
from .layers import ActivationSpec, LayerKind, LayerSpec, PoolSpec, PrecisionConfig
from .trainer import ControllerConfig, NetworkSpec, TrainConfig, default_network

SCHEMA_VERSION = 1

__all__ = ["SCHEMA_VERSION", "CONFIG_SCHEMA", "PRESETS", "ConfigError", "RunConfig", "apply_preset"]


class ConfigError(ValueError):
    pass


_WIDTH = {"enum": [4, 8, 16]}
_PRECISION = {
    "type": "object",
    "additionalProperties": False,
    "properties": {"x": _WIDTH, "w": _WIDTH, "g": _WIDTH, "wg": _WIDTH},
}
_POS_INT = {"type": "integer", "minimum": 1}
_TRIPLE = {"type": "array", "items": _POS_INT, "minItems": 3, "maxItems": 3}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "network": {
            "type": "object",
            "additionalProperties": False,
            "required": ["layers"],
            "properties": {
                "input_shape": _TRIPLE,
                "n_classes": _POS_INT,
                "layers": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["kind", "c_in", "c_out"],
                        "properties": {
                            "name": {"type": "string"},
                            "kind": {"enum": [k.value for k in LayerKind]},
                            "c_in": _POS_INT,
                            "c_out": _POS_INT,
                            "h": _POS_INT,
                            "w": _POS_INT,
                            "stride": _POS_INT,
                            "padding": {"type": "integer", "minimum": 0},
                            "activation": {
                                "oneOf": [
                                    {"type": "null"},
                                    {
                                        "type": "object",
                                        "additionalProperties": False,
                                        "required": ["kind"],
                                        "properties": {
                                            "kind": {"enum": ["relu", "relu_alpha"]},
                                            "alpha": {"type": "number", "exclusiveMinimum": 0},
                                        },
                                    },
                                ]
                            },
                            "pool": {
                                "type": "object",
                                "additionalProperties": False,
                                "required": ["kind"],
                                "properties": {
                                    "kind": {"enum": ["none", "max", "avg"]},
                                    "window": _POS_INT,
                                    "stride": _POS_INT,
                                },
                            },
                            "batch_norm": {"type": "boolean"},
                            "precision": _PRECISION,
                        },
                    },
                },
            },
        },
        "precision": _PRECISION,
        "block_sizes": {
            "type": "object",
            "additionalProperties": False,
            "patternProperties": {
                "^(conv1x1_or_fc|conv3|conv5|conv7|dwconv3|dwconv5|dwconv7)$": {
                    "type": "object",
                    "additionalProperties": False,
                    "patternProperties": {"^(FB12|FB16|FB24)$": _TRIPLE},
                }
            },
        },
        "controller": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "enabled": {"type": "boolean"},
                "t_hi": {"type": "number", "minimum": 0, "maximum": 1},
                "t_lo": {"type": "number", "minimum": 0, "maximum": 1},
                "roles": {"type": "array", "items": {"enum": ["x", "w", "g", "wg"]}, "uniqueItems": True},
                "min_width": _WIDTH,
                "max_width": _WIDTH,
            },
        },
        "cost_model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "geometry": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "mults_per_pe": _POS_INT,
                        "pes_per_pu": _POS_INT,
                        "pus_per_subcore": _POS_INT,
                        "subcores_per_core": _POS_INT,
                        "cores": _POS_INT,
                        "clock_hz": {"type": "number", "exclusiveMinimum": 0},
                    },
                },
                "input_buffer": _POS_INT,
                "weight_buffer": _POS_INT,
                "output_buffer": _POS_INT,
                "dram_bandwidth": {"type": "number", "exclusiveMinimum": 0},
                "dram_latency": {"type": "integer", "minimum": 0},
                "power_watts": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {m: {"type": "number", "exclusiveMinimum": 0} for m in ("FB12", "FB16", "FB24")},
                },
                "dram_energy_per_byte": {"type": "number", "minimum": 0},
                "double_buffering": {"type": "boolean"},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "eta": {"type": "number", "minimum": 0},
                "epochs": _POS_INT,
                "batch_size": {"type": "integer", "minimum": 2},
                "seed": {"type": "integer", "minimum": 0},
                "quantize": {"type": "boolean"},
                "bn_mode": {"enum": ["range", "standard"]},
                "lr_milestones": {"type": "array", "items": _POS_INT},
                "lr_gamma": {"type": "number", "exclusiveMinimum": 0},
                "dataset": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["name"],
                    "properties": {
                        "name": {"enum": ["synthetic", "mnist16"]},
                        "root": {"type": "string"},
                        "n_train": _POS_INT,
                        "n_test": _POS_INT,
                        "noise": {"type": "number", "minimum": 0},
                        "seed": {"type": "integer", "minimum": 0},
                    },
                },
            },
        },
    },
}

# Precision presets: defaults block plus optional controller/quantize overrides.
PRESETS = {
    "float": {"precision": {"x": 16, "w": 16, "g": 16, "wg": 16}, "quantize": False},
    "fb24": {"precision": {"x": 16, "w": 16, "g": 16, "wg": 16}},
    "fb16": {"precision": {"x": 8, "w": 8, "g": 8, "wg": 8}},
    "fb12": {"precision": {"x": 4, "w": 4, "g": 4, "wg": 4}},
    "fb12-wg16": {"precision": {"x": 4, "w": 4, "g": 4, "wg": 8}},
    "fb12-wg24": {"precision": {"x": 4, "w": 4, "g": 4, "wg": 16}},
    "dynamic-wg": {
        "precision": {"x": 4, "w": 4, "g": 4, "wg": 4},
        "controller": {"enabled": True, "roles": ["wg"], "min_width": 4, "max_width": 8},
    },
}


def _path(error: jsonschema.ValidationError) -> str:
    out = "$"
    for part in error.absolute_path:
        out += f"[{part}]" if isinstance(part, int) else f".{part}"
    return out


def validate(data: dict) -> None:
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(data), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        raise ConfigError("; ".join(f"{_path(e)}: {e.message}" for e in errors))


def apply_preset(data: dict, name: str) -> dict:
    """Return a copy of ``data`` with preset ``name`` applied (per-layer precision dropped)."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    preset = PRESETS[name]
    out = copy.deepcopy(data)
    out["precision"] = dict(preset["precision"])
    for layer in out.get("network", {}).get("layers", []):
        layer.pop("precision", None)
    ctrl = dict(out.get("controller", {}))
    ctrl.update(preset.get("controller", {"enabled": False}))
    out["controller"] = ctrl
    train = dict(out.get("train", {}))
    train["quantize"] = preset.get("quantize", True)
    out["train"] = train
    return out


def _precision(d: Optional[dict], base: PrecisionConfig) -> PrecisionConfig:
    if not d:
        return base
    return base.replace(**{f"{k}_width": v for k, v in d.items()})


def _layer(d: dict) -> LayerSpec:
    act = d.get("activation")
    pool = d.get("pool", {"kind": "none"})
    return LayerSpec(
        kind=LayerKind(d["kind"]),
        c_in=d["c_in"],
        c_out=d["c_out"],
        h=d.get("h", 1),
        w=d.get("w", 1),
        stride=d.get("stride", 1),
        padding=d.get("padding", 0),
        activation=None if act is None else ActivationSpec(act["kind"], act.get("alpha")),
        pool=PoolSpec(pool["kind"], pool.get("window", 2), pool.get("stride")),
        batch_norm=d.get("batch_norm", False),
        name=d.get("name", ""),
    )


@dataclass
class RunConfig:
    """Validated configuration; ``data`` keeps the normalized JSON form."""

    data: dict = field(default_factory=lambda: {"schema_version": SCHEMA_VERSION})

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        validate(data)
        cfg = cls(copy.deepcopy(data))
        try:
            cfg.network()
            cfg.layer_precision()
            cfg.train_config()
            cfg.cost_model()
            cfg.geometry()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from exc
        return cls.from_dict(data)

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True) + "\n"

    def with_preset(self, name: Optional[str]) -> "RunConfig":
        return self if name is None else RunConfig.from_dict(apply_preset(self.data, name))

    def with_seed(self, seed: Optional[int]) -> "RunConfig":
        if seed is None:
            return self
        data = copy.deepcopy(self.data)
        data.setdefault("train", {})["seed"] = seed
        return RunConfig.from_dict(data)

    def network(self) -> NetworkSpec:
        net = self.data.get("network")
        if net is None:
            return default_network()
        layers = [_layer(d) for d in net["layers"]]
        if "input_shape" in net:
            input_shape = tuple(net["input_shape"])
        elif layers:
            input_shape = (layers[0].c_in, layers[0].h, layers[0].w)
        else:
            input_shape = (1, 16, 16)
        n_classes = net.get("n_classes", layers[-1].c_out if layers else 10)
        return NetworkSpec(tuple(layers), input_shape, n_classes)

    def layer_precision(self) -> list[PrecisionConfig]:
        base = _precision(self.data.get("precision"), PrecisionConfig())
        net = self.data.get("network")
        if net is None:
            return [base] * len(default_network().layers)
        return [_precision(d.get("precision"), base) for d in net["layers"]]

    def block_overrides(self) -> dict:
        return {(kind, fmt): tuple(shape)
                for kind, fmts in self.data.get("block_sizes", {}).items()
                for fmt, shape in fmts.items()}

    def controller(self) -> ControllerConfig:
        d = dict(self.data.get("controller", {}))
        if "roles" in d:
            d["roles"] = tuple(d["roles"])
        return ControllerConfig(**d)

    def train_config(self) -> TrainConfig:
        d = {k: v for k, v in self.data.get("train", {}).items() if k != "dataset"}
        if "lr_milestones" in d:
            d["lr_milestones"] = tuple(d["lr_milestones"])
        return TrainConfig(precision=self.layer_precision(), controller=self.controller(),
                           block_overrides=self.block_overrides(), **d)

    def dataset_spec(self) -> dict:
        return dict(self.data.get("train", {}).get("dataset", {"name": "synthetic"}))

    def geometry(self) -> CoreGeometry:
        return CoreGeometry(**self.data.get("cost_model", {}).get("geometry", {}))

    def cost_model(self) -> CostModelConfig:
        d = {k: v for k, v in self.data.get("cost_model", {}).items() if k != "geometry"}
        if "power_watts" in d:
            d["power_watts"] = {**CostModelConfig().power_watts, **d["power_watts"]}
        return CostModelConfig(**d)

"""Run configuration: JSON schema, validating loader and typed view."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from ..estimators import EstimatorKind
from ..qnn import Constant, CosineAnneal, QuantConfig, QuantSiteConfig, StepDecay, mlp, small_cnn
from ..qnn.model import Role
from ..quantizer import Rounding


class ConfigError(ValueError):
    pass


_ESTIMATORS = [k.value for k in EstimatorKind]

_SITE = {
    "type": "object",
    "properties": {
        "enabled": {"type": "boolean"},
        "bits": {"type": "integer", "minimum": 2, "maximum": 16},
        "estimator": {"enum": _ESTIMATORS},
        "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "interval": {"type": "integer", "minimum": 1},
        "rounding": {"enum": ["nearest", "stochastic"]},
    },
    "additionalProperties": False,
}

_LAYER = {
    "type": "object",
    "properties": {
        "type": {"enum": ["conv", "linear", "bn", "relu", "maxpool", "gap", "flatten", "residual"]},
    },
    "required": ["type"],
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "qrange run config",
    "type": "object",
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "model": {
            "oneOf": [
                {
                    "type": "object",
                    "properties": {
                        "preset": {"enum": ["small_cnn", "mlp"]},
                        "hidden": {"type": "integer", "minimum": 1},
                    },
                    "required": ["preset"],
                    "additionalProperties": False,
                },
                {
                    "type": "object",
                    "properties": {"layers": {"type": "array", "items": _LAYER, "minItems": 1}},
                    "required": ["layers"],
                    "additionalProperties": False,
                },
            ]
        },
        "dataset": {
            "oneOf": [
                {
                    "type": "object",
                    "properties": {
                        "type": {"const": "idx"},
                        "images_path": {"type": "string"},
                        "labels_path": {"type": "string"},
                        "val_images_path": {"type": "string"},
                        "val_labels_path": {"type": "string"},
                        "limit": {"type": "integer", "minimum": 1},
                    },
                    "required": ["type", "images_path", "labels_path", "val_images_path", "val_labels_path"],
                    "additionalProperties": False,
                },
                {
                    "type": "object",
                    "properties": {
                        "type": {"const": "blobs"},
                        "classes": {"type": "integer", "minimum": 2},
                        "dim": {"type": "integer", "minimum": 2},
                        "samples": {"type": "integer", "minimum": 2},
                        "val_samples": {"type": "integer", "minimum": 1},
                        "noise_sigma": {"type": "number", "minimum": 0},
                    },
                    "required": ["type", "classes", "dim", "samples", "noise_sigma"],
                    "additionalProperties": False,
                },
            ]
        },
        "epochs": {"type": "integer", "minimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
        "optimizer": {
            "type": "object",
            "properties": {
                "lr": {"type": "number", "minimum": 0},
                "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "weight_decay": {"type": "number", "minimum": 0},
                "schedule": {
                    "type": "object",
                    "properties": {
                        "type": {"enum": ["step", "cosine", "constant"]},
                        "milestones": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                        "factor": {"type": "number", "exclusiveMinimum": 0},
                        "lr_final": {"type": "number", "minimum": 0},
                    },
                    "required": ["type"],
                    "additionalProperties": False,
                },
            },
            "additionalProperties": False,
        },
        "quant": {
            "type": "object",
            "properties": {
                "weights": _SITE,
                "activations": _SITE,
                "gradients": _SITE,
                "quantize_first_last": {"type": "boolean"},
                "first_batch_init": {"type": "boolean"},
            },
            "additionalProperties": False,
        },
        "calibration_batches": {"type": "integer", "minimum": 0},
    },
    "required": ["model", "dataset"],
    "additionalProperties": False,
}

DEFAULTS = {
    "seed": 0,
    "epochs": 5,
    "batch_size": 64,
    "optimizer": {"lr": 0.1, "momentum": 0.9, "weight_decay": 1e-4, "schedule": {"type": "constant"}},
    "quant": {
        "weights": {"enabled": True, "bits": 8, "estimator": "current_min_max", "rounding": "nearest"},
        "activations": {"enabled": True, "bits": 8, "estimator": "in_hindsight", "momentum": 0.9, "rounding": "nearest"},
        "gradients": {"enabled": True, "bits": 8, "estimator": "in_hindsight", "momentum": 0.9, "rounding": "stochastic"},
        "quantize_first_last": True,
        "first_batch_init": True,
    },
    "calibration_batches": 2,
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("schedule", "model", "dataset"):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class RunConfig:
    raw: dict
    base_dir: Path = field(default_factory=Path.cwd)

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def epochs(self) -> int:
        return self.raw["epochs"]

    @property
    def batch_size(self) -> int:
        return self.raw["batch_size"]

    @property
    def calibration_batches(self) -> int:
        return self.raw["calibration_batches"]

    @property
    def dataset(self) -> dict:
        return self.raw["dataset"]

    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else self.base_dir / path

    def num_classes(self) -> int:
        if self.dataset["type"] == "blobs":
            return self.dataset["classes"]
        return 10

    def layer_specs(self, in_shape: tuple[int, ...], classes: int) -> list[dict]:
        m = self.raw["model"]
        if "layers" in m:
            return m["layers"]
        if m["preset"] == "small_cnn":
            if len(in_shape) != 3 or in_shape[1] != in_shape[2]:
                raise ConfigError(f"small_cnn preset needs (C, H, H) inputs, got {in_shape}")
            return small_cnn(classes, in_shape[0], in_shape[1])
        n_in = 1
        for d in in_shape:
            n_in *= d
        layers = mlp(n_in, m.get("hidden", 16), classes)
        return ([{"type": "flatten"}] if len(in_shape) > 1 else []) + layers

    def quant_config(self) -> QuantConfig:
        q = self.raw["quant"]

        def site(role: Role, d: dict) -> QuantSiteConfig:
            return QuantSiteConfig(
                role=role,
                bits=d.get("bits", 8),
                estimator=EstimatorKind(d.get("estimator", "current_min_max")),
                momentum=d.get("momentum", 0.9),
                interval=d.get("interval", 100),
                rounding=Rounding(d.get("rounding", "nearest")),
                enabled=d.get("enabled", True),
            )

        return QuantConfig(
            site(Role.WEIGHT, q["weights"]),
            site(Role.ACTIVATION, q["activations"]),
            site(Role.GRADIENT, q["gradients"]),
            q.get("quantize_first_last", True),
            q.get("first_batch_init", True),
        )

    def schedule(self):
        s = self.raw["optimizer"]["schedule"]
        if s["type"] == "step":
            return StepDecay(tuple(s.get("milestones", (30, 60))), s.get("factor", 0.1))
        if s["type"] == "cosine":
            return CosineAnneal(s.get("lr_final", 1e-5))
        return Constant()

    def with_overrides(self, **kw) -> "RunConfig":
        return RunConfig(_merge(self.raw, kw), self.base_dir)

    def to_json(self) -> str:
        return json.dumps(self.raw, sort_keys=True)


def parse_config(data: dict, base_dir=None) -> RunConfig:
    try:
        jsonschema.validate(data, SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {e.message}") from None
    cfg = RunConfig(_merge(DEFAULTS, data), Path(base_dir) if base_dir else Path.cwd())
    ds = cfg.dataset
    if ds["type"] == "idx":
        for key in ("images_path", "labels_path", "val_images_path", "val_labels_path"):
            if not cfg.resolve(ds[key]).exists():
                raise ConfigError(f"dataset/{key}: file not found: {ds[key]}")
        n = ds.get("limit")
    else:
        n = ds["samples"]
    if n is not None and cfg.batch_size > n:
        raise ConfigError(f"batch_size {cfg.batch_size} exceeds dataset size {n}")
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from None
    return parse_config(data, path.parent)

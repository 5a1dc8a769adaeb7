"""Quantized training graph.

Every Conv2d/Linear layer that is quantized owns three sites:

* ``<name>.w`` -- Q_W on the FP32 master weight before it enters the layer
* ``<name>.y`` -- Q_Y at the end of the layer block (conv/linear -> BN -> ReLU)
* ``<name>.g`` -- Q_G on the input gradient before it flows to the previous
  layer (absent when nothing upstream needs a gradient)

Weight gradients are never quantized. All quantizers are straight-through in
the backward pass: gradient passes where the element was on the grid, zero
where it saturated.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .. import tensor as T
from ..estimators import Estimator, EstimatorKind, make_estimator
from ..quantizer import Rounding, fake_quantize_ste, make_grid
from .layers import (
    BatchNorm,
    Conv2d,
    Flatten,
    GlobalAvgPool,
    Layer,
    Linear,
    MaxPool,
    ReLU,
    ResidualAdd,
    softmax_cross_entropy,
)


class Mode(str, enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


class Role(str, enum.Enum):
    WEIGHT = "weight"
    ACTIVATION = "activation"
    GRADIENT = "gradient"


class TapeError(RuntimeError):
    pass


@dataclass(frozen=True)
class QuantSiteConfig:
    role: Role
    bits: int = 8
    estimator: EstimatorKind = EstimatorKind.CURRENT_MIN_MAX
    momentum: float = 0.9
    interval: int = 100
    rounding: Rounding = Rounding.NEAREST
    enabled: bool = True

    @classmethod
    def weights(cls, bits=8, enabled=True):
        return cls(Role.WEIGHT, bits, EstimatorKind.CURRENT_MIN_MAX, enabled=enabled)

    @classmethod
    def activations(cls, estimator=EstimatorKind.CURRENT_MIN_MAX, bits=8, enabled=True, **kw):
        return cls(Role.ACTIVATION, bits, EstimatorKind(estimator), enabled=enabled, **kw)

    @classmethod
    def gradients(cls, estimator=EstimatorKind.CURRENT_MIN_MAX, bits=8, enabled=True, **kw):
        kw.setdefault("rounding", Rounding.STOCHASTIC)
        return cls(Role.GRADIENT, bits, EstimatorKind(estimator), enabled=enabled, **kw)


@dataclass(frozen=True)
class QuantConfig:
    weights: QuantSiteConfig = field(default_factory=QuantSiteConfig.weights)
    activations: QuantSiteConfig = field(default_factory=QuantSiteConfig.activations)
    gradients: QuantSiteConfig = field(default_factory=QuantSiteConfig.gradients)
    quantize_first_last: bool = True
    first_batch_init: bool = True

    @classmethod
    def disabled(cls):
        return cls(
            QuantSiteConfig.weights(enabled=False),
            QuantSiteConfig.activations(enabled=False),
            QuantSiteConfig.gradients(enabled=False),
        )

    @classmethod
    def w8a8g8(cls, estimator=EstimatorKind.IN_HINDSIGHT_MIN_MAX, act_estimator=None, momentum=0.9, **kw):
        return cls(
            QuantSiteConfig.weights(8),
            QuantSiteConfig.activations(act_estimator or estimator, 8, momentum=momentum),
            QuantSiteConfig.gradients(estimator, 8, momentum=momentum),
            **kw,
        )


class QuantSite:
    """One quantizer: configuration, range estimator and last-step telemetry."""

    def __init__(self, name: str, cfg: QuantSiteConfig, first_batch_init: bool = True):
        self.name = name
        self.cfg = cfg
        self.estimator: Estimator = make_estimator(
            cfg.estimator, cfg.momentum, cfg.bits, cfg.interval, first_batch_init
        )
        self.last_range: tuple[float, float] | None = None
        self.last_saturation = 0.0

    @property
    def step(self) -> int:
        return self.estimator.step

    def apply(self, t: np.ndarray, mode: Mode, rng: T.RandomSource | None):
        """Fake-quantize ``t``; returns (output, straight-through mask)."""
        if mode is Mode.TRAIN:
            r = self.estimator.range_for_step(t)
        else:
            r = self.estimator.eval_range(t)
        grid = make_grid(r, self.cfg.bits, self.cfg.rounding)
        out, inside, sat = fake_quantize_ste(t, grid, rng)
        if mode is Mode.TRAIN:
            self.last_range = (grid.nudged_min, grid.nudged_max)
            self.last_saturation = sat
        return out, inside


@dataclass
class TapeEntry:
    index: int
    cache: object
    weight_mask: np.ndarray | None = None
    act_mask: np.ndarray | None = None


class Tape:
    def __init__(self, mode: Mode, batch_shape):
        self.mode = mode
        self.batch_shape = batch_shape
        self.entries: list[TapeEntry] = []
        self.events: list[tuple[str, str]] = []  # (role, site name)
        self.consumed = False


@dataclass
class Gradients:
    params: dict[str, np.ndarray]
    input: np.ndarray | None = None


def build_layer(spec: dict, index: int, rng: T.RandomSource, dtype) -> Layer:
    kind = spec["type"]
    name = spec.get("name", f"{kind}{index}")
    if kind == "conv":
        return Conv2d(
            spec["c_in"], spec["c_out"], spec["k"], spec.get("stride", 1), spec.get("pad", 0),
            spec.get("groups", 1), spec.get("bias", True), name, rng, dtype,
        )
    if kind == "linear":
        return Linear(spec["in"], spec["out"], spec.get("bias", True), name, rng, dtype)
    if kind == "bn":
        return BatchNorm(spec["channels"], spec.get("momentum", 0.1), name=name, dtype=dtype)
    if kind == "relu":
        return ReLU(name)
    if kind == "maxpool":
        return MaxPool(spec.get("k", 2), spec.get("stride"), name)
    if kind == "gap":
        return GlobalAvgPool(name)
    if kind == "flatten":
        return Flatten(name)
    if kind == "residual":
        if not 0 <= spec["source"] < index:
            raise ValueError(f"{name}: residual source must precede layer {index}")
        return ResidualAdd(spec["source"], name)
    raise ValueError(f"unknown layer type {kind!r}")


def small_cnn(classes: int = 10, in_channels: int = 1, size: int = 28) -> list[dict]:
    """Two conv-BN-ReLU-pool blocks and a linear classifier on the flattened map."""
    if size < 4 or size % 4:
        raise ValueError(f"small_cnn needs a square input with side divisible by 4, got {size}")
    side = size // 4
    return [
        {"type": "conv", "c_in": in_channels, "c_out": 8, "k": 3, "pad": 1, "bias": False},
        {"type": "bn", "channels": 8},
        {"type": "relu"},
        {"type": "maxpool", "k": 2},
        {"type": "conv", "c_in": 8, "c_out": 16, "k": 3, "pad": 1, "bias": False},
        {"type": "bn", "channels": 16},
        {"type": "relu"},
        {"type": "maxpool", "k": 2},
        {"type": "flatten"},
        {"type": "linear", "in": 16 * side * side, "out": classes},
    ]


def mlp(n_in: int, hidden: int, classes: int) -> list[dict]:
    return [
        {"type": "linear", "in": n_in, "out": hidden},
        {"type": "relu"},
        {"type": "linear", "in": hidden, "out": classes},
    ]


class Model:
    """Layer graph, FP32 master parameters and per-site quantizer state."""

    def __init__(self, layer_specs: list[dict], quant: QuantConfig | None = None, seed: int = 0, dtype=T.DTYPE):
        self.dtype = np.dtype(dtype).type
        self.quant = quant or QuantConfig.disabled()
        init_rng = T.RandomSource(seed)
        self.rng = T.RandomSource(seed).spawn(1)  # stochastic rounding stream
        self.layers = [build_layer(s, i, init_rng.spawn(100 + i), self.dtype) for i, s in enumerate(layer_specs)]
        self.layer_specs = [dict(s) for s in layer_specs]
        self.step = 0
        self.epoch = 0
        self._build_sites()

    def _build_sites(self):
        q = self.quant
        linear_idx = [i for i, l in enumerate(self.layers) if l.quantizable]
        if not q.quantize_first_last and len(linear_idx) > 0:
            linear_idx = linear_idx[1:-1]
        self.weight_sites: dict[int, QuantSite] = {}
        self.act_sites: dict[int, QuantSite] = {}
        self.grad_sites: dict[int, QuantSite] = {}
        self.block_end: dict[int, int] = {}
        for i in linear_idx:
            layer = self.layers[i]
            j = i
            while j + 1 < len(self.layers) and isinstance(self.layers[j + 1], (BatchNorm, ReLU)):
                j += 1
            if q.weights.enabled:
                self.weight_sites[i] = QuantSite(f"{layer.name}.w", q.weights, q.first_batch_init)
            if q.activations.enabled:
                self.act_sites[j] = QuantSite(f"{layer.name}.y", q.activations, q.first_batch_init)
                self.block_end[i] = j
            if q.gradients.enabled and self._needs_input_grad(i):
                self.grad_sites[i] = QuantSite(f"{layer.name}.g", q.gradients, q.first_batch_init)

    def _needs_input_grad(self, i: int) -> bool:
        return any(l.has_params for l in self.layers[:i])

    @property
    def sites(self) -> dict[str, QuantSite]:
        out = {}
        for d in (self.weight_sites, self.act_sites, self.grad_sites):
            for s in d.values():
                out[s.name] = s
        return dict(sorted(out.items()))

    def named_params(self) -> dict[str, np.ndarray]:
        return {f"{l.name}.{k}": v for l in self.layers for k, v in l.params.items()}

    def named_buffers(self) -> dict[str, np.ndarray]:
        return {f"{l.name}.{k}": v for l in self.layers for k, v in l.buffers.items()}

    def set_param(self, name: str, value: np.ndarray) -> None:
        lname, key = name.rsplit(".", 1)
        for l in self.layers:
            if l.name == lname:
                store = l.params if key in l.params else l.buffers
                if store[key].shape != value.shape:
                    raise T.ShapeError(f"{name}: expected {store[key].shape}, got {value.shape}")
                store[key] = value.astype(self.dtype)
                return
        raise KeyError(name)

    # -- forward / backward --------------------------------------------------

    def forward(self, x: np.ndarray, mode: Mode | str = Mode.TRAIN, update_bn: bool = True):
        mode = Mode(mode)
        h = np.asarray(x, dtype=self.dtype)
        tape = Tape(mode, h.shape)
        outs: list[np.ndarray] = []
        train = mode is Mode.TRAIN
        for i, layer in enumerate(self.layers):
            entry = TapeEntry(i, None)
            kw = {}
            if isinstance(layer, ResidualAdd):
                kw["skip"] = outs[layer.source]
            elif isinstance(layer, BatchNorm):
                kw["update_stats"] = update_bn
            site = self.weight_sites.get(i)
            if site is not None:
                w_q, entry.weight_mask = site.apply(layer.params["weight"], mode, None)
                kw["weight"] = w_q
                tape.events.append((Role.WEIGHT.value, site.name))
            h, entry.cache = layer.forward(h, train=train, **kw)
            site = self.act_sites.get(i)
            if site is not None:
                h, entry.act_mask = site.apply(h, mode, None)
                tape.events.append((Role.ACTIVATION.value, site.name))
            tape.entries.append(entry)
            outs.append(h)
        return h, tape

    def backward(self, tape: Tape, loss_grad: np.ndarray, input_grad: bool = False) -> Gradients:
        if tape.consumed:
            raise TapeError("tape already used for a backward pass")
        if tape.mode is not Mode.TRAIN:
            raise TapeError("backward needs a tape from a train-mode forward")
        tape.consumed = True
        n = len(self.layers)
        pending: dict[int, np.ndarray] = {n - 1: np.asarray(loss_grad, dtype=self.dtype)}
        grads: dict[str, np.ndarray] = {}
        g_in = None
        for i in range(n - 1, -1, -1):
            layer, entry = self.layers[i], tape.entries[i]
            g = pending.pop(i)
            if entry.act_mask is not None:
                g = np.where(entry.act_mask, g, 0).astype(g.dtype)
            need = input_grad or self._needs_input_grad(i)
            g_in, pg = layer.backward(g, entry.cache, need_input_grad=need)
            if "weight" in pg and entry.weight_mask is not None:
                pg["weight"] = np.where(entry.weight_mask, pg["weight"], 0).astype(pg["weight"].dtype)
            for k, v in pg.items():
                grads[f"{layer.name}.{k}"] = v
            site = self.grad_sites.get(i)
            if site is not None and g_in is not None:
                g_in, mask = site.apply(g_in, Mode.TRAIN, self.rng)
                tape.events.append((Role.GRADIENT.value, site.name))
            if g_in is None:
                continue
            if isinstance(layer, ResidualAdd):
                src = layer.source
                pending[src] = pending[src] + g_in if src in pending else g_in
            if i > 0:
                pending[i - 1] = pending[i - 1] + g_in if i - 1 in pending else g_in
        return Gradients(grads, g_in if input_grad else None)

    def calibrate(self, batches) -> None:
        """Warm activation and gradient ranges; parameters are untouched.

        Runs a train-mode forward/backward per batch (BatchNorm uses batch
        statistics without updating its running averages), then resets every
        site's step counter to zero.
        """
        batches = list(batches)
        if not batches:
            raise ValueError("calibration needs at least one batch")
        estimators = [s.estimator for s in self.sites.values()]
        allow = [e.first_batch_init for e in estimators]
        for e in estimators:
            e.first_batch_init = True
        try:
            for x, y in batches:
                logits, tape = self.forward(x, Mode.TRAIN, update_bn=False)
                _, g = softmax_cross_entropy(logits, y)
                self.backward(tape, g)
        finally:
            for e, a in zip(estimators, allow):
                e.first_batch_init = a
        for e in estimators:
            e.step = 0

    def state_snapshot(self) -> dict:
        return {name: s.estimator.state_dict() for name, s in self.sites.items()}


def forward_quantized(model: Model, x, mode=Mode.TRAIN):
    return model.forward(x, mode)


def backward_quantized(model: Model, tape: Tape, loss_grad) -> Gradients:
    return model.backward(tape, loss_grad)

"""Quantization-range estimators.

Four policies share one interface: ``range_for_step(tensor)`` returns the
range used to quantize ``tensor`` at the current training step and advances
the estimator by one step.

* current min-max   -- exact min/max of the tensor itself (dynamic)
* running min-max   -- EMA updated with the current tensor, then used (dynamic)
* in-hindsight      -- EMA of *previous* steps' statistics (static)
* DSGC              -- cosine-similarity clipping, re-searched every ``interval``
                       steps and frozen in between (hybrid)
"""

from __future__ import annotations

import enum
import math
from typing import Callable, Iterable

import numpy as np

from .quantizer import QuantRange, Rounding, fake_quantize, make_grid
from .tensor import reduce_min_max

INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0

DSGC_TOL = 1e-2
DSGC_MAX_ITER = 40
DSGC_INTERVAL = 100


class EstimatorError(RuntimeError):
    pass


class UncalibratedError(EstimatorError):
    pass


class EstimatorKind(str, enum.Enum):
    CURRENT_MIN_MAX = "current_min_max"
    RUNNING_MIN_MAX = "running_min_max"
    IN_HINDSIGHT_MIN_MAX = "in_hindsight"
    DSGC = "dsgc"

    @property
    def static_flag(self) -> str:
        return {
            EstimatorKind.CURRENT_MIN_MAX: "dynamic",
            EstimatorKind.RUNNING_MIN_MAX: "dynamic",
            EstimatorKind.IN_HINDSIGHT_MIN_MAX: "static",
            EstimatorKind.DSGC: "hybrid",
        }[self]

    @property
    def is_static(self) -> bool:
        return self is EstimatorKind.IN_HINDSIGHT_MIN_MAX


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    a64 = np.asarray(a, dtype=np.float64).ravel()
    b64 = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a64), np.linalg.norm(b64)
    if na == 0.0 or nb == 0.0:
        raise ZeroDivisionError("cosine similarity of a zero-norm tensor")
    return float(np.dot(a64, b64) / (na * nb))


def golden_section_search(
    f: Callable[[float], float],
    lo: float,
    hi: float,
    tol: float = 1e-5,
    max_iter: int = 100,
) -> float:
    """Maximize a unimodal ``f`` on ``[lo, hi]``.

    Shrinks the bracket by 1/phi per iteration until its width is at most
    ``tol`` (or ``max_iter`` is hit) and returns the bracket midpoint.
    """
    if not (math.isfinite(lo) and math.isfinite(hi)) or not lo < hi:
        raise ValueError(f"invalid interval [{lo}, {hi}]")
    if tol <= 0:
        raise ValueError("tol must be positive")
    a, b = lo, hi
    c = b - INV_PHI * (b - a)
    d = a + INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if b - a <= tol:
            break
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + INV_PHI * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def _ema(prev: float, stat: float, eta: float) -> float:
    v = (1.0 - eta) * stat + eta * prev
    # the convex combination can overshoot its endpoints by an ulp
    return min(max(v, min(prev, stat)), max(prev, stat))


class Estimator:
    """Base class; one instance serves exactly one quantizer site."""

    kind: EstimatorKind

    def __init__(self, momentum: float = 0.9, first_batch_init: bool = True):
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.momentum = float(momentum)
        self.first_batch_init = first_batch_init
        self.current_range: QuantRange | None = None
        self.pending_stats: tuple[float, float] | None = None
        self.step = 0

    def range_for_step(self, t: np.ndarray) -> QuantRange:
        raise NotImplementedError

    def eval_range(self, t: np.ndarray) -> QuantRange:
        """Range for an evaluation pass; never mutates state."""
        if self.current_range is None:
            return QuantRange(*reduce_min_max(t))
        return self.current_range

    def calibrate(self, batches: Iterable[np.ndarray]) -> "Estimator":
        batches = list(batches)
        if not batches:
            raise ValueError("calibration needs at least one batch")
        allow, self.first_batch_init = self.first_batch_init, True
        try:
            for b in batches:
                self.range_for_step(b)
        finally:
            self.first_batch_init = allow
        self.step = 0
        return self

    def state_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "momentum": self.momentum,
            "step": self.step,
            "range": None if self.current_range is None else self.current_range.as_tuple(),
        }

    def __repr__(self):
        return f"{type(self).__name__}(step={self.step}, range={self.current_range})"


class CurrentMinMax(Estimator):
    kind = EstimatorKind.CURRENT_MIN_MAX

    def range_for_step(self, t):
        r = QuantRange(*reduce_min_max(t))
        self.current_range = r
        self.step += 1
        return r

    def eval_range(self, t):
        return QuantRange(*reduce_min_max(t))


class RunningMinMax(Estimator):
    kind = EstimatorKind.RUNNING_MIN_MAX

    def range_for_step(self, t):
        lo, hi = reduce_min_max(t)
        if self.current_range is None:
            r = QuantRange(lo, hi)
        else:
            prev = self.current_range
            r = QuantRange(_ema(prev.q_min, lo, self.momentum), _ema(prev.q_max, hi, self.momentum))
        self.current_range = r
        self.step += 1
        return r


class InHindsightMinMax(Estimator):
    """Static range from past statistics.

    The range returned at step t was committed at the end of step t-1; the
    statistics of the step-t tensor only affect step t+1 onward.
    """

    kind = EstimatorKind.IN_HINDSIGHT_MIN_MAX

    def range_for_step(self, t):
        stats = reduce_min_max(t)
        if self.current_range is None:
            if not self.first_batch_init:
                raise UncalibratedError("in-hindsight estimator has no initial range")
            self.current_range = QuantRange(*stats)
        used = self.current_range
        self.pending_stats = stats
        self.commit()
        self.step += 1
        return used

    def commit(self) -> None:
        """Fold ``pending_stats`` into the range for the next step."""
        if self.pending_stats is None:
            return
        lo, hi = self.pending_stats
        prev = self.current_range
        self.current_range = QuantRange(
            _ema(prev.q_min, lo, self.momentum), _ema(prev.q_max, hi, self.momentum)
        )
        self.pending_stats = None


class DSGC(Estimator):
    """Direction-sensitive gradient clipping.

    At update steps (``step % interval == 0``) searches a factor ``c`` in
    (0, 1] that maximizes the cosine similarity between the tensor and its
    nearest-rounded fake quantization on the range ``c * (min, max)``.
    """

    kind = EstimatorKind.DSGC

    def __init__(
        self,
        bits: int = 8,
        interval: int = DSGC_INTERVAL,
        tol: float = DSGC_TOL,
        max_iter: int = DSGC_MAX_ITER,
        first_batch_init: bool = True,
    ):
        super().__init__(momentum=0.0, first_batch_init=first_batch_init)
        if interval < 1:
            raise ValueError("interval must be >= 1")
        self.bits = bits
        self.interval = int(interval)
        self.tol = tol
        self.max_iter = max_iter
        self.clip_factor = 1.0

    def search_clip(self, t: np.ndarray) -> float:
        full = QuantRange(*reduce_min_max(t))
        if not np.any(t):
            return 1.0

        def objective(c):
            g = make_grid(full.scaled(c), self.bits, Rounding.NEAREST)
            q = fake_quantize(t, g)
            if not np.any(q):
                return -1.0
            return cosine_similarity(t, q)

        return golden_section_search(objective, 0.0, 1.0, self.tol, self.max_iter)

    def range_for_step(self, t):
        if self.step % self.interval == 0:
            c = self.search_clip(t)
            self.clip_factor = c
            self.current_range = QuantRange(*reduce_min_max(t)).scaled(c)
        elif self.current_range is None:
            raise UncalibratedError("DSGC estimator has no stored range")
        self.step += 1
        return self.current_range

    def state_dict(self):
        d = super().state_dict()
        d.update(clip_factor=self.clip_factor, interval=self.interval)
        return d


def make_estimator(
    kind: EstimatorKind | str,
    momentum: float = 0.9,
    bits: int = 8,
    interval: int = DSGC_INTERVAL,
    first_batch_init: bool = True,
) -> Estimator:
    kind = EstimatorKind(kind)
    if kind is EstimatorKind.CURRENT_MIN_MAX:
        return CurrentMinMax(first_batch_init=first_batch_init)
    if kind is EstimatorKind.RUNNING_MIN_MAX:
        return RunningMinMax(momentum, first_batch_init=first_batch_init)
    if kind is EstimatorKind.IN_HINDSIGHT_MIN_MAX:
        return InHindsightMinMax(momentum, first_batch_init=first_batch_init)
    return DSGC(bits=bits, interval=interval, first_batch_init=first_batch_init)

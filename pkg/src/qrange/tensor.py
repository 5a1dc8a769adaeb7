"""Dense tensor primitives and a seedable random source.

Tensors are plain ``numpy.ndarray`` objects. Payloads are float32 by default;
float64 is accepted everywhere so that finite-difference checks can run at
full precision. Inner products are accumulated in float64 and rounded back to
the payload dtype.
"""

from __future__ import annotations

import os

import numpy as np

DTYPE = np.float32
_ALLOWED = (np.float32, np.float64)

_debug_finite = os.environ.get("QRANGE_CHECK_FINITE", "") not in ("", "0")


class ShapeError(ValueError):
    pass


class GeometryError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


def set_debug(enabled: bool) -> None:
    """Toggle the finiteness check that runs after every tensor op."""
    global _debug_finite
    _debug_finite = bool(enabled)


def _check(out: np.ndarray) -> np.ndarray:
    if _debug_finite and not np.all(np.isfinite(out)):
        raise NonFiniteError("non-finite value produced by tensor op")
    return out


def tensor(data, dtype=None) -> np.ndarray:
    """Build a tensor, rejecting NaN/Inf and empty extents."""
    arr = np.array(data, dtype=dtype or DTYPE)
    if arr.dtype.type not in _ALLOWED:
        raise TypeError(f"unsupported tensor dtype {arr.dtype}")
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if any(d <= 0 for d in arr.shape):
        raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor contains NaN or Inf")
    return arr


def _result_dtype(*arrays):
    return np.result_type(*arrays) if all(a.dtype.type in _ALLOWED for a in arrays) else DTYPE


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.matmul(a.astype(np.float64), b.astype(np.float64))
    return _check(out.astype(_result_dtype(a, b)))


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        raise GeometryError(
            f"non-integral output extent: ({size} + 2*{padding} - {k}) / {stride} + 1"
        )
    return span // stride + 1


def _conv_geometry(x_shape, w_shape, stride, padding, groups):
    if len(x_shape) != 4 or len(w_shape) != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x_shape}, {w_shape}")
    n, c_in, h, w = x_shape
    c_out, c_in_g, kh, kw = w_shape
    if kh != kw:
        raise GeometryError("only square kernels are supported")
    if groups < 1 or c_in % groups or c_out % groups:
        raise GeometryError(f"channels ({c_in} in, {c_out} out) not divisible by groups={groups}")
    if c_in_g != c_in // groups:
        raise GeometryError(f"weight expects {c_in_g} channels per group, input has {c_in // groups}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    return n, c_in, c_out, kh, ho, wo


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # (N, C, Ho, Wo, k, k) view
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0, groups: int = 1) -> np.ndarray:
    """Grouped 2-D cross-correlation (``groups == C_in`` gives depthwise)."""
    n, c_in, c_out, k, ho, wo = _conv_geometry(x.shape, w.shape, stride, padding, groups)
    cg, og = c_in // groups, c_out // groups
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = _windows(xp, k, stride, ho, wo)
    # cols: (G, N*Ho*Wo, Cg*k*k)
    cols = win.reshape(n, groups, cg, ho, wo, k, k).transpose(1, 0, 3, 4, 2, 5, 6)
    cols = cols.reshape(groups, n * ho * wo, cg * k * k)
    wm = w.astype(np.float64).reshape(groups, og, cg * k * k).transpose(0, 2, 1)
    out = np.matmul(cols, wm)  # (G, N*Ho*Wo, Og)
    out = out.reshape(groups, n, ho, wo, og).transpose(1, 0, 4, 2, 3).reshape(n, c_out, ho, wo)
    return _check(out.astype(_result_dtype(x, w)))


def conv2d_backward(
    x: np.ndarray,
    w: np.ndarray,
    grad_out: np.ndarray,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
    need_input_grad: bool = True,
):
    """Gradients of :func:`conv2d` w.r.t. input and weight.

    Returns ``(grad_x, grad_w)``; ``grad_x`` is None when not requested.
    """
    n, c_in, c_out, k, ho, wo = _conv_geometry(x.shape, w.shape, stride, padding, groups)
    cg, og = c_in // groups, c_out // groups
    dtype = _result_dtype(x, w)
    g = grad_out.astype(np.float64).reshape(n, groups, og, ho, wo)
    g_cols = g.transpose(1, 0, 3, 4, 2).reshape(groups, n * ho * wo, og)

    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = _windows(xp, k, stride, ho, wo)
    cols = win.reshape(n, groups, cg, ho, wo, k, k).transpose(1, 0, 3, 4, 2, 5, 6)
    cols = cols.reshape(groups, n * ho * wo, cg * k * k)
    gw = np.matmul(g_cols.transpose(0, 2, 1), cols)  # (G, Og, Cg*k*k)
    grad_w = gw.reshape(c_out, cg, k, k).astype(dtype)

    grad_x = None
    if need_input_grad:
        wm = w.astype(np.float64).reshape(groups, og, cg * k * k)
        dcols = np.matmul(g_cols, wm)  # (G, N*Ho*Wo, Cg*k*k)
        dcols = dcols.reshape(groups, n, ho, wo, cg, k, k).transpose(1, 0, 4, 2, 3, 5, 6)
        dcols = dcols.reshape(n, c_in, ho, wo, k, k)
        dxp = np.zeros(xp.shape, dtype=np.float64)
        hspan = (ho - 1) * stride + 1
        wspan = (wo - 1) * stride + 1
        # fixed kernel-offset order keeps the scatter deterministic
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + hspan : stride, j : j + wspan : stride] += dcols[..., i, j]
        hp, wp = xp.shape[2], xp.shape[3]
        grad_x = dxp[:, :, padding : hp - padding, padding : wp - padding].astype(dtype)
        _check(grad_x)
    return grad_x, _check(grad_w)


def reduce_min_max(t: np.ndarray) -> tuple[float, float]:
    """Per-tensor minimum and maximum over every axis."""
    if t.size == 0:
        raise ShapeError("reduce_min_max of an empty tensor")
    return float(np.min(t)), float(np.max(t))


class RandomSource:
    """Seedable PRNG (PCG64) with uniform and standard-normal draws.

    PCG64 streams are specified bit-for-bit by numpy, so a seed gives the same
    draws on every platform. Single owner: do not share between threads.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._seq = np.random.SeedSequence(self.seed)
        self._gen = np.random.Generator(np.random.PCG64(self._seq))
        self.position = 0

    def uniform(self, shape=()) -> np.ndarray | float:
        out = self._gen.random(shape)
        self.position += int(np.prod(shape)) if shape != () else 1
        return out

    def normal(self, shape=()) -> np.ndarray | float:
        out = self._gen.standard_normal(shape)
        self.position += int(np.prod(shape)) if shape != () else 1
        return out

    def permutation(self, n: int) -> np.ndarray:
        self.position += n
        return self._gen.permutation(n)

    def spawn(self, key: int) -> "RandomSource":
        """Independent child stream derived from this source's seed and ``key``."""
        child = RandomSource.__new__(RandomSource)
        child.seed = self.seed
        child._seq = np.random.SeedSequence(self.seed, spawn_key=(int(key),))
        child._gen = np.random.Generator(np.random.PCG64(child._seq))
        child.position = 0
        return child

    def get_state(self) -> dict:
        return {"state": self._gen.bit_generator.state, "position": self.position}

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state["state"]
        self.position = state["position"]

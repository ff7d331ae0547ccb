"""Dense kernels with a fixed accumulation order.

Every reduction here runs sequentially over its inner index, so the value of
an output element never depends on how many other rows or columns happen to
be in the same call. That property is what lets a cached single-row decode
step reproduce the rows of a full-sequence forward bit for bit.
"""
from __future__ import annotations

import contextlib
import math
import os
from dataclasses import dataclass

import numpy as np
from numba import njit

# Additive bias for masked keys. Large enough to dominate any score, finite so
# that max-subtraction never produces (-inf) - (-inf).
MASK_SENTINEL = -1e9

_PRECISIONS = {"f32": np.float32, "f64": np.float64}
_dtype = _PRECISIONS.get(os.environ.get("ACG_PRECISION", "f32").lower(), np.float32)


class NumericsError(ValueError):
    """Shape mismatch, fully masked row, or a non-finite value."""


def get_dtype() -> type:
    return _dtype


def set_precision(name: str) -> None:
    """Switch the working float type globally ("f32" or "f64")."""
    global _dtype
    try:
        _dtype = _PRECISIONS[name.lower()]
    except KeyError:
        raise NumericsError(f"unknown precision {name!r}; expected f32 or f64") from None


@contextlib.contextmanager
def precision(name: str):
    previous = _dtype
    set_precision(name)
    try:
        yield
    finally:
        globals()["_dtype"] = previous


def asarray(x) -> np.ndarray:
    """Contiguous copy-free view of ``x`` in the working dtype."""
    return np.ascontiguousarray(x, dtype=_dtype)


# ---------------------------------------------------------------------------
# op counting

@dataclass
class OpCounter:
    matmul_calls: int = 0
    matmul_flops: int = 0
    forward_passes: int = 0

    def as_dict(self) -> dict:
        return {
            "matmul_calls": self.matmul_calls,
            "matmul_flops": self.matmul_flops,
            "forward_passes": self.forward_passes,
        }


_active_counters: list[OpCounter] = []


@contextlib.contextmanager
def count_ops():
    """Collect matmul and forward-pass counts for the enclosed block."""
    counter = OpCounter()
    _active_counters.append(counter)
    try:
        yield counter
    finally:
        _active_counters.remove(counter)


def record_forward_pass() -> None:
    for c in _active_counters:
        c.forward_passes += 1


def _record_matmul(m: int, k: int, n: int) -> None:
    for c in _active_counters:
        c.matmul_calls += 1
        c.matmul_flops += 2 * m * k * n


# ---------------------------------------------------------------------------
# compiled kernels

@njit(cache=True)
def _matmul_kernel(a, b, out):
    m, k = a.shape
    n = b.shape[1]
    for i in range(m):
        for j in range(n):
            out[i, j] = 0.0
        for p in range(k):
            aip = a[i, p]
            for j in range(n):
                out[i, j] += aip * b[p, j]
    return out


@njit(cache=True)
def _softmax_rows_kernel(scores, bias, out):
    m, n = scores.shape
    for i in range(m):
        peak = scores[i, 0] + bias[i, 0]
        for j in range(1, n):
            v = scores[i, j] + bias[i, j]
            if v > peak:
                peak = v
        total = 0.0
        for j in range(n):
            if bias[i, j] < 0.0:
                out[i, j] = 0.0
            else:
                e = math.exp(scores[i, j] + bias[i, j] - peak)
                out[i, j] = e
                total += e
        for j in range(n):
            out[i, j] = out[i, j] / total
    return out


@njit(cache=True)
def _rms_norm_rows_kernel(x, weight, eps, out):
    m, n = x.shape
    for i in range(m):
        ss = 0.0
        for j in range(n):
            ss += x[i, j] * x[i, j]
        inv = 1.0 / math.sqrt(ss / n + eps)
        for j in range(n):
            out[i, j] = weight[j] * (x[i, j] * inv)
    return out


@njit(cache=True)
def _dot_kernel(a, b):
    acc = a[0] * b[0]
    for i in range(1, a.shape[0]):
        acc += a[i] * b[i]
    return acc


@njit(cache=True)
def _silu_kernel(x, out):
    m, n = x.shape
    for i in range(m):
        for j in range(n):
            v = x[i, j]
            out[i, j] = v / (1.0 + math.exp(-v))
    return out


# ---------------------------------------------------------------------------
# public operations

def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.isfinite(x).all():
        raise NumericsError(f"non-finite values in {what}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = asarray(a)
    b = asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise NumericsError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.empty((a.shape[0], b.shape[1]), dtype=a.dtype)
    if a.shape[1] == 0:
        out[:] = 0.0
    else:
        _matmul_kernel(a, b, out)
    _record_matmul(a.shape[0], a.shape[1], b.shape[1])
    _check_finite(out, "matmul output")
    return out


def masked_softmax_rows(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise softmax of ``scores + mask``; masked entries come out as exact zeros.

    ``mask`` holds 0 for visible keys and a negative sentinel for hidden ones.
    """
    scores = asarray(scores)
    mask = asarray(mask)
    if scores.shape != mask.shape or scores.ndim != 2:
        raise NumericsError(f"softmax shape mismatch: {scores.shape} vs {mask.shape}")
    _check_finite(scores, "softmax input")
    if scores.shape[1] == 0 or not (mask >= 0.0).any(axis=1).all():
        raise NumericsError("softmax row has every position masked")
    out = np.empty_like(scores)
    return _softmax_rows_kernel(scores, mask, out)


def masked_softmax_row(scores, mask) -> np.ndarray:
    return masked_softmax_rows(np.atleast_2d(scores), np.atleast_2d(mask))[0]


def softmax_rows(scores: np.ndarray) -> np.ndarray:
    scores = asarray(scores)
    return masked_softmax_rows(scores, np.zeros_like(scores))


def rms_norm_rows(x: np.ndarray, weight: np.ndarray, eps: float) -> np.ndarray:
    x = asarray(x)
    weight = asarray(weight)
    if x.ndim != 2 or weight.shape != (x.shape[1],):
        raise NumericsError(f"rms_norm shape mismatch: {x.shape} vs {weight.shape}")
    if eps < 0:
        raise NumericsError("rms_norm eps must be non-negative")
    out = np.empty_like(x)
    _rms_norm_rows_kernel(x, weight, x.dtype.type(eps), out)
    _check_finite(out, "rms_norm output")
    return out


def rms_norm(x, weight, eps: float) -> np.ndarray:
    x = asarray(x)
    if x.ndim != 1:
        raise NumericsError("rms_norm expects a single row")
    return rms_norm_rows(x[None, :], weight, eps)[0]


def silu(x: np.ndarray) -> np.ndarray:
    x = asarray(x)
    return _silu_kernel(x, np.empty_like(x))


def dot(a, b) -> float:
    a = asarray(a)
    b = asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise NumericsError(f"dot shape mismatch: {a.shape} vs {b.shape}")
    if a.shape[0] == 0:
        return a.dtype.type(0.0)
    return _dot_kernel(a, b)


def norm2(v) -> float:
    v = asarray(v)
    return v.dtype.type(math.sqrt(dot(v, v)))


def project_out(v, u_hat) -> np.ndarray:
    """Remove the component of ``v`` along the unit direction ``u_hat``.

    A zero ``u_hat`` is allowed and leaves ``v`` unchanged.
    """
    v = asarray(v)
    u_hat = asarray(u_hat)
    if v.shape != u_hat.shape:
        raise NumericsError(f"project_out shape mismatch: {v.shape} vs {u_hat.shape}")
    return v - dot(v, u_hat) * u_hat


def visual_mask(n_keys: int, visual_start: int, visual_stop: int) -> np.ndarray:
    """Additive mask row hiding keys in ``[visual_start, visual_stop)``."""
    mask = np.zeros(n_keys, dtype=_dtype)
    mask[visual_start:min(visual_stop, n_keys)] = MASK_SENTINEL
    return mask

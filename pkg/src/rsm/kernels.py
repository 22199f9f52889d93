"""Numeric substrate: matmul, ranked masks, nonlinearities and Adam.

All tensors are float32 numpy arrays. Ties in every ranking are broken
toward the lowest index so results never depend on sort stability.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np
import scipy.sparse as sp

DTYPE = np.float32

# below this nonzero fraction a sparse product is cheaper than dense BLAS
SPARSE_DENSITY = 0.1


class DimensionError(ValueError):
    pass


class ParameterError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


@numba.njit(cache=True)
def _csr_parts(a, limit):
    m, n = a.shape
    indptr = np.zeros(m + 1, dtype=np.int64)
    nnz = 0
    for r in range(m):
        for j in range(n):
            if a[r, j] != 0:
                nnz += 1
        if nnz > limit:
            return False, indptr, np.empty(0, np.int64), np.empty(0, a.dtype)
        indptr[r + 1] = nnz
    cols = np.empty(nnz, dtype=np.int64)
    vals = np.empty(nnz, dtype=a.dtype)
    p = 0
    for r in range(m):
        for j in range(n):
            v = a[r, j]
            if v != 0:
                cols[p] = j
                vals[p] = v
                p += 1
    return True, indptr, cols, vals


def _to_csr(a: np.ndarray):
    """CSR copy of a 2-d array, or None when it is too dense to pay off."""
    if a.size == 0 or a.ndim != 2:
        return None
    ok, indptr, cols, vals = _csr_parts(a, int(SPARSE_DENSITY * a.size))
    if not ok:
        return None
    return sp.csr_matrix((vals, cols, indptr), shape=a.shape)


def sparse_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` that switches to CSR arithmetic when either side is mostly zero.

    Recurrent inputs, one-hot words and top-k codes are all very sparse, and
    exploiting it is what makes the large layers tractable on one core.
    """
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    csr = _to_csr(a)
    if csr is not None:
        return np.asarray(csr @ b, dtype=DTYPE)
    csr = _to_csr(b)
    if csr is not None:
        return np.ascontiguousarray(np.asarray(csr.T @ a.T, dtype=DTYPE).T)
    return (a @ b).astype(DTYPE, copy=False)


def outer_sum(d: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Weight gradient ``d.T @ x`` for d [n, out], x [n, in]."""
    return sparse_matmul(np.ascontiguousarray(d.T), x)


@numba.njit(cache=True)
def _top_k_rows(flat, b, mask):
    n = flat.shape[1]
    for r in range(flat.shape[0]):
        row = flat[r]
        thr = np.partition(row, n - b)[n - b]  # b-th largest
        need = b
        for j in range(n):
            if row[j] > thr:
                need -= 1
        for j in range(n):
            v = row[j]
            if v > thr:
                mask[r, j] = 1.0
            elif v == thr and need > 0:
                mask[r, j] = 1.0
                need -= 1


def top_k_mask(a: np.ndarray, b: int) -> np.ndarray:
    """1 at the ``b`` largest entries of the last axis, 0 elsewhere."""
    n = a.shape[-1]
    if not 1 <= b <= n:
        raise ParameterError(f"b={b} outside [1, {n}]")
    flat = np.ascontiguousarray(a.reshape(-1, n))
    mask = np.zeros(flat.shape, dtype=DTYPE)
    if np.isnan(flat).any():
        raise NumericError("top_k_mask input contains NaN")
    _top_k_rows(flat, b, mask)
    return mask.reshape(a.shape)


@numba.njit(cache=True)
def _group_max_rows(flat, vals, idx):
    for r in range(flat.shape[0]):
        best = flat[r, 0]
        arg = 0
        for j in range(1, flat.shape[1]):
            if flat[r, j] > best:
                best = flat[r, j]
                arg = j
        vals[r] = best
        idx[r] = arg


def group_max(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Max over the last axis and its (lowest) index."""
    c = a.shape[-1]
    if c < 1:
        raise DimensionError("group_max needs at least one cell per group")
    flat = np.ascontiguousarray(a.reshape(-1, c))
    vals = np.empty(flat.shape[0], dtype=a.dtype)
    idx = np.empty(flat.shape[0], dtype=np.int64)
    _group_max_rows(flat, vals, idx)
    return vals.reshape(a.shape[:-1]), idx.reshape(a.shape[:-1])


def tanh(a: np.ndarray) -> np.ndarray:
    return np.tanh(a)


def leaky_relu(a: np.ndarray, slope: float = 0.2) -> np.ndarray:
    return np.where(a > 0, a, a * DTYPE(slope)).astype(a.dtype, copy=False)


def scale_max(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    """``max(a * gamma, b)`` elementwise, the decay-then-refresh update."""
    return np.maximum(a * DTYPE(gamma), b)


def dropout_mask(shape, p: float, rng) -> np.ndarray:
    """Inverted dropout mask: kept entries equal 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout rate {p} outside [0, 1)")
    if p == 0.0:
        return np.ones(shape, dtype=DTYPE)
    keep = rng.random(shape) >= p
    return keep.astype(DTYPE) * DTYPE(1.0 / (1.0 - p))


def check_finite(a: np.ndarray, stage: str) -> None:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite values at stage: {stage}")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8

    @classmethod
    def zeros_like(cls, param: np.ndarray, **hyper) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param), **hyper)


@numba.njit(cache=True, error_model="numpy")
def _adam_kernel(p, g, m, v, b1, b2, lr_t, eps):
    for i in range(p.shape[0]):
        gi = g[i]
        m[i] = b1 * m[i] + (1 - b1) * gi
        v[i] = b2 * v[i] + (1 - b2) * gi * gi
        p[i] -= lr_t * m[i] / (np.sqrt(v[i]) + eps)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState) -> np.ndarray:
    """In-place Adam update with bias correction folded into the step size.

    Uses the ``eps_hat`` form: ``lr_t = lr * sqrt(1 - b2^t) / (1 - b1^t)`` and
    ``param -= lr_t * m / (sqrt(v) + eps_hat)``. Returns ``param``.
    """
    if param.shape != grad.shape or state.m.shape != param.shape:
        raise DimensionError(f"adam shapes differ: {param.shape}, {grad.shape}, {state.m.shape}")
    check_finite(grad, "adam gradient")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    lr_t = state.lr * np.sqrt(1.0 - b2**t) / (1.0 - b1**t)
    if not (param.flags.c_contiguous and state.m.flags.c_contiguous and state.v.flags.c_contiguous):
        raise DimensionError("adam updates in place and needs contiguous arrays")
    g = np.ascontiguousarray(grad, dtype=param.dtype).reshape(-1)
    _adam_kernel(param.reshape(-1), g, state.m.reshape(-1), state.v.reshape(-1),
                 param.dtype.type(b1), param.dtype.type(b2), param.dtype.type(lr_t),
                 param.dtype.type(state.eps_hat))
    return param


@dataclass
class Optimizer:
    """One AdamState per named parameter."""

    lr: float = 0.0005
    states: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict) -> None:
        for name, g in grads.items():
            if g is None:
                continue
            st = self.states.get(name)
            if st is None:
                st = self.states[name] = AdamState.zeros_like(params[name], lr=self.lr)
            adam_step(params[name], g, st)

"""Fully-connected recurrent sparse memory layer.

Shapes use b = batch rows, g = groups, c = cells per group, n = input size.
Only the current step is ever differentiated: the masks, inhibition,
integrated activity and normaliser are constants for the backward pass, so
the deepest gradient path is decoder -> bottleneck -> encoder weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .kernels import (
    DTYPE,
    DimensionError,
    ParameterError,
    check_finite,
    dropout_mask,
    group_max,
    outer_sum,
    scale_max,
    sparse_matmul,
    top_k_mask,
)


@dataclass
class RsmConfig:
    input_size: int
    groups: int
    cells: int
    k: int
    gamma: float = 0.0
    epsilon: float = 0.0
    mu: float = 0.0
    recurrent_dropout: float = 0.0
    feedback_size: int = 0

    def __post_init__(self):
        if not 1 <= self.k <= self.groups:
            raise ParameterError(f"k={self.k} must lie in [1, groups={self.groups}]")
        if self.cells < 1 or self.input_size < 1:
            raise ParameterError("cells and input_size must be positive")
        for name in ("gamma", "epsilon"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ParameterError(f"{name} must lie in [0, 1]")
        if not 0.0 <= self.mu < 1.0:
            raise ParameterError("mu must lie in [0, 1)")
        if not 0.0 <= self.recurrent_dropout < 1.0:
            raise ParameterError("recurrent_dropout must lie in [0, 1)")
        if self.feedback_size < 0:
            raise ParameterError("feedback_size must be >= 0")

    @property
    def size(self) -> int:
        """Total number of cells, g * c."""
        return self.groups * self.cells


@dataclass
class RsmParams:
    wF: np.ndarray  # [g, n]
    wR: np.ndarray  # [g*c, g*c]
    wD: np.ndarray  # [n, g]
    wB: np.ndarray | None = None  # [g*c, feedback]

    def named(self) -> dict[str, np.ndarray]:
        out = {"wF": self.wF, "wR": self.wR, "wD": self.wD}
        if self.wB is not None:
            out["wB"] = self.wB
        return out

    def copy(self) -> "RsmParams":
        return RsmParams(**{k: v.copy() for k, v in self.named().items()})


@dataclass
class RsmState:
    phi: np.ndarray  # [b, g, c] inhibition
    psi: np.ndarray  # [b, g, c] integrated activity
    xR: np.ndarray  # [b, g*c] normalised recurrent input

    def copy(self) -> "RsmState":
        return RsmState(self.phi.copy(), self.psi.copy(), self.xR.copy())


@dataclass
class RsmTrace:
    xF: np.ndarray
    xR_used: np.ndarray
    xB: np.ndarray | None
    zF: np.ndarray
    zR: np.ndarray
    zB: np.ndarray | None
    sigma: np.ndarray
    pi: np.ndarray
    piG: np.ndarray
    mC: np.ndarray
    mG: np.ndarray
    y: np.ndarray
    yG: np.ndarray
    yG_argmax: np.ndarray
    xHat: np.ndarray
    alpha: np.ndarray
    extra: dict = field(default_factory=dict)

    @property
    def mask(self) -> np.ndarray:
        return self.mG[:, :, None] * self.mC


def init_params(config: RsmConfig, rng) -> RsmParams:
    """Uniform(-s, s) weights with s = 1/sqrt(fan_in)."""
    g, n, gc = config.groups, config.input_size, config.size

    def uniform(rows, cols, fan_in):
        s = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-s, s, (rows, cols)).astype(DTYPE)

    wF = uniform(g, n, n)
    wR = uniform(gc, gc, gc)
    wD = uniform(n, g, g)
    wB = uniform(gc, config.feedback_size, config.feedback_size) if config.feedback_size else None
    return RsmParams(wF=wF, wR=wR, wD=wD, wB=wB)


def reset_state(config: RsmConfig, batch: int) -> RsmState:
    g, c = config.groups, config.cells
    return RsmState(
        phi=np.zeros((batch, g, c), dtype=DTYPE),
        psi=np.zeros((batch, g, c), dtype=DTYPE),
        xR=np.zeros((batch, g * c), dtype=DTYPE),
    )


def recurrent_dropout(xR: np.ndarray, p: float, rng, training: bool = True) -> np.ndarray:
    if not training or p == 0.0:
        return xR
    return xR * dropout_mask(xR.shape, p, rng)


def apply_forget(state: RsmState, config: RsmConfig, rng) -> np.ndarray:
    """Zero phi, psi and xR of each row with probability mu, in place.

    Returns the boolean mask of forgotten rows. Nothing is drawn from
    ``rng`` when mu == 0, so disabling forgetting leaves the stream intact.
    """
    b = state.phi.shape[0]
    if config.mu == 0.0:
        return np.zeros(b, dtype=bool)
    rows = rng.bernoulli(config.mu, b)
    state.phi[rows] = 0
    state.psi[rows] = 0
    state.xR[rows] = 0
    return rows


def _check_state(config: RsmConfig, state: RsmState, batch: int) -> None:
    g, c = config.groups, config.cells
    if state.phi.shape != (batch, g, c) or state.psi.shape != (batch, g, c):
        raise DimensionError(f"state shape {state.phi.shape} != {(batch, g, c)}")
    if state.xR.shape != (batch, g * c):
        raise DimensionError(f"xR shape {state.xR.shape} != {(batch, g * c)}")


def encode(params: RsmParams, config: RsmConfig, state: RsmState, xF, xB=None,
           rng=None, training: bool = False):
    """Everything up to and including the sparse code and the state update.

    Returns (partial trace dict, next_state). Decoding is separate so the
    convolutional variant can substitute a transposed convolution.
    """
    b = xF.shape[0]
    g, c = config.groups, config.cells
    if xF.shape[1] != config.input_size:
        raise DimensionError(f"xF width {xF.shape[1]} != input_size {config.input_size}")
    _check_state(config, state, b)

    xR_used = state.xR
    if training and config.recurrent_dropout > 0:
        xR_used = recurrent_dropout(state.xR, config.recurrent_dropout, rng)

    zF = sparse_matmul(xF, params.wF.T)
    zR = sparse_matmul(xR_used, params.wR.T).reshape(b, g, c)
    sigma = zF[:, :, None] + zR
    zB = None
    if config.feedback_size:
        if xB is None:
            xB = np.zeros((b, config.feedback_size), dtype=DTYPE)
        if xB.shape != (b, config.feedback_size):
            raise DimensionError(f"xB shape {xB.shape} != {(b, config.feedback_size)}")
        zB = sparse_matmul(xB, params.wB.T).reshape(b, g, c)
        sigma = sigma + zB
    check_finite(sigma, "weighted sum (sigma)")

    # shift per sample so every cell is >= 1, then apply inhibition
    smin = sigma.reshape(b, -1).min(axis=1)
    pi = (1 - state.phi) * (sigma - smin[:, None, None] + 1)
    piG, cell_idx = group_max(pi)
    mC = np.zeros_like(pi)
    np.put_along_axis(mC, cell_idx[..., None], 1.0, axis=-1)
    mG = top_k_mask(piG, config.k)
    y = np.tanh(sigma * (mG[:, :, None] * mC))

    phi = np.maximum(scale_max(state.phi, y, config.gamma), 0)
    if config.epsilon == 0.0:
        psi = y.copy()  # integration disabled
    else:
        psi = scale_max(state.psi, y, config.epsilon)
    total = psi.reshape(b, -1).sum(axis=1)
    nz = total != 0
    alpha = np.zeros(b, dtype=DTYPE)
    alpha[nz] = 1.0 / total[nz]
    xR_next = (psi.reshape(b, -1) * alpha[:, None]).astype(DTYPE)
    check_finite(xR_next, "recurrent input normalisation (alpha)")

    yG, yG_arg = group_max(y)
    parts = dict(xF=xF, xR_used=xR_used, xB=xB, zF=zF, zR=zR, zB=zB, sigma=sigma, pi=pi,
                 piG=piG, mC=mC, mG=mG, y=y, yG=yG, yG_argmax=yG_arg, alpha=alpha)
    return parts, RsmState(phi=phi.astype(DTYPE), psi=psi.astype(DTYPE), xR=xR_next)


def forward(params: RsmParams, config: RsmConfig, state: RsmState, xF: np.ndarray,
            xB: np.ndarray | None = None, rng=None, training: bool = False):
    """One time step. Returns (trace, next_state); ``state`` is not modified."""
    parts, next_state = encode(params, config, state, xF, xB, rng, training)
    xHat = sparse_matmul(parts["yG"], params.wD.T)
    check_finite(xHat, "decoded prediction (xHat)")
    return RsmTrace(xHat=xHat, **parts), next_state


def encoder_grads(trace: RsmTrace, dyG: np.ndarray, params: RsmParams) -> dict:
    """Push a bottleneck gradient through the hard max, tanh and masks."""
    b, g, c = trace.y.shape
    dy = np.zeros_like(trace.y)
    np.put_along_axis(dy, trace.yG_argmax[..., None], dyG[..., None], axis=-1)
    dsigma = dy * (1 - trace.y * trace.y) * trace.mask
    dflat = dsigma.reshape(b, g * c)
    grads = {
        "wF": outer_sum(dsigma.sum(axis=2), trace.xF),
        "wR": outer_sum(dflat, trace.xR_used),
    }
    if params.wB is not None:
        grads["wB"] = outer_sum(dflat, trace.xB)
    return grads


def loss_and_grads(trace: RsmTrace, target: np.ndarray, params: RsmParams):
    """MSE of the prediction against the next input, with local gradients."""
    if target.shape != trace.xHat.shape:
        raise DimensionError(f"target {target.shape} != prediction {trace.xHat.shape}")
    err = trace.xHat - target
    loss = float(np.mean(np.square(err, dtype=np.float64)))
    dxHat = (2.0 / err.size) * err.astype(DTYPE)
    grads = encoder_grads(trace, sparse_matmul(dxHat, params.wD), params)
    grads["wD"] = outer_sum(dxHat, trace.yG)
    return loss, grads


def active_cells(trace: RsmTrace) -> list[frozenset]:
    """Set of active flat cell indices per batch row."""
    m = trace.mask.reshape(trace.mask.shape[0], -1)
    return [frozenset(np.flatnonzero(row).tolist()) for row in m]


def config_from_dict(d: dict) -> RsmConfig:
    names = {f.name for f in fields(RsmConfig)}
    return RsmConfig(**{k: v for k, v in d.items() if k in names})


__all__ = [
    "RsmConfig", "RsmParams", "RsmState", "RsmTrace", "init_params", "reset_state", "forward",
    "encode", "encoder_grads", "loss_and_grads", "apply_forget", "recurrent_dropout",
    "active_cells",
]

"""Two-layer leaky-ReLU classifier reading detached memory state."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import DTYPE, DimensionError, Optimizer, ParameterError, leaky_relu, outer_sum, sparse_matmul


@dataclass
class MlpParams:
    w1: np.ndarray  # [hidden, input]
    b1: np.ndarray
    w2: np.ndarray  # [labels, hidden]
    b2: np.ndarray
    l2: float = 1e-5
    slope: float = 0.2

    def named(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    @property
    def labels(self) -> int:
        return self.w2.shape[0]


def init_mlp(n_in: int, hidden: int, labels: int, rng, l2: float = 1e-5, slope: float = 0.2) -> MlpParams:
    s1, s2 = 1 / np.sqrt(n_in), 1 / np.sqrt(hidden)
    return MlpParams(
        w1=rng.uniform(-s1, s1, (hidden, n_in)).astype(DTYPE),
        b1=np.zeros(hidden, DTYPE),
        w2=rng.uniform(-s2, s2, (labels, hidden)).astype(DTYPE),
        b2=np.zeros(labels, DTYPE),
        l2=l2,
        slope=slope,
    )


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _hidden(params: MlpParams, features: np.ndarray):
    if features.shape[-1] != params.w1.shape[1]:
        raise DimensionError(f"feature width {features.shape[-1]} != {params.w1.shape[1]}")
    pre = sparse_matmul(features, params.w1.T) + params.b1
    return pre, leaky_relu(pre, params.slope)


def classify(params: MlpParams, features: np.ndarray):
    """Returns (logits, probabilities)."""
    _, h = _hidden(params, features)
    logits = h @ params.w2.T + params.b2
    return logits, softmax(logits)


def loss_and_grads(params: MlpParams, features: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy plus l2 * (|w1|^2 + |w2|^2)."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= params.labels:
        raise ParameterError(f"label outside [0, {params.labels})")
    b = features.shape[0]
    pre, h = _hidden(params, features)
    logits = h @ params.w2.T + params.b2
    p = softmax(logits.astype(np.float64))
    rows = np.arange(b)
    ce = -np.mean(np.log(np.maximum(p[rows, labels], 1e-300)))
    reg = params.l2 * (np.sum(np.square(params.w1, dtype=np.float64))
                       + np.sum(np.square(params.w2, dtype=np.float64)))
    dlogits = p
    dlogits[rows, labels] -= 1
    dlogits = (dlogits / b).astype(DTYPE)
    dh = dlogits @ params.w2
    dpre = dh * np.where(pre > 0, DTYPE(1), DTYPE(params.slope))
    grads = {
        "w2": dlogits.T @ h + DTYPE(2 * params.l2) * params.w2,
        "b2": dlogits.sum(axis=0),
        "w1": outer_sum(dpre, features) + DTYPE(2 * params.l2) * params.w1,
        "b1": dpre.sum(axis=0),
    }
    return float(ce + reg), grads


def train_step(params: MlpParams, features: np.ndarray, labels: np.ndarray, opt: Optimizer) -> float:
    """One Adam step on a batch of detached features. Returns the pre-update loss."""
    loss, grads = loss_and_grads(params, features, labels)
    opt.step(params.named(), grads)
    return loss

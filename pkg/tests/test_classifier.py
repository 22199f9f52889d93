import math

import numpy as np
import pytest

from oracles import central_difference, rel_err
from rsm.classifier import MlpParams, classify, init_mlp, loss_and_grads, train_step
from rsm.kernels import DimensionError, Optimizer, ParameterError
from rsm.prng import Xoshiro256


def zero_mlp(n_in, hidden, labels, l2=0.0):
    return MlpParams(np.zeros((hidden, n_in), np.float32), np.zeros(hidden, np.float32),
                     np.zeros((labels, hidden), np.float32), np.zeros(labels, np.float32), l2=l2)


def test_zero_weights_give_uniform():
    _, p = classify(zero_mlp(4, 3, 5), np.ones((2, 4), np.float32))
    np.testing.assert_allclose(p, 0.2)


def test_distribution_sums_to_one_and_argmax_shift_invariant():
    rng = Xoshiro256(0)
    m = init_mlp(6, 10, 4, rng)
    x = rng.normal((20, 6)).astype(np.float32)
    logits, p = classify(m, x)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    m.b2 += 3.5
    logits2, _ = classify(m, x)
    np.testing.assert_array_equal(logits.argmax(1), logits2.argmax(1))


def test_uniform_cross_entropy_is_log_labels():
    loss, _ = loss_and_grads(zero_mlp(4, 3, 7), np.ones((5, 4), np.float32), np.arange(5))
    assert loss == pytest.approx(math.log(7), abs=1e-12)


def test_gradients_match_finite_differences():
    rng = Xoshiro256(3)
    m = init_mlp(5, 6, 4, rng, l2=0.01)
    x = rng.normal((7, 5)).astype(np.float32)
    y = rng.integers(4, 7)
    _, grads = loss_and_grads(m, x, y)
    p64 = {k: v.astype(np.float64) for k, v in m.named().items()}

    def fn(w1, b1, w2, b2):
        pre = x @ w1.T + b1
        h = np.where(pre > 0, pre, 0.2 * pre)
        z = h @ w2.T + b2
        z = z - z.max(1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(1, keepdims=True))
        return -logp[np.arange(7), y].mean() + 0.01 * ((w1**2).sum() + (w2**2).sum())

    fd = central_difference(fn, p64, h=1e-4)
    for name in fd:
        assert rel_err(grads[name], fd[name]) < 1e-3, name


def test_zero_input_only_bias_gradients():
    rng = Xoshiro256(4)
    m = init_mlp(5, 6, 3, rng, l2=0.0)
    _, grads = loss_and_grads(m, np.zeros((2, 5), np.float32), np.array([0, 2]))
    assert not grads["w1"].any() and not grads["w2"].any()
    assert grads["b1"].any() and grads["b2"].any()


def test_repeated_training_converges():
    rng = Xoshiro256(5)
    m = init_mlp(8, 16, 5, rng)
    opt = Optimizer(lr=0.01)
    x = rng.random((1, 8)).astype(np.float32)
    for _ in range(300):
        loss = train_step(m, x, np.array([3]), opt)
    assert loss < 0.01


def test_errors():
    m = init_mlp(4, 3, 2, Xoshiro256(0))
    with pytest.raises(ParameterError):
        loss_and_grads(m, np.zeros((1, 4), np.float32), np.array([2]))
    with pytest.raises(DimensionError):
        classify(m, np.zeros((1, 5), np.float32))


def test_training_leaves_features_untouched():
    rng = Xoshiro256(1)
    m = init_mlp(4, 3, 2, rng)
    x = rng.random((3, 4)).astype(np.float32)
    snapshot = x.copy()
    train_step(m, x, np.array([0, 1, 0]), Optimizer())
    np.testing.assert_array_equal(x, snapshot)

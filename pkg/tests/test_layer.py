import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_difference, frozen_rsm_loss, rel_err, rsm_step_reference
from rsm.kernels import DimensionError, NumericError, ParameterError
from rsm.layer import (
    RsmConfig,
    RsmParams,
    RsmState,
    active_cells,
    apply_forget,
    forward,
    init_params,
    loss_and_grads,
    recurrent_dropout,
    reset_state,
)
from rsm.prng import Xoshiro256


def random_state(config, batch, rng):
    g, c = config.groups, config.cells
    phi = rng.uniform(0, 0.8, (batch, g, c)).astype(np.float32)
    psi = rng.uniform(0, 0.5, (batch, g, c)).astype(np.float32)
    xR = psi.reshape(batch, -1) / psi.reshape(batch, -1).sum(1, keepdims=True)
    return RsmState(phi, psi, xR.astype(np.float32))


def test_init_params_shapes_and_bounds():
    cfg = RsmConfig(input_size=3, groups=2, cells=1, k=1)
    p = init_params(cfg, Xoshiro256(0))
    assert p.wF.shape == (2, 3) and p.wD.shape == (3, 2) and p.wR.shape == (2, 2)
    assert p.wB is None
    q = init_params(cfg, Xoshiro256(0))
    for name in p.named():
        assert p.named()[name].tobytes() == q.named()[name].tobytes()
    big = init_params(RsmConfig(input_size=100, groups=4, cells=1, k=1), Xoshiro256(1))
    assert np.all(np.abs(big.wF) < 0.1)
    # decoder is drawn independently, not a transpose of the encoder
    assert not np.allclose(p.wD, p.wF.T)


def test_config_validation():
    with pytest.raises(ParameterError):
        RsmConfig(input_size=3, groups=2, cells=1, k=3)
    with pytest.raises(ParameterError):
        RsmConfig(input_size=3, groups=2, cells=1, k=1, gamma=1.5)
    with pytest.raises(ParameterError):
        RsmConfig(input_size=3, groups=2, cells=1, k=1, mu=1.0)


@pytest.mark.parametrize("batch,g,c", [(1, 2, 1), (3, 4, 2), (5, 200, 6)])
def test_reset_state_shapes(batch, g, c):
    s = reset_state(RsmConfig(input_size=2, groups=g, cells=c, k=1), batch)
    assert s.phi.shape == (batch, g, c) and s.psi.shape == (batch, g, c)
    assert s.xR.shape == (batch, g * c)
    assert not s.phi.any() and not s.psi.any() and not s.xR.any()


def test_forward_zero_params():
    cfg = RsmConfig(input_size=4, groups=3, cells=2, k=2)
    z = RsmParams(wF=np.zeros((3, 4), np.float32), wR=np.zeros((6, 6), np.float32),
                  wD=np.zeros((4, 3), np.float32))
    x = Xoshiro256(0).random((2, 4)).astype(np.float32)
    trace, nxt = forward(z, cfg, reset_state(cfg, 2), x)
    assert not trace.sigma.any() and not trace.y.any() and not trace.xHat.any()
    assert np.all(trace.pi == 1.0)
    assert not nxt.xR.any()


@pytest.mark.parametrize("feedback", [0, 3])
@pytest.mark.parametrize("epsilon", [0.0, 0.6])
def test_forward_matches_equation_oracle(feedback, epsilon):
    cfg = RsmConfig(input_size=4, groups=2, cells=2, k=1, gamma=0.7, epsilon=epsilon,
                    feedback_size=feedback)
    rng = Xoshiro256(21)
    params = init_params(cfg, rng)
    state = random_state(cfg, 3, rng)
    x = rng.random((3, 4)).astype(np.float32)
    xB = rng.random((3, feedback)).astype(np.float32) if feedback else None
    trace, nxt = forward(params, cfg, state, x, xB)
    for r in range(3):
        ref = rsm_step_reference(params.wF, params.wR, params.wB, params.wD, state.phi[r],
                                 state.psi[r], state.xR[r], x[r],
                                 None if xB is None else xB[r], cfg.k, cfg.gamma, cfg.epsilon)
        tol = dict(atol=1e-6, rtol=1e-6)
        np.testing.assert_allclose(trace.zF[r], ref["zF"], **tol)
        np.testing.assert_allclose(trace.zR[r], ref["zR"], **tol)
        if feedback:
            np.testing.assert_allclose(trace.zB[r], ref["zB"], **tol)
        np.testing.assert_allclose(trace.sigma[r], ref["sigma"], **tol)
        np.testing.assert_allclose(trace.pi[r], ref["pi"], **tol)
        np.testing.assert_allclose(trace.piG[r], ref["piG"], **tol)
        np.testing.assert_array_equal(trace.mC[r], ref["mC"])
        np.testing.assert_array_equal(trace.mG[r], ref["mG"])
        np.testing.assert_allclose(trace.y[r], ref["y"], **tol)
        np.testing.assert_allclose(nxt.phi[r], ref["phi"], **tol)
        np.testing.assert_allclose(nxt.psi[r], ref["psi"], **tol)
        np.testing.assert_allclose(nxt.xR[r], ref["xR"], **tol)
        np.testing.assert_allclose(trace.alpha[r], ref["alpha"], rtol=1e-6)
        np.testing.assert_allclose(trace.yG[r], ref["yG"], **tol)
        np.testing.assert_array_equal(trace.yG_argmax[r], ref["yG_argmax"])
        np.testing.assert_allclose(trace.xHat[r], ref["xHat"], **tol)


def test_forward_does_not_mutate_state():
    cfg = RsmConfig(input_size=3, groups=4, cells=2, k=2, gamma=0.5)
    rng = Xoshiro256(4)
    params = init_params(cfg, rng)
    state = random_state(cfg, 2, rng)
    before = state.copy()
    forward(params, cfg, state, rng.random((2, 3)).astype(np.float32))
    for a, b in [(state.phi, before.phi), (state.psi, before.psi), (state.xR, before.xR)]:
        np.testing.assert_array_equal(a, b)


def test_forward_shape_errors():
    cfg = RsmConfig(input_size=3, groups=4, cells=2, k=2)
    params = init_params(cfg, Xoshiro256(0))
    with pytest.raises(DimensionError):
        forward(params, cfg, reset_state(cfg, 2), np.zeros((2, 4), np.float32))
    with pytest.raises(DimensionError):
        forward(params, cfg, reset_state(cfg, 3), np.zeros((2, 3), np.float32))


def test_forward_reports_non_finite_stage():
    cfg = RsmConfig(input_size=3, groups=4, cells=2, k=2)
    params = init_params(cfg, Xoshiro256(0))
    params.wF[0, 0] = np.inf
    with pytest.raises(NumericError, match="sigma"):
        forward(params, cfg, reset_state(cfg, 1), np.ones((1, 3), np.float32))


def test_exactly_k_groups_active_with_distinct_sigma():
    cfg = RsmConfig(input_size=6, groups=10, cells=3, k=4)
    rng = Xoshiro256(5)
    params = init_params(cfg, rng)
    trace, _ = forward(params, cfg, reset_state(cfg, 8), rng.random((8, 6)).astype(np.float32))
    groups_on = (np.abs(trace.y) > 0).any(axis=2).sum(axis=1)
    np.testing.assert_array_equal(groups_on, 4)


def test_gradients_match_finite_differences():
    cfg = RsmConfig(input_size=5, groups=3, cells=2, k=2, gamma=0.9, epsilon=0.5, feedback_size=4)
    rng = Xoshiro256(77)
    params = init_params(cfg, rng)
    for w in params.named().values():
        w *= 3  # larger weights exercise tanh curvature
    state = random_state(cfg, 4, rng)
    x = rng.random((4, 5)).astype(np.float32)
    xB = rng.random((4, 4)).astype(np.float32)
    target = rng.random((4, 5)).astype(np.float32)
    trace, _ = forward(params, cfg, state, x, xB)
    _, grads = loss_and_grads(trace, target, params)

    p64 = {k: v.astype(np.float64) for k, v in params.named().items()}

    def fn(wF, wR, wB, wD):
        return frozen_rsm_loss(wF, wR, wB, wD, x.astype(np.float64),
                               trace.xR_used.astype(np.float64), xB.astype(np.float64),
                               trace.mask.astype(np.float64), trace.yG_argmax, target)

    fd = central_difference(fn, p64)
    for name in ("wF", "wR", "wB", "wD"):
        assert rel_err(grads[name], fd[name]) < 1e-3, name


def test_zero_loss_when_target_equals_prediction():
    cfg = RsmConfig(input_size=5, groups=3, cells=2, k=2)
    rng = Xoshiro256(1)
    params = init_params(cfg, rng)
    trace, _ = forward(params, cfg, reset_state(cfg, 2), rng.random((2, 5)).astype(np.float32))
    loss, grads = loss_and_grads(trace, trace.xHat.copy(), params)
    assert loss == 0
    for g in grads.values():
        assert not g.any()


def test_unselected_cells_get_no_recurrent_gradient():
    cfg = RsmConfig(input_size=5, groups=6, cells=3, k=2)
    rng = Xoshiro256(3)
    params = init_params(cfg, rng)
    state = random_state(cfg, 3, rng)
    trace, _ = forward(params, cfg, state, rng.random((3, 5)).astype(np.float32))
    _, grads = loss_and_grads(trace, rng.random((3, 5)).astype(np.float32), params)
    never = trace.mask.reshape(3, -1).sum(axis=0) == 0
    assert never.any()
    assert not grads["wR"][never].any()


def test_gradient_locality_wrt_recurrent_input():
    cfg = RsmConfig(input_size=5, groups=6, cells=3, k=2)
    rng = Xoshiro256(3)
    params = init_params(cfg, rng)
    trace, _ = forward(params, cfg, random_state(cfg, 3, rng), rng.random((3, 5)).astype(np.float32))
    target = rng.random((3, 5)).astype(np.float32)
    _, g1 = loss_and_grads(trace, target, params)
    trace.xR_used = np.zeros_like(trace.xR_used)
    _, g2 = loss_and_grads(trace, target, params)
    np.testing.assert_array_equal(g1["wD"], g2["wD"])
    np.testing.assert_array_equal(g1["wF"], g2["wF"])
    assert not g2["wR"].any()


def test_loss_shape_error():
    cfg = RsmConfig(input_size=5, groups=3, cells=2, k=2)
    params = init_params(cfg, Xoshiro256(0))
    trace, _ = forward(params, cfg, reset_state(cfg, 2), np.ones((2, 5), np.float32))
    with pytest.raises(DimensionError):
        loss_and_grads(trace, np.ones((2, 4), np.float32), params)


def test_apply_forget():
    cfg = RsmConfig(input_size=2, groups=3, cells=2, k=1, mu=0.0)
    rng = Xoshiro256(0)
    s = random_state(cfg, 4, rng)
    before = s.copy()
    apply_forget(s, cfg, rng)
    np.testing.assert_array_equal(s.phi, before.phi)

    cfg = RsmConfig(input_size=2, groups=3, cells=2, k=1, mu=1 - 1e-9)
    s = random_state(cfg, 1000, rng)
    rows = apply_forget(s, cfg, rng)
    assert rows.sum() == 1000
    assert not s.phi.any() and not s.psi.any() and not s.xR.any()

    cfg = RsmConfig(input_size=2, groups=3, cells=2, k=1, mu=0.3)
    pats = []
    for _ in range(2):
        r = Xoshiro256(12)
        pats.append(apply_forget(random_state(cfg, 50, Xoshiro256(1)), cfg, r))
    np.testing.assert_array_equal(pats[0], pats[1])
    assert 0 < pats[0].sum() < 50


def test_recurrent_dropout():
    rng = Xoshiro256(0)
    x = rng.random((4, 10)).astype(np.float32)
    assert recurrent_dropout(x, 0.0, rng) is x
    assert recurrent_dropout(x, 0.5, rng, training=False) is x
    acc = np.zeros_like(x, dtype=np.float64)
    n = 4000
    for _ in range(n):
        acc += recurrent_dropout(x, 0.5, rng)
    np.testing.assert_allclose(acc / n, x, rtol=0.1)


def test_dropout_touches_only_consumed_input():
    cfg = RsmConfig(input_size=3, groups=4, cells=2, k=2, recurrent_dropout=0.5)
    rng = Xoshiro256(6)
    params = init_params(cfg, rng)
    state = random_state(cfg, 2, rng)
    trace, _ = forward(params, cfg, state, rng.random((2, 3)).astype(np.float32), rng=rng,
                       training=True)
    assert not np.array_equal(trace.xR_used, state.xR)
    trace_eval, _ = forward(params, cfg, state, trace.xF)
    np.testing.assert_array_equal(trace_eval.xR_used, state.xR)


# --- invariants -------------------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32), g=st.integers(1, 8), c=st.integers(1, 4),
       gamma=st.floats(0, 1), epsilon=st.floats(0, 1), data=st.data())
def test_sparsity_and_decay_invariants(seed, g, c, gamma, epsilon, data):
    k = data.draw(st.integers(1, g))
    cfg = RsmConfig(input_size=4, groups=g, cells=c, k=k, gamma=gamma, epsilon=epsilon)
    rng = Xoshiro256(seed)
    params = init_params(cfg, rng)
    state = reset_state(cfg, 3)
    for _ in range(5):
        trace, nxt = forward(params, cfg, state, rng.random((3, 4)).astype(np.float32))
        nz = trace.y != 0
        assert np.all(nz.sum(axis=2) <= 1)
        assert np.all(nz.any(axis=2).sum(axis=1) <= k)
        assert np.all(nxt.phi >= state.phi * np.float32(gamma))
        assert np.all((nxt.phi >= 0) & (nxt.phi <= 1))
        if epsilon == 0:
            np.testing.assert_array_equal(nxt.psi, trace.y)
        sums = nxt.xR.sum(axis=1)
        nonzero = nxt.psi.reshape(3, -1).any(axis=1)
        np.testing.assert_allclose(sums[nonzero], 1.0, rtol=1e-4)
        assert not nxt.xR[~nonzero].any()
        state = nxt


def test_integration_with_full_memory_is_running_max():
    cfg = RsmConfig(input_size=3, groups=5, cells=3, k=2, epsilon=1.0)
    rng = Xoshiro256(2)
    params = init_params(cfg, rng)
    state = reset_state(cfg, 2)
    running = np.zeros_like(state.psi)
    for _ in range(10):
        trace, state = forward(params, cfg, state, rng.random((2, 3)).astype(np.float32))
        running = np.maximum(running, trace.y)
        np.testing.assert_array_equal(state.psi, running)


def test_refractory_effect():
    cfg = RsmConfig(input_size=4, groups=6, cells=3, k=2, gamma=0.9)
    rng = Xoshiro256(8)
    params = init_params(cfg, rng)
    x = rng.random((1, 4)).astype(np.float32)
    trace0, state1 = forward(params, cfg, reset_state(cfg, 1), x)
    # same recurrent input, with and without the inhibition produced at t
    fresh = RsmState(np.zeros_like(state1.phi), state1.psi, state1.xR)
    inhibited, _ = forward(params, cfg, state1, x)
    uninhibited, _ = forward(params, cfg, fresh, x)
    fired = trace0.y > 0
    assert fired.any()
    assert np.all(inhibited.pi[fired] < uninhibited.pi[fired])


def test_combinatoric_coding_capacity():
    cfg = RsmConfig(input_size=20, groups=200, cells=6, k=25, gamma=0.98)
    rng = Xoshiro256(10)
    params = init_params(cfg, rng)
    codes = set()
    for _ in range(4):
        state = reset_state(cfg, 32)
        for _ in range(3):
            trace, state = forward(params, cfg, state, rng.random((32, 20)).astype(np.float32))
        codes.update(active_cells(trace))
    assert len(codes) >= 100
    assert 200 // 25 < 100  # more codes than disjoint sets would allow

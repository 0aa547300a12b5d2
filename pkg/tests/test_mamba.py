import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridssm.mamba import (
    GATE_BIAS_UNIT,
    SSMState,
    associative_scan,
    combine,
    delta_bias_for,
    discretize,
    init_mamba,
    mamba_forward_emulation,
    mamba_step,
    s4d_real_A,
    ssm_scan_parallel,
    ssm_scan_recurrent,
)
from hybridssm.numerics import Tensor, rel_err
from hybridssm.numerics import tensor as T


def _layer(seed, d=8, h=2, h_kv=1, d_v=4, N=4, **kw):
    kw.setdefault("delta_init", 0.3)
    return init_mamba(np.random.default_rng(seed), d, h, h_kv, d_v, N, **kw)


def _reference(w, x):
    """Per-step 64-bit evaluation of the layer from its weights."""
    f = lambda t: t.data.astype(np.float64)
    x = x.astype(np.float32).astype(np.float64)
    g = w.h // w.h_kv
    A = -np.exp(f(w.A_log)).reshape(w.h, w.d_v)
    D = f(w.D).reshape(w.h, w.d_v)
    state = np.zeros((w.h, w.d_v, w.N))
    out = []
    for xt in x:
        xs = np.repeat((xt @ f(w.W_x)).reshape(w.h_kv, w.d_v), g, axis=0)
        Bs = np.repeat((xt @ f(w.W_B)).reshape(w.h_kv, w.N), g, axis=0)
        Cs = (xt @ f(w.W_C)).reshape(w.h, w.N)
        delta = np.log1p(np.exp(xt @ f(w.W_delta) + f(w.b_delta)))
        y = np.zeros((w.h, w.d_v))
        for i in range(w.h):
            for p in range(w.d_v):
                abar = math.exp(delta[i] * A[i, p])
                state[i, p] = abar * state[i, p] + delta[i] * Bs[i] * xs[i, p]
                y[i, p] = w.out_scale * state[i, p] @ Cs[i] + D[i, p] * xs[i, p]
        out.append(y.reshape(-1) @ f(w.W_O))
    return np.array(out)


# -- discretisation -----------------------------------------------------------------------


def test_discretize_limits():
    abar, bbar = discretize(np.array([-1.0]), np.array([2.0]), np.array([1e-9]))
    assert abs(abar[0] - 1) < 1e-8 and abs(bbar[0]) < 1e-8
    abar, _ = discretize(np.array([-1.0]), np.array([1.0]), np.array([math.log(2)]))
    assert math.isclose(abar[0], 0.5, rel_tol=1e-12)


def test_discretize_range():
    rng = np.random.default_rng(0)
    A = -rng.uniform(1e-3, 20, 10_000)
    delta = rng.uniform(1e-3, 5, 10_000)
    abar, _ = discretize(A, np.ones(10_000), delta)
    assert ((abar > 0) & (abar < 1)).all()


def test_discretize_rejects_nonpositive_delta():
    with pytest.raises(ValueError):
        discretize(np.array([-1.0]), np.array([1.0]), np.array([0.0]))


def test_delta_bias_and_gate_unit():
    assert math.isclose(math.log1p(math.exp(delta_bias_for(0.05))), 0.05, rel_tol=1e-12)
    silu = GATE_BIAS_UNIT / (1 + math.exp(-GATE_BIAS_UNIT))
    assert abs(silu - 1.0) < 1e-12


def test_s4d_real_init():
    assert s4d_real_A(2, 3, 4).tolist() == [-1, -2, -3, -1, -2, -3]
    assert s4d_real_A(1, 5, 2).tolist() == [-1, -2, -1, -2, -1]
    assert (_layer(0).A < 0).all()


# -- recurrence ---------------------------------------------------------------------------------


def test_scalar_hand_unrolled():
    ones = np.ones((1, 3, 1, 1))
    y = T.selective_scan(0.5 * ones, ones, ones, ones)
    assert np.allclose(y.data.reshape(-1), [1.0, 1.5, 1.75])


def test_memoryless_decay():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 4, 2, 3))
    b = rng.standard_normal((1, 4, 2, 5))
    c = rng.standard_normal((1, 4, 2, 5))
    y = T.selective_scan(np.zeros((1, 4, 2, 3)), b, x, c).data
    x2 = x.copy()
    x2[:, :2] = rng.standard_normal((1, 2, 2, 3))
    y2 = T.selective_scan(np.zeros((1, 4, 2, 3)), b, x2, c).data
    assert np.array_equal(y[:, 2:], y2[:, 2:])


def test_recurrent_matches_reference():
    w = _layer(2, d=8, h=4, h_kv=2, d_v=3, N=5)
    x = np.random.default_rng(2).standard_normal((9, 8))
    assert rel_err(ssm_scan_recurrent(w, x).data, _reference(w, x)) < 1e-5


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        ssm_scan_recurrent(_layer(0), np.zeros((3, 5)))


def test_shape_validation():
    w = _layer(0)
    with pytest.raises(ValueError):
        type(w)(**{**{k: getattr(w, k) for k in ("W_x", "W_B", "W_C", "W_delta", "b_delta", "A_log", "D", "W_O",
                                                 "h_kv", "d_v", "N")}, "h": 3})


# -- parallel scan -------------------------------------------------------------------------------


def test_combine_associative():
    rng = np.random.default_rng(3)
    for _ in range(200):
        p, q, r = [(rng.uniform(-1, 1), rng.standard_normal()) for _ in range(3)]
        left = combine(combine(r, q), p)
        right = combine(r, combine(q, p))
        assert abs(left[0] - right[0]) < 1e-6 and abs(left[1] - right[1]) < 1e-6


def test_associative_scan_single_element():
    a, b = associative_scan(np.array([[0.3]]), np.array([[2.0]]))
    assert a.tolist() == [[0.3]] and b.tolist() == [[2.0]]


def test_associative_scan_matches_loop():
    rng = np.random.default_rng(4)
    a = rng.uniform(0, 1, (2, 37))
    b = rng.standard_normal((2, 37))
    _, hs = associative_scan(a, b)
    h = np.zeros(2)
    for t in range(37):
        h = a[:, t] * h + b[:, t]
        assert np.allclose(hs[:, t], h)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 512))
def test_parallel_equals_recurrent(seed, length):
    w = _layer(seed, d=8, h=2, h_kv=1, d_v=4, N=4)
    x = np.random.default_rng(seed).standard_normal((length, 8))
    assert rel_err(ssm_scan_parallel(w, x).data, ssm_scan_recurrent(w, x).data) < 1e-5


def test_parallel_single_token():
    w = _layer(5)
    x = np.random.default_rng(5).standard_normal((1, 8))
    assert rel_err(ssm_scan_parallel(w, x).data, ssm_scan_recurrent(w, x).data) < 1e-6


# -- decoding ------------------------------------------------------------------------------------


@pytest.mark.parametrize("extras", [{}, {"gate": True, "conv_kernel": 3}])
def test_step_equals_scan(extras):
    w = _layer(6, d=8, h=4, h_kv=2, **extras)
    if extras:
        rng = np.random.default_rng(60)
        w.W_gate.data = rng.standard_normal(w.W_gate.shape).astype(np.float32) * 0.3
        w.conv.data = rng.standard_normal(w.conv.shape).astype(np.float32)
    x = np.random.default_rng(6).standard_normal((32, 8))
    state = SSMState.zeros(w)
    ys = []
    for t in range(32):
        y, state = mamba_step(w, state, x[t])
        ys.append(y.data)
    assert rel_err(np.stack(ys), ssm_scan_recurrent(w, x).data) < 1e-5


def test_state_bytes_constant():
    w = _layer(7, h=2, d_v=4, N=4)
    state = SSMState.zeros(w)
    x = np.random.default_rng(7).standard_normal(8)
    mamba_step(w, state, x)
    size = state.nbytes
    assert size == w.h * w.d_v * w.N * 4
    for _ in range(10_000):
        mamba_step(w, state, x)
    assert state.nbytes == size


def test_zero_input_decays_state():
    w = _layer(8)
    state = SSMState.zeros(w)
    rng = np.random.default_rng(8)
    for _ in range(3):
        mamba_step(w, state, rng.standard_normal(8))
    norms = []
    for _ in range(20):
        mamba_step(w, state, np.zeros(8))
        norms.append(np.linalg.norm(state.h))
    assert all(b < a for a, b in zip(norms, norms[1:]))
    # constant step size at zero input: contraction factor is at most max(abar)
    delta = math.log1p(math.exp(float(w.b_delta.data[0])))
    ratio = max(b / a for a, b in zip(norms, norms[1:]))
    assert ratio <= math.exp(-delta * 1.0) + 1e-6


def test_state_norm_bound_constant_delta():
    w = _layer(9, h=1, h_kv=1, d_v=2, N=3)
    w.W_delta.data[:] = 0  # constant step size
    rng = np.random.default_rng(9)
    x = rng.uniform(-1, 1, (400, 8))
    state = SSMState.zeros(w)
    delta = math.log1p(math.exp(float(w.b_delta.data[0])))
    max_abar = math.exp(-delta * float(np.exp(w.A_log.data).min()))
    xs = x.astype(np.float32) @ w.W_x.data
    bs = x.astype(np.float32) @ w.W_B.data
    bound = delta * np.abs(bs).max() * np.abs(xs).max() / (1 - max_abar)
    for t in range(400):
        mamba_step(w, state, x[t])
        assert np.abs(state.h).max() <= bound * (1 + 1e-5)


def test_step_shape_mismatch():
    with pytest.raises(ValueError):
        mamba_step(_layer(0), SSMState.zeros(_layer(0, d_v=3)), np.zeros(8))


def test_emulation_zero_input():
    w = _layer(10)
    assert not mamba_forward_emulation(w, np.zeros((5, 8))).data.any()


def test_gate_and_conv_start_as_identity():
    plain = _layer(11)
    extra = _layer(11, gate=True, conv_kernel=4)
    x = np.random.default_rng(11).standard_normal((10, 8))
    assert rel_err(ssm_scan_recurrent(extra, x).data, ssm_scan_recurrent(plain, x).data) < 1e-6

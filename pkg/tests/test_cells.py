import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from phased_lstm import cells
from phased_lstm import diffmath as dm
from phased_lstm.cells import CellState, SequencingError, TimeGateParams
from phased_lstm.diffmath import ContractError, DimensionError, Tape


def _arrays(rng, in_dim, hidden, scale=0.5, peepholes=True):
    names = cells.LSTM_MATRICES + cells.LSTM_BIASES + (cells.PEEPHOLES if peepholes else ())
    out = {}
    for name in names:
        if name.startswith("w_x"):
            shape = (in_dim, hidden)
        elif name.startswith("w_h"):
            shape = (hidden, hidden)
        else:
            shape = (hidden,)
        out[name] = rng.normal(0.0, scale, size=shape)
    return out


def _gate(tape, tau, s, r_on=0.05, alpha=0.001):
    return TimeGateParams(
        tape.const(np.asarray(tau, float)), tape.const(np.asarray(s, float)), tape.const(r_on), tape.const(alpha)
    )


def _scalar_lstm(a, x, c_prev, h_prev):
    """Eqs. of a peephole LSTM written out one unit at a time with math.*."""
    sig = lambda z: 1.0 / (1.0 + math.exp(-z))  # noqa: E731
    n = len(c_prev)
    c, h = [0.0] * n, [0.0] * n
    for j in range(n):

        def pre(g):
            acc = a["b_" + g][j]
            for k in range(len(x)):
                acc += x[k] * a["w_x" + g][k, j]
            for k in range(n):
                acc += h_prev[k] * a["w_h" + g][k, j]
            return acc

        i = sig(pre("i") + a["w_ci"][j] * c_prev[j])
        f = sig(pre("f") + a["w_cf"][j] * c_prev[j])
        c[j] = f * c_prev[j] + i * math.tanh(pre("c"))
        o = sig(pre("o") + a["w_co"][j] * c[j])
        h[j] = o * math.tanh(c[j])
    return np.array(c), np.array(h)


def _step(arrays, x, c, h, t=None, gate_args=None):
    tape = Tape()
    lstm, _ = cells.place_params(tape, arrays, trainable=set())
    state = CellState(tape.const(c), tape.const(h), np.full(x.shape[0], -np.inf))
    if t is None:
        return cells.lstm_step(tape.const(x), state, lstm)
    return cells.phased_lstm_step(tape.const(x), t, state, lstm, _gate(tape, *gate_args))


# ------------------------------------------------------------------ lstm_step


def test_zero_weights_half_gates():
    arrays = {k: np.zeros_like(v) for k, v in _arrays(np.random.default_rng(0), 2, 3).items()}
    v = np.array([[0.4, -1.2, 2.0]])
    out = _step(arrays, np.ones((1, 2)), v, np.zeros((1, 3)))
    np.testing.assert_allclose(out.c.value, 0.5 * v, rtol=0, atol=1e-15)
    np.testing.assert_allclose(out.h.value, 0.5 * np.tanh(0.5 * v), rtol=0, atol=1e-15)


def test_saturated_forget_gate_keeps_cell():
    arrays = {k: np.zeros_like(v) for k, v in _arrays(np.random.default_rng(0), 1, 2).items()}
    arrays["b_f"] = np.full(2, 30.0)
    c0 = np.array([[0.7, -0.3]])
    out = _step(arrays, np.zeros((1, 1)), c0, np.zeros((1, 2)))
    np.testing.assert_allclose(out.c.value, c0, rtol=0, atol=1e-9)


def test_lstm_step_matches_scalar_loop():
    rng = np.random.default_rng(11)
    arrays = _arrays(rng, 2, 3)
    x, c, h = rng.normal(size=(1, 2)), rng.normal(size=(1, 3)), rng.normal(size=(1, 3))
    out = _step(arrays, x, c, h)
    c_ref, h_ref = _scalar_lstm(arrays, x[0], c[0], h[0])
    np.testing.assert_allclose(out.c.value[0], c_ref, rtol=0, atol=1e-12)
    np.testing.assert_allclose(out.h.value[0], h_ref, rtol=0, atol=1e-12)


def test_lstm_step_shape_errors():
    arrays = _arrays(np.random.default_rng(0), 2, 3)
    with pytest.raises(DimensionError):
        _step(arrays, np.zeros((1, 3)), np.zeros((1, 3)), np.zeros((1, 3)))
    with pytest.raises(DimensionError):
        _step(arrays, np.zeros((1, 2)), np.zeros((1, 4)), np.zeros((1, 4)))
    bad = dict(arrays, w_hc=np.zeros((3, 2)))
    with pytest.raises(DimensionError):
        cells.place_params(Tape(), bad)


def test_peepholes_can_be_absent():
    rng = np.random.default_rng(1)
    arrays = _arrays(rng, 1, 2, peepholes=False)
    tape = Tape()
    lstm, gate = cells.place_params(tape, arrays, peepholes=False)
    assert not lstm.peepholes and gate is None
    with_zero = dict(arrays, w_ci=np.zeros(2), w_cf=np.zeros(2), w_co=np.zeros(2))
    x, c, h = rng.normal(size=(2, 1)), rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
    a = cells.lstm_step(tape.const(x), CellState(tape.const(c), tape.const(h), np.zeros(2)), lstm)
    b = _step(with_zero, x, c, h)
    np.testing.assert_array_equal(a.c.value, b.c.value)
    np.testing.assert_array_equal(a.h.value, b.h.value)


# ------------------------------------------------------------------ time gate


@pytest.mark.parametrize(
    "tau, s, t, r_on, alpha, phi, k",
    [
        (1.0, 0.0, 0.025, 0.05, 0.001, 0.025, 1.0),
        (1.0, 0.0, 0.5, 0.05, 0.001, 0.5, 0.0005),
        (1.0, 0.0, 0.0125, 0.05, 0.001, 0.0125, 0.5),
        (2.0, 0.5, 4.9, 0.05, 0.001, 0.2, 0.0002),
    ],
)
def test_gate_examples(tau, s, t, r_on, alpha, phi, k):
    p, kk, _ = cells.gate_values([t], [tau], [s], r_on, alpha)
    assert abs(p[0, 0] - phi) < 1e-12
    assert abs(kk[0, 0] - k) < 1e-12


def test_gate_branch_assignment_at_boundaries():
    r = 0.05
    phi, k, branch = cells.gate_values([0.0, r / 2, r, 0.9], [1.0], [0.0], r, 0.001)
    assert branch[:, 0].tolist() == [cells.RISE, cells.FALL, cells.LEAK, cells.LEAK]
    assert k[1, 0] == 1.0
    assert k[0, 0] == 0.0
    assert abs(k[2, 0] - 0.001 * r) < 1e-18


def test_floored_mod_before_shift():
    phi, _, _ = cells.gate_values([0.0], [2.0], [0.5], 0.05, 0.0)
    assert abs(phi[0, 0] - 0.75) < 1e-15


def test_time_gate_tape_matches_numpy():
    rng = np.random.default_rng(4)
    tau, s = rng.uniform(1, 5, 6), rng.uniform(0, 5, 6)
    t = np.sort(rng.uniform(0, 30, 9))
    k = cells.time_gate(t, _gate(Tape(), tau, s, 0.1, 0.01)).value
    np.testing.assert_array_equal(k, cells.gate_values(t, tau, s, 0.1, 0.01)[1])


@settings(max_examples=200, deadline=None)
@given(
    t=st.floats(-1e6, 1e6),
    tau=st.floats(0.01, 1e3),
    s=st.floats(-1e3, 1e3),
    r_on=st.floats(0.005, 1.0),
    alpha=st.floats(0.0, 1.0),
)
def test_gate_range_and_phase_interval(t, tau, s, r_on, alpha):
    assume(alpha <= r_on)
    phi, k, _ = cells.gate_values([t], [tau], [s], r_on, alpha)
    assert 0.0 <= phi[0, 0] < 1.0
    assert 0.0 <= k[0, 0] <= 1.0


@settings(max_examples=200, deadline=None)
@given(t=st.floats(-1e5, 1e5), tau=st.floats(0.05, 100.0), s=st.floats(-100.0, 100.0))
def test_gate_periodicity(t, tau, s):
    a = cells.gate_values([t], [tau], [s], 0.05, 0.001)
    b = cells.gate_values([t + tau], [tau], [s], 0.05, 0.001)
    # the wrap from phi~1 to phi~0 is a legitimate jump; compare circular phase distance
    d = abs(a[0][0, 0] - b[0][0, 0])
    assert min(d, 1.0 - d) < 1e-9
    if min(a[0][0, 0], b[0][0, 0]) > 1e-6 and max(a[0][0, 0], b[0][0, 0]) < 1 - 1e-6:
        assert abs(a[1][0, 0] - b[1][0, 0]) < 1e-9 * max(1.0, 2.0 / 0.05)


@settings(max_examples=100, deadline=None)
@given(r_on=st.floats(0.005, 1.0), alpha=st.floats(0.0, 0.01))
def test_gate_peak_and_continuity(r_on, alpha):
    _, k, _ = cells.gate_values([0.5 * r_on], [1.0], [0.0], r_on, alpha)
    assert k[0, 0] == 1.0
    eps = 1e-9
    _, k2, _ = cells.gate_values([0.5 * r_on - eps, 0.5 * r_on + eps], [1.0], [0.0], r_on, alpha)
    assert np.all(np.abs(k2 - 1.0) < 1e-6)


def test_gate_equals_one_only_at_peak():
    phi = np.linspace(0.0, 1.0, 100001)[:-1]
    _, k, _ = cells.gate_values(phi, [1.0], [0.0], 0.05, 0.001)
    ones = phi[k[:, 0] == 1.0]
    assert ones.size == 1 and abs(ones[0] - 0.025) < 1e-12


def test_gate_param_checks():
    tape = Tape()
    with pytest.raises(ContractError):
        _gate(tape, [-1.0], [0.0]).check()
    with pytest.raises(ContractError):
        _gate(tape, [1.0], [0.0], r_on=1.5).check()
    with pytest.raises(ContractError):
        _gate(tape, [1.0], [0.0], alpha=-0.1).check()
    with pytest.raises(DimensionError):
        _gate(tape, [1.0, 2.0], [0.0]).check()


# ------------------------------------------------------------ phased step


def test_phased_step_with_full_gate_equals_lstm():
    rng = np.random.default_rng(2)
    arrays = _arrays(rng, 1, 3)
    x, c, h = rng.normal(size=(2, 1)), rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    # dyadic tau and s so that every unit sits exactly on the peak
    tau = np.array([1.0, 2.0, 0.5])
    t = np.array([0.025, 0.025])
    plain = _step(arrays, x, c, h)
    phased = _step(arrays, x, c, h, t, (tau, t[0] - 0.025 * tau))
    assert np.all(cells.gate_values(t, tau, t[0] - 0.025 * tau, 0.05, 0.001)[1] == 1.0)
    np.testing.assert_array_equal(phased.c.value, plain.c.value)
    np.testing.assert_array_equal(phased.h.value, plain.h.value)


def test_phased_step_closed_gate_is_bit_exact():
    rng = np.random.default_rng(3)
    arrays = _arrays(rng, 1, 3)
    x, c, h = rng.normal(size=(1, 1)), rng.normal(size=(1, 3)), rng.normal(size=(1, 3))
    out = _step(arrays, x, c, h, [0.5], ([1.0, 1.0, 1.0], [0.0, 0.0, 0.0], 0.05, 0.0))
    assert np.array_equal(out.c.value, c) and np.array_equal(out.h.value, h)


def test_phased_step_half_gate_matches_scalar_oracle():
    rng = np.random.default_rng(5)
    arrays = _arrays(rng, 2, 3)
    x, c, h = rng.normal(size=(1, 2)), rng.normal(size=(1, 3)), rng.normal(size=(1, 3))
    out = _step(arrays, x, c, h, [0.0125], ([1.0] * 3, [0.0] * 3, 0.05, 0.0))
    c_new, h_new = _scalar_lstm(arrays, x[0], c[0], h[0])
    np.testing.assert_allclose(out.c.value[0], 0.5 * c_new + 0.5 * c[0], rtol=0, atol=1e-12)
    np.testing.assert_allclose(out.h.value[0], 0.5 * h_new + 0.5 * h[0], rtol=0, atol=1e-12)


def test_hidden_proposal_uses_proposed_cell():
    # with k = 0.5 the blended h must use tanh(c_tilde), not tanh of the blended cell
    rng = np.random.default_rng(6)
    arrays = _arrays(rng, 1, 2)
    x, c, h = rng.normal(size=(1, 1)), rng.normal(size=(1, 2)) * 3, rng.normal(size=(1, 2))
    out = _step(arrays, x, c, h, [0.0125], ([1.0] * 2, [0.0] * 2, 0.05, 0.0))
    plain = _step(arrays, x, c, h)
    np.testing.assert_allclose(out.h.value, 0.5 * plain.h.value + 0.5 * h, rtol=0, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), phi=st.floats(0.0, 0.999))
def test_blend_identity(seed, phi):
    rng = np.random.default_rng(seed)
    arrays = _arrays(rng, 1, 2)
    x, c, h = rng.normal(size=(1, 1)), rng.normal(size=(1, 2)), rng.normal(size=(1, 2))
    out = _step(arrays, x, c, h, [phi], ([1.0, 1.0], [0.0, 0.0], 0.05, 0.001))
    k = cells.gate_values([phi], [1.0, 1.0], [0.0, 0.0], 0.05, 0.001)[1]
    c_new, _ = _scalar_lstm(arrays, x[0], c[0], h[0])
    np.testing.assert_allclose(out.c.value - c, k * (c_new - c), rtol=0, atol=1e-12)


def test_decreasing_timestamp_names_sequence():
    rng = np.random.default_rng(0)
    arrays = _arrays(rng, 1, 2)
    tape = Tape()
    lstm, _ = cells.place_params(tape, arrays, trainable=set())
    state = CellState(tape.const(np.zeros((3, 2))), tape.const(np.zeros((3, 2))), np.array([0.0, 5.0, 1.0]))
    with pytest.raises(SequencingError, match="sequence 1"):
        cells.phased_lstm_step(tape.const(np.zeros((3, 1))), [1.0, 2.0, 3.0], state, lstm, _gate(tape, [1.0, 1.0], [0.0, 0.0]))


# ------------------------------------------------------- memory retention


@pytest.mark.parametrize(
    "eps, n, c0, expect",
    [(0.1, 0, 1.0, 1.0), (0.1, 10, 1.0, 0.34867844010000004)],
)
def test_memory_decay_examples(eps, n, c0, expect):
    assert abs(float(cells.memory_decay_closed_form(eps, n, c0)) - expect) < 1e-12


def test_memory_decay_matches_repeated_multiplication():
    c = 2.0
    for _ in range(500):
        c *= 0.99
    assert abs(float(cells.memory_decay_closed_form(0.01, 500, 2.0)) - c) < 1e-12


def test_memory_decay_domain():
    with pytest.raises(ContractError):
        cells.memory_decay_closed_form(0.0, 3, 1.0)
    with pytest.raises(ContractError):
        cells.memory_decay_closed_form(0.1, -1, 1.0)


def _decay_arrays(hidden, eps):
    a = {k: np.zeros_like(v) for k, v in _arrays(np.random.default_rng(0), 1, hidden).items()}
    a["b_f"] = np.full(hidden, math.log((1 - eps) / eps))  # sigmoid(b_f) = 1 - eps
    a["b_i"] = np.full(hidden, -800.0)  # input gate shut
    return a


def test_lstm_decay_matches_closed_form():
    eps, n = 0.01, 300
    arrays = _decay_arrays(3, eps)
    c0 = np.array([[1.0, -2.0, 0.5]])
    tape = Tape(recording=False)
    lstm, _ = cells.place_params(tape, arrays)
    state = CellState(tape.const(c0), tape.const(np.zeros((1, 3))), np.zeros(1))
    x = tape.const(np.zeros((1, 1)))
    for _ in range(n):
        state = cells.lstm_step(x, state, lstm)
    np.testing.assert_allclose(state.c.value, cells.memory_decay_closed_form(eps, n, c0), rtol=0, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 200))
def test_closed_phase_retention_property(seed, n):
    rng = np.random.default_rng(seed)
    arrays = _arrays(rng, 1, 3)
    tau = rng.uniform(1.0, 5.0, 3)
    s = rng.uniform(0.0, 5.0, 3)
    # event times whose phase lies inside [r_on, 1) for every unit
    times = []
    t = 0.0
    while len(times) < n:
        t += rng.uniform(0.01, 0.5)
        phi, _, branch = cells.gate_values([t], tau, s, 0.05, 0.0)
        if np.all(branch == cells.LEAK):
            times.append(t)
    tape = Tape(recording=False)
    lstm, gate = cells.place_params(tape, dict(arrays, tau=tau, s=s, r_on=np.array(0.05), alpha=np.array(0.0)))
    c0, h0 = rng.normal(size=(1, 3)), rng.normal(size=(1, 3))
    state = CellState(tape.const(c0), tape.const(h0), np.full(1, -np.inf))
    for t in times:
        state = cells.phased_lstm_step(tape.const(rng.normal(size=(1, 1))), [t], state, lstm, gate)
    assert np.array_equal(state.c.value, c0) and np.array_equal(state.h.value, h0)


def _closed_chain_grads(alpha):
    rng = np.random.default_rng(9)
    arrays = _arrays(rng, 1, 2)
    arrays.update(tau=np.array([1.0, 1.0]), s=np.array([0.0, 0.0]), r_on=np.array(0.05), alpha=np.array(alpha))
    tape = Tape()
    lstm, gate = cells.place_params(tape, arrays, trainable={"tau", "s"})
    c0 = tape.param("c0", rng.normal(size=(1, 2)))
    state = CellState(c0, tape.const(np.zeros((1, 2))), np.full(1, -np.inf))
    for t in (0.3, 1.4, 2.7, 3.5):
        state = cells.phased_lstm_step(tape.const(rng.normal(size=(1, 1))), [t], state, lstm, gate)
    return tape.backward(dm.sum_all(state.c))


def test_leak_carries_gradient_through_closed_steps():
    g = _closed_chain_grads(0.001)
    assert np.any(g["c0"] != 0) and np.any(g["tau"] != 0) and np.any(g["s"] != 0)


def test_no_leak_zero_timing_gradient_when_closed():
    g = _closed_chain_grads(0.0)
    assert np.all(g["tau"] == 0) and np.all(g["s"] == 0)
    np.testing.assert_array_equal(g["c0"], np.ones((1, 2)))


def test_param_names():
    assert "tau" in cells.param_names() and "w_ci" in cells.param_names()
    assert "tau" not in cells.param_names(phased=False)
    assert "w_ci" not in cells.param_names(peepholes=False)

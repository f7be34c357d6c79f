"""LSTM and Phased LSTM cells as tape operations.

Arrays are laid out ``[batch, hidden]``; input-to-gate products are
``x @ W`` with ``W`` shaped ``[in_dim, hidden]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import diffmath as dm
from .diffmath import ContractError, DimensionError, Tape, Var

RISE, FALL, LEAK = 0, 1, 2
BRANCH_NAMES = ("rise", "fall", "leak")

TAU_MIN = 0.01
R_ON_BOUNDS = (0.005, 1.0)

LSTM_MATRICES = ("w_xi", "w_xf", "w_xc", "w_xo", "w_hi", "w_hf", "w_hc", "w_ho")
LSTM_BIASES = ("b_i", "b_f", "b_c", "b_o")
PEEPHOLES = ("w_ci", "w_cf", "w_co")
GATE_PARAMS = ("tau", "s", "r_on", "alpha")


class SequencingError(ValueError):
    """Timestamps went backwards."""


@dataclass
class LstmParams:
    w_xi: Var
    w_xf: Var
    w_xc: Var
    w_xo: Var
    w_hi: Var
    w_hf: Var
    w_hc: Var
    w_ho: Var
    b_i: Var
    b_f: Var
    b_c: Var
    b_o: Var
    w_ci: Var | None = None
    w_cf: Var | None = None
    w_co: Var | None = None

    @property
    def hidden(self) -> int:
        return self.w_hi.shape[0]

    @property
    def in_dim(self) -> int:
        return self.w_xi.shape[0]

    @property
    def peepholes(self) -> bool:
        return self.w_ci is not None

    def check(self):
        n_in, n_h = self.in_dim, self.hidden
        for name in ("w_xi", "w_xf", "w_xc", "w_xo"):
            if getattr(self, name).shape != (n_in, n_h):
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {(n_in, n_h)}")
        for name in ("w_hi", "w_hf", "w_hc", "w_ho"):
            if getattr(self, name).shape != (n_h, n_h):
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {(n_h, n_h)}")
        for name in LSTM_BIASES + (PEEPHOLES if self.peepholes else ()):
            if getattr(self, name).shape != (n_h,):
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {(n_h,)}")


@dataclass
class TimeGateParams:
    tau: Var
    s: Var
    r_on: Var
    alpha: Var

    def check(self):
        tau = self.tau.value
        if tau.ndim != 1 or self.s.shape != tau.shape:
            raise DimensionError(f"tau {tau.shape} and s {self.s.shape} must be equal-length vectors")
        if not np.all(tau > 0):
            raise ContractError("tau must be positive")
        r_on, alpha = float(self.r_on.value), float(self.alpha.value)
        if not 0 < r_on <= 1:
            raise ContractError(f"r_on must lie in (0, 1], got {r_on}")
        if alpha < 0:
            raise ContractError(f"alpha must be non-negative, got {alpha}")


@dataclass
class CellState:
    c: Var
    h: Var
    t_prev: np.ndarray

    @classmethod
    def zeros(cls, tape: Tape, batch: int, hidden: int) -> "CellState":
        z = np.zeros((batch, hidden))
        return cls(tape.const(z), tape.const(z), np.full(batch, -np.inf))


def place_params(
    tape: Tape, arrays: Mapping[str, np.ndarray], trainable=None, peepholes: bool = True
) -> tuple[LstmParams, TimeGateParams | None]:
    """Put named arrays on ``tape``; names in ``trainable`` become parameters.

    ``trainable=None`` makes every array trainable.  Gate parameters are only
    placed when ``tau`` is present.
    """

    def put(name):
        if trainable is None or name in trainable:
            return tape.param(name, arrays[name])
        return tape.const(arrays[name])

    names = LSTM_MATRICES + LSTM_BIASES + (PEEPHOLES if peepholes else ())
    lstm = LstmParams(**{n: put(n) for n in names})
    lstm.check()
    gate = None
    if "tau" in arrays:
        gate = TimeGateParams(**{n: put(n) for n in GATE_PARAMS})
        gate.check()
        if gate.tau.shape != (lstm.hidden,):
            raise DimensionError(f"tau has shape {gate.tau.shape}, expected {(lstm.hidden,)}")
    return lstm, gate


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_lstm_arrays(in_dim: int, hidden: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Glorot-uniform matrices, zero biases and zero peepholes."""
    out = {}
    for name in LSTM_MATRICES:
        fan_in = in_dim if name.startswith("w_x") else hidden
        out[name] = glorot_uniform(rng, fan_in, hidden)
    for name in LSTM_BIASES + PEEPHOLES:
        out[name] = np.zeros(hidden)
    return out


# ---------------------------------------------------------------- time gate


def _phase(d, tau):
    q = d / tau
    phi = q - np.floor(q)
    # rounding can land exactly on 1.0 for tiny negative offsets
    phi[phi >= 1.0] = 0.0
    return phi


def _branches(phi, r_on):
    # half-open intervals [0, r/2), [r/2, r), [r, 1)
    rise = phi < 0.5 * r_on
    fall = ~rise & (phi < r_on)
    return rise, fall


def _openness(phi, r_on, alpha):
    # min(u, 2 - u) is the rising branch below r_on/2 and the falling one above;
    # (2 phi) / r_on rather than phi * (2 / r_on) keeps the peak at exactly 1
    u = (2.0 * phi) / r_on
    return np.where(phi < r_on, np.minimum(u, 2.0 - u), alpha * phi)


def gate_values(t, tau, s, r_on: float, alpha: float):
    """Plain-numpy time gate.

    ``t`` has shape ``[n]``; ``tau`` and ``s`` have shape ``[hidden]``.
    Returns ``(phi, k, branch)``, each ``[n, hidden]``; ``branch`` holds
    ``RISE``, ``FALL`` or ``LEAK``.
    """
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    tau = np.asarray(tau, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    phi = _phase(t[:, None] - s[None, :], tau)
    rise, fall = _branches(phi, r_on)
    k = _openness(phi, r_on, alpha)
    branch = np.full(phi.shape, LEAK, dtype=np.int8)
    branch[fall] = FALL
    branch[rise] = RISE
    return phi, k, branch


def time_phase(t, tau: Var, s: Var) -> Var:
    """Phase ``((t - s) mod tau) / tau`` for every (time, unit) pair.

    ``t`` may have any shape; a trailing unit axis is appended.  The floor
    inside the modulus is treated as locally constant.
    """
    t = np.asarray(t, dtype=np.float64)
    tv, sv = tau.value, s.value
    d = t[..., None] - sv
    phi = _phase(d, tv)
    n = tv.shape[-1]

    def vjp(g):
        g_tau = -(g * d).reshape(-1, n).sum(axis=0) / (tv * tv) if tau.requires_grad else None
        g_s = -g.reshape(-1, n).sum(axis=0) / tv if s.requires_grad else None
        return g_tau, g_s

    return tau.tape.record(phi, (tau, s), vjp, "time_phase")


def gate_from_phase(phi: Var, r_on: Var, alpha: Var) -> Var:
    """Piecewise-linear openness: rise, fall, then a leak of slope alpha."""
    p = phi.value
    r, a = float(r_on.value), float(alpha.value)
    k = _openness(p, r, a).astype(phi.tape.dtype, copy=False)

    def vjp(g):
        rise, fall = _branches(p, r)
        leak = ~(rise | fall)
        slope = np.where(rise, 2.0 / r, np.where(fall, -2.0 / r, a))
        g_phi = g * slope if phi.requires_grad else None
        g_r = None
        if r_on.requires_grad:
            dk_dr = np.where(rise, -2.0 * p / (r * r), np.where(fall, 2.0 * p / (r * r), 0.0))
            g_r = np.array((g * dk_dr).sum())
        g_a = np.array((g * p * leak).sum()) if alpha.requires_grad else None
        return g_phi, g_r, g_a

    return phi.tape.record(k, (phi, r_on, alpha), vjp, "time_gate")


def time_gate(t, gate: TimeGateParams) -> Var:
    """Openness ``k`` with shape ``[len(t), hidden]``."""
    return gate_from_phase(time_phase(t, gate.tau, gate.s), gate.r_on, gate.alpha)


# --------------------------------------------------------------- lstm cell


@dataclass
class Prepared:
    """Per-batch-size fused weights, built once and reused across steps."""

    wx: Var
    wh: Var
    bias: Var
    peep_i: Var | None
    peep_f: Var | None
    peep_o: Var | None
    hidden: int


def prepare(params: LstmParams, batch: int) -> Prepared:
    wx = dm.concat_cols([params.w_xi, params.w_xf, params.w_xc, params.w_xo])
    wh = dm.concat_cols([params.w_hi, params.w_hf, params.w_hc, params.w_ho])
    bias = dm.concat_cols([params.b_i, params.b_f, params.b_c, params.b_o])
    peeps = [None, None, None]
    if params.peepholes:
        peeps = [dm.broadcast_rows(w, batch) for w in (params.w_ci, params.w_cf, params.w_co)]
    return Prepared(wx, wh, bias, *peeps, hidden=params.hidden)


def proposal(z: Var, c_prev: Var, prep: Prepared) -> tuple[Var, Var]:
    """Cell and hidden values of one LSTM update from gate pre-activations.

    ``z`` is ``x W_x + h W_h + b`` with the four gates side by side in the
    order input, forget, candidate, output.
    """
    n = prep.hidden
    zi, zf = dm.cols(z, 0, n), dm.cols(z, n, 2 * n)
    zc, zo = dm.cols(z, 2 * n, 3 * n), dm.cols(z, 3 * n, 4 * n)
    if prep.peep_i is not None:
        zi = dm.add(zi, dm.mul(prep.peep_i, c_prev))
        zf = dm.add(zf, dm.mul(prep.peep_f, c_prev))
    i = dm.sigmoid(zi)
    f = dm.sigmoid(zf)
    c_new = dm.add(dm.mul(f, c_prev), dm.mul(i, dm.tanh(zc)))
    if prep.peep_o is not None:
        zo = dm.add(zo, dm.mul(prep.peep_o, c_new))
    h_new = dm.mul(dm.sigmoid(zo), dm.tanh(c_new))
    return c_new, h_new


def _preactivation(x: Var, h: Var, prep: Prepared) -> Var:
    batch = x.shape[0]
    xz = dm.matmul(x, prep.wx)
    return dm.add(dm.add(xz, dm.matmul(h, prep.wh)), dm.broadcast_rows(prep.bias, batch))


def _check_step(x: Var, state: CellState, params: LstmParams):
    if x.value.ndim != 2 or x.shape[1] != params.in_dim:
        raise DimensionError(f"input has shape {x.shape}, expected [batch, {params.in_dim}]")
    expect = (x.shape[0], params.hidden)
    if state.c.shape != expect or state.h.shape != expect:
        raise DimensionError(f"state shapes {state.c.shape}/{state.h.shape}, expected {expect}")


def lstm_step(x: Var, state: CellState, params: LstmParams) -> CellState:
    """One standard LSTM update (with peepholes when present)."""
    _check_step(x, state, params)
    prep = prepare(params, x.shape[0])
    c, h = proposal(_preactivation(x, state.h, prep), state.c, prep)
    return CellState(c, h, state.t_prev)


def phased_lstm_step(x: Var, t, state: CellState, params: LstmParams, gate: TimeGateParams) -> CellState:
    """One Phased LSTM update at event times ``t`` (one per batch row).

    The LSTM proposal is computed at the event time and mixed with the
    previous state through the time gate.  The hidden proposal uses the
    proposed cell value.
    """
    _check_step(x, state, params)
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    if t.shape != (x.shape[0],):
        raise DimensionError(f"timestamps {t.shape} do not match batch {x.shape[0]}")
    back = np.nonzero(t < state.t_prev)[0]
    if back.size:
        raise SequencingError(f"timestamp decreased for sequence {int(back[0])}")
    prep = prepare(params, x.shape[0])
    c_new, h_new = proposal(_preactivation(x, state.h, prep), state.c, prep)
    k = time_gate(t, gate)
    return CellState(dm.blend(k, c_new, state.c), dm.blend(k, h_new, state.h), t)


def memory_decay_closed_form(epsilon: float, n: int, c0):
    """Cell value after ``n`` steps of a forget gate pinned at ``1 - epsilon``."""
    if not 0 < epsilon < 1:
        raise ContractError("epsilon must lie in (0, 1)")
    if n < 0:
        raise ContractError("n must be non-negative")
    return (1.0 - epsilon) ** n * np.asarray(c0, dtype=np.float64)


def param_names(peepholes: bool = True, phased: bool = True) -> tuple[str, ...]:
    names = LSTM_MATRICES + LSTM_BIASES + (PEEPHOLES if peepholes else ())
    return names + (GATE_PARAMS if phased else ())


__all__ = [
    "RISE",
    "FALL",
    "LEAK",
    "BRANCH_NAMES",
    "SequencingError",
    "LstmParams",
    "TimeGateParams",
    "CellState",
    "place_params",
    "init_lstm_arrays",
    "gate_values",
    "time_phase",
    "gate_from_phase",
    "time_gate",
    "prepare",
    "proposal",
    "lstm_step",
    "phased_lstm_step",
    "memory_decay_closed_form",
    "param_names",
]

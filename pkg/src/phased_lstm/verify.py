"""Finite-difference verification of every tape op and of whole models."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import cells, scan
from . import diffmath as dm
from .diffmath import Tape, Var
from .network import ModelConfig, Model, batch_loss, forward_batch, init_model, make_batch
from .tasks import EventSequence

BOUNDARY_MARGIN = 1e-3


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """Worst absolute difference scaled by the larger gradient magnitude."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(b), initial=0.0)), floor)
    return float(np.max(np.abs(a - b), initial=0.0)) / scale


@dataclass
class CheckReport:
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)

    def add(self, group: str, err: float):
        self.errors[group] = max(err, self.errors.get(group, 0.0))

    @property
    def failures(self) -> list[str]:
        return [g for g, e in self.errors.items() if not e < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def worst(self) -> float:
        return max(self.errors.values(), default=0.0)

    def lines(self) -> list[str]:
        return [f"{'FAIL' if not e < self.tolerance else 'ok  '} {g:<24s} {e:.3e}" for g, e in self.errors.items()]


def _probe(out: Var, weights: np.ndarray) -> Var:
    """Scalar ``sum(out * weights)`` recorded outside the op catalogue."""
    w = np.asarray(weights, dtype=np.float64).reshape(out.shape)
    return out.tape.record(np.array(float((out.value * w).sum())), (out,), lambda g: (g * w,), "probe")


# ------------------------------------------------------------ op catalogue


def _away_from(x: np.ndarray, points, margin: float) -> bool:
    return all(np.all(np.abs(x - p) >= margin) for p in points)


def _case_matmul(rng, d):
    return {"a": rng.normal(size=(d[0], d[1])), "b": rng.normal(size=(d[1], d[2]))}, lambda v: dm.matmul(v["a"], v["b"])


def _binary(op):
    def case(rng, d):
        return {"a": rng.normal(size=(d[0], d[1])), "b": rng.normal(size=(d[0], d[1]))}, lambda v: op(v["a"], v["b"])

    return case


def _unary(op, scale=1.5):
    def case(rng, d):
        return {"a": rng.normal(0, scale, size=(d[0], d[1]))}, lambda v: op(v["a"])

    return case


def _case_scale(rng, d):
    k = float(rng.normal())
    return {"a": rng.normal(size=(d[0], d[1]))}, lambda v: dm.scale(v["a"], k)


def _case_sum_all(rng, d):
    return {"a": rng.normal(size=(d[0], d[1]))}, lambda v: dm.sum_all(v["a"])


def _case_rows(rng, d):
    m = d[0] + 1
    lo = int(rng.integers(0, m))
    hi = int(rng.integers(lo, m + 1))
    return {"a": rng.normal(size=(m, d[1]))}, lambda v: dm.rows(v["a"], lo, hi)


def _case_cols(rng, d):
    m = d[1] + 1
    lo = int(rng.integers(0, m))
    hi = int(rng.integers(lo, m + 1))
    return {"a": rng.normal(size=(d[0], m))}, lambda v: dm.cols(v["a"], lo, hi)


def _case_concat(rng, d):
    widths = rng.integers(1, 4, size=int(rng.integers(1, 4)))
    params = {f"p{i}": rng.normal(size=(d[0], w)) for i, w in enumerate(widths)}
    return params, lambda v: dm.concat_cols([v[f"p{i}"] for i in range(len(widths))])


def _case_broadcast(rng, d):
    return {"a": rng.normal(size=d[1])}, lambda v: dm.broadcast_rows(v["a"], d[0])


def _case_blend(rng, d):
    shape = (d[0], d[1])
    params = {"k": rng.uniform(0.05, 0.95, size=shape), "new": rng.normal(size=shape), "old": rng.normal(size=shape)}
    return params, lambda v: dm.blend(v["k"], v["new"], v["old"])


def _case_cross_entropy(rng, d):
    labels = rng.integers(0, d[1] + 1, size=d[0])
    return {"z": rng.normal(size=(d[0], d[1] + 1))}, lambda v: dm.cross_entropy(v["z"], labels)


def _case_time_phase(rng, d):
    while True:
        tau = rng.uniform(0.5, 3.0, size=d[1])
        s = rng.uniform(-1.0, 3.0, size=d[1])
        t = np.sort(rng.uniform(0.0, 10.0, size=d[0]))
        phi = cells._phase(t[:, None] - s, tau)
        if _away_from(phi, (0.0, 1.0), 0.01):
            break
    return {"tau": tau, "s": s}, lambda v: cells.time_phase(t, v["tau"], v["s"])


def _case_time_gate(rng, d):
    r_on = float(rng.uniform(0.05, 0.5))
    while True:
        phi = rng.uniform(0.0, 1.0, size=(d[0], d[1]))
        if _away_from(phi, (0.0, r_on / 2, r_on, 1.0), 0.01 * r_on):
            break
    params = {"phi": phi, "r_on": np.array(r_on), "alpha": np.array(rng.uniform(0.0, 0.1))}
    return params, lambda v: cells.gate_from_phase(v["phi"], v["r_on"], v["alpha"])


def _case_scan(rng, d):
    steps, batch, n, n_in = d[0] + 1, d[1], d[2], 2
    x = rng.normal(size=(steps, batch, n_in))
    mask = np.ones((steps, batch), dtype=bool)
    lengths = rng.integers(1, steps + 1, size=batch)
    for b, length in enumerate(lengths):
        mask[length:, b] = False
    params = {
        "wx": rng.normal(0, 0.7, size=(n_in, 4 * n)),
        "wh": rng.normal(0, 0.7, size=(n, 4 * n)),
        "b": rng.normal(0, 0.5, size=4 * n),
        "k": rng.uniform(0.0, 1.0, size=(steps * batch, n)),
        "w_ci": rng.normal(0, 0.5, size=n),
        "w_cf": rng.normal(0, 0.5, size=n),
        "w_co": rng.normal(0, 0.5, size=n),
    }

    def build(v):
        return scan.recurrent_scan(x, mask, v["wx"], v["wh"], v["b"], v["k"], (v["w_ci"], v["w_cf"], v["w_co"]))

    return params, build


OP_CASES: dict[str, Callable] = {
    "matmul": _case_matmul,
    "add": _binary(dm.add),
    "sub": _binary(dm.sub),
    "mul": _binary(dm.mul),
    "scale": _case_scale,
    "sigmoid": _unary(dm.sigmoid),
    "tanh": _unary(dm.tanh),
    "sum_all": _case_sum_all,
    "rows": _case_rows,
    "cols": _case_cols,
    "concat_cols": _case_concat,
    "broadcast_rows": _case_broadcast,
    "blend": _case_blend,
    "cross_entropy": _case_cross_entropy,
    "time_phase": _case_time_phase,
    "time_gate": _case_time_gate,
    "recurrent_scan": _case_scan,
}


def check_op(name: str, rng: np.random.Generator, epsilon: float = 1e-5, dims=None) -> float:
    """Worst relative error between tape and central differences for one random instance."""
    dims = tuple(int(x) for x in rng.integers(1, 5, size=3)) if dims is None else dims
    params, build = OP_CASES[name](rng, dims)
    weights = None

    def run(values, tape):
        nonlocal weights
        vars_ = {k: tape.param(k, a) for k, a in values.items()}
        out = build(vars_)
        if weights is None:
            weights = rng.normal(size=out.value.shape)
        return _probe(out, weights)

    tape = Tape()
    loss = run(params, tape)
    grads = tape.backward(loss)
    fd = dm.finite_difference_grad(lambda w: float(run(w, Tape(recording=False)).value), params, epsilon)
    return max(relative_error(grads[k], fd[k]) for k in params)


def check_ops(trials: int = 3, seed: int = 0, tolerance: float = 1e-6, epsilon: float = 1e-5, ops=None) -> CheckReport:
    rng = np.random.default_rng(seed)
    report = CheckReport(tolerance)
    for name in ops or OP_CASES:
        for _ in range(trials):
            report.add(name, check_op(name, rng, epsilon))
    return report


# --------------------------------------------------------- model-level check


def boundary_safe_setup(cfg: ModelConfig, seed: int, batch: int = 2, events: int = 5):
    """A model and batch where every phase sits at least 1e-3 from a gate kink.

    Weights are drawn larger than at initialisation so that every gradient
    is clearly non-zero.  For phased models each unit gets one event in the
    rising or the falling half of its open phase.
    """
    rng = np.random.default_rng(seed)
    model = init_model(cfg, seed)
    for name in cells.LSTM_MATRICES + cells.LSTM_BIASES + cells.PEEPHOLES + ("w_out", "b_out"):
        if name in model.params:
            model.params[name] = rng.normal(0.0, 0.6, size=model.params[name].shape)
    for _ in range(1000):
        gaps = rng.uniform(0.5, 2.0, size=(batch, events))
        times = np.cumsum(gaps, axis=1)
        if not cfg.phased:
            break
        r_on = cfg.r_on
        tau = rng.uniform(1.0, 3.0, size=cfg.hidden)
        phi_target = np.where(np.arange(cfg.hidden) % 2 == 0, rng.uniform(0.15, 0.35, cfg.hidden), rng.uniform(0.65, 0.85, cfg.hidden)) * r_on
        t_pick = times[np.arange(cfg.hidden) % batch, np.arange(cfg.hidden) % events]
        s = t_pick - phi_target * tau
        phi = cells._phase(times.reshape(-1)[:, None] - s, tau)
        if _away_from(phi, (0.0, r_on / 2, r_on, 1.0), BOUNDARY_MARGIN):
            model.params["tau"], model.params["s"] = tau, s
            break
    else:  # pragma: no cover
        raise RuntimeError("could not place phases away from the gate kinks")
    seqs = []
    for b in range(batch):
        values = rng.normal(size=(events, cfg.in_dim))
        if cfg.loss_kind == "cross_entropy":
            seqs.append(EventSequence(times[b], values, label=b % cfg.out_dim))
        else:
            seqs.append(EventSequence(times[b], values, target=float(rng.normal())))
    return model, make_batch(seqs, cfg)


def check_model(
    cfg: ModelConfig,
    seed: int = 0,
    batch: int = 2,
    events: int = 5,
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    engine: str = "scan",
    train_r_on: bool = False,
) -> CheckReport:
    """End-to-end gradient check of every trainable parameter of a small model."""
    model, b = boundary_safe_setup(cfg, seed, batch, events)
    trainable = model.default_trainable(train_r_on=train_r_on)

    def loss_of(params: dict, tape: Tape) -> Var:
        m = Model(cfg, params, model.seed)
        res = forward_batch(m, b, tape, trainable=trainable, engine=engine)
        return batch_loss(m, b, res.output)

    tape = Tape()
    grads = tape.backward(loss_of(model.params, tape))
    names = sorted(trainable)
    fd = dm.finite_difference_grad(
        lambda w: float(loss_of(dict(w), Tape(recording=False)).value), model.params, epsilon, names=names
    )
    report = CheckReport(tolerance)
    for name in names:
        report.add(name, relative_error(grads[name], fd[name]))
    return report

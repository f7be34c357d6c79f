"""Single recurrent layer plus a linear readout of the final hidden state."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import cells
from . import diffmath as dm
from . import scan
from .cells import SequencingError
from .diffmath import ContractError, DimensionError, Tape, Var
from .tasks import EventSequence

WEIGHTS_FORMAT = "phased-lstm-weights"
WEIGHTS_VERSION = 1


@dataclass
class ModelConfig:
    cell_kind: str = "phased_lstm"
    in_dim: int = 1
    hidden: int = 32
    out_dim: int = 2
    time_as_feature: bool = False
    loss_kind: str = "cross_entropy"
    tau_init_range: tuple[float, float] = (0.0, 3.0)
    peepholes: bool = True
    r_on: float = 0.05
    alpha: float = 0.001
    biases: dict = field(default_factory=dict)

    def __post_init__(self):
        self.tau_init_range = tuple(float(x) for x in self.tau_init_range)
        if self.cell_kind not in ("lstm", "phased_lstm"):
            raise ValueError(f"unknown cell_kind {self.cell_kind!r}")
        if self.loss_kind not in ("cross_entropy", "mse"):
            raise ValueError(f"unknown loss_kind {self.loss_kind!r}")
        if min(self.in_dim, self.hidden, self.out_dim) < 1:
            raise ValueError("in_dim, hidden and out_dim must be positive")
        a, b = self.tau_init_range
        if a > b:
            raise ValueError("tau_init_range must satisfy a <= b")
        if not 0 < self.r_on <= 1 or self.alpha < 0:
            raise ValueError("need 0 < r_on <= 1 and alpha >= 0")
        unknown = set(self.biases) - set(cells.LSTM_BIASES)
        if unknown:
            raise ValueError(f"unknown bias names {sorted(unknown)}")

    @property
    def phased(self) -> bool:
        return self.cell_kind == "phased_lstm"

    @property
    def input_width(self) -> int:
        """Width of the input vector actually fed to the cell."""
        return self.in_dim + (1 if self.time_as_feature else 0)


@dataclass
class Model:
    cfg: ModelConfig
    params: dict[str, np.ndarray]
    seed: int
    epochs_completed: int = 0

    def copy(self) -> "Model":
        return Model(self.cfg, {k: v.copy() for k, v in self.params.items()}, self.seed, self.epochs_completed)

    def default_trainable(self, train_tau: bool = True, train_s: bool = True, train_r_on: bool = False) -> set[str]:
        names = set(cells.LSTM_MATRICES + cells.LSTM_BIASES + ("w_out", "b_out"))
        if self.cfg.peepholes:
            names |= set(cells.PEEPHOLES)
        if self.cfg.phased:
            if train_tau:
                names.add("tau")
            if train_s:
                names.add("s")
            if train_r_on:
                names.add("r_on")
        return names


def init_model(cfg: ModelConfig, seed: int) -> Model:
    """Fresh model; identical seeds give identical arrays.

    Cell weights, gate timing and readout each draw from their own child
    stream, so a plain LSTM and a Phased LSTM built from one seed share their
    LSTM and readout weights.
    """
    cell_rng, gate_rng, out_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
    params = cells.init_lstm_arrays(cfg.input_width, cfg.hidden, cell_rng)
    for name, value in cfg.biases.items():
        params[name] = np.full(cfg.hidden, float(value))
    if cfg.phased:
        a, b = cfg.tau_init_range
        tau = np.exp(gate_rng.uniform(a, b, size=cfg.hidden)) if a < b else np.full(cfg.hidden, np.exp(a))
        params["tau"] = tau
        params["s"] = gate_rng.uniform(0.0, 1.0, size=cfg.hidden) * tau
        params["r_on"] = np.array(cfg.r_on)
        params["alpha"] = np.array(cfg.alpha)
    params["w_out"] = cells.glorot_uniform(out_rng, cfg.hidden, cfg.out_dim)
    params["b_out"] = np.zeros(cfg.out_dim)
    return Model(cfg, params, seed)


# ------------------------------------------------------------------ batches


@dataclass
class Batch:
    """Right-padded batch: arrays are ``[steps, batch, ...]``."""

    x: np.ndarray
    t: np.ndarray
    mask: np.ndarray
    lengths: np.ndarray
    labels: np.ndarray | None
    targets: np.ndarray | None

    @property
    def size(self) -> int:
        return self.t.shape[1]


def make_batch(seqs: Sequence[EventSequence], cfg: ModelConfig) -> Batch:
    if not seqs:
        raise ContractError("empty batch")
    lengths = np.array([len(s) for s in seqs])
    steps, b = int(lengths.max()), len(seqs)
    x = np.zeros((steps, b, cfg.input_width))
    t = np.zeros((steps, b))
    mask = np.zeros((steps, b), dtype=bool)
    for j, s in enumerate(seqs):
        if s.n_features != cfg.in_dim:
            raise DimensionError(f"sequence {j} has {s.n_features} features, model expects {cfg.in_dim}")
        n = len(s)
        x[:n, j, : cfg.in_dim] = s.values
        if cfg.time_as_feature:
            x[:n, j, cfg.in_dim] = s.times
        t[:n, j] = s.times
        t[n:, j] = s.times[-1]
        mask[:n, j] = True
    labels = targets = None
    if seqs[0].label is not None:
        labels = np.array([s.label for s in seqs], dtype=np.intp)
    if seqs[0].target is not None:
        targets = np.array([[s.target] for s in seqs], dtype=np.float64)
        if targets.shape[1] != cfg.out_dim:
            raise DimensionError(f"targets have width {targets.shape[1]}, model outputs {cfg.out_dim}")
    return Batch(x, t, mask, lengths, labels, targets)


def check_increasing(t: np.ndarray, mask: np.ndarray):
    """Raise ``SequencingError`` unless valid timestamps strictly increase."""
    both = mask[1:] & mask[:-1]
    bad = both & (np.diff(t, axis=0) <= 0)
    if bad.any():
        seq = int(np.nonzero(bad.any(axis=0))[0][0])
        raise SequencingError(f"timestamps not strictly increasing in sequence {seq}")


@dataclass
class ForwardResult:
    output: Var
    updates: np.ndarray
    open_steps: np.ndarray


def place(model: Model, tape: Tape, trainable=None, alpha: float | None = None):
    """Put model arrays on ``tape``.  ``alpha`` overrides the stored leak."""
    arrays = model.params
    if alpha is not None and model.cfg.phased:
        arrays = dict(arrays, alpha=np.array(float(alpha)))
    lstm, gate = cells.place_params(tape, arrays, trainable, peepholes=model.cfg.peepholes)
    put = (lambda n: tape.param(n, arrays[n])) if trainable is None else (
        lambda n: tape.param(n, arrays[n]) if n in trainable else tape.const(arrays[n])
    )
    return lstm, gate, put("w_out"), put("b_out")


def forward_batch(
    model: Model,
    batch: Batch,
    tape: Tape,
    trainable=None,
    alpha: float | None = None,
    keep_steps: bool = False,
    engine: str = "scan",
) -> ForwardResult:
    """Run every sequence of ``batch`` from a zero state and read out the last ``h``.

    ``updates`` counts open-phase steps per sequence and unit (``[batch,
    hidden]``); with ``keep_steps`` the per-step ledger ``[steps, batch,
    hidden]`` is returned as ``open_steps``.  A dense LSTM counts every valid
    step as an update.

    ``engine="scan"`` runs the recurrence as one compiled tape node;
    ``engine="tape"`` builds every step from primitive tape ops.  Both give
    the same numbers to rounding.
    """
    if engine not in ("scan", "tape"):
        raise ContractError(f"unknown engine {engine!r}")
    check_increasing(batch.t, batch.mask)
    lstm, gate, w_out, b_out = place(model, tape, trainable, alpha)
    steps, b = batch.t.shape
    n_h = model.cfg.hidden
    phi = None
    if gate is not None:
        # step-major rows: row j*b + i is event j of sequence i
        phi = cells.time_phase(batch.t.reshape(-1), gate.tau, gate.s)
        opened = (phi.value.reshape(steps, b, n_h) < float(gate.r_on.value)) & batch.mask[:, :, None]
    else:
        opened = np.broadcast_to(batch.mask[:, :, None], (steps, b, n_h))
    if engine == "scan":
        h = _run_scan(lstm, gate, phi, batch, tape)
    else:
        h = _run_steps(lstm, gate, phi, batch, tape)
    out = dm.add(dm.matmul(h, w_out), dm.broadcast_rows(b_out, b))
    return ForwardResult(out, opened.sum(axis=0), np.array(opened) if keep_steps else None)


def _run_scan(lstm, gate, phi, batch: Batch, tape: Tape) -> Var:
    prep = cells.prepare(lstm, 1)
    k = None if gate is None else cells.gate_from_phase(phi, gate.r_on, gate.alpha)
    peeps = (lstm.w_ci, lstm.w_cf, lstm.w_co) if lstm.peepholes else None
    ch = scan.recurrent_scan(batch.x, batch.mask, prep.wx, prep.wh, prep.bias, k, peeps)
    return dm.cols(ch, lstm.hidden, 2 * lstm.hidden)


def _run_steps(lstm, gate, phi, batch: Batch, tape: Tape) -> Var:
    """Reference path: one primitive-op proposal and blend per event."""
    steps, b = batch.t.shape
    n_h = lstm.hidden
    prep = cells.prepare(lstm, b)
    bias = dm.broadcast_rows(prep.bias, b)
    k_all = None if gate is None else cells.gate_from_phase(phi, gate.r_on, gate.alpha)
    c = tape.const(np.zeros((b, n_h)))
    h = c
    for j in range(steps):
        m = batch.mask[j]
        mask = None if m.all() else tape.const(np.repeat(m[:, None].astype(np.float64), n_h, axis=1))
        k = mask if k_all is None else dm.rows(k_all, j * b, (j + 1) * b)
        if k_all is not None and mask is not None:
            k = dm.mul(k, mask)
        z = dm.add(dm.add(dm.matmul(tape.const(batch.x[j]), prep.wx), dm.matmul(h, prep.wh)), bias)
        c_new, h_new = cells.proposal(z, c, prep)
        if k is None:
            c, h = c_new, h_new
        else:
            c, h = dm.blend(k, c_new, c), dm.blend(k, h_new, h)
    return h


def forward_sequence(model: Model, seq: EventSequence, tape: Tape | None = None, alpha: float | None = None):
    """Output vector and per-step update ledger (``[steps, hidden]`` bools) for one sequence."""
    tape = tape if tape is not None else Tape(recording=False)
    res = forward_batch(model, make_batch([seq], model.cfg), tape, alpha=alpha, keep_steps=True)
    return res.output, res.open_steps[:, 0, :]


def loss(output: Var, target, loss_kind: str) -> Var:
    """Mean cross-entropy over rows, or half the mean squared error."""
    if loss_kind == "cross_entropy":
        return dm.cross_entropy(output, target)
    if loss_kind == "mse":
        tv = np.asarray(target, dtype=output.value.dtype).reshape(output.shape)
        d = dm.sub(output, output.tape.const(tv))
        return dm.scale(dm.sum_all(dm.mul(d, d)), 0.5 / d.value.size)
    raise ContractError(f"unknown loss kind {loss_kind!r}")


def batch_loss(model: Model, batch: Batch, output: Var) -> Var:
    target = batch.labels if model.cfg.loss_kind == "cross_entropy" else batch.targets
    if target is None:
        raise ContractError(f"batch has no targets for loss {model.cfg.loss_kind!r}")
    return loss(output, target, model.cfg.loss_kind)


# ------------------------------------------------------------ serialization


def config_to_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)


def config_from_dict(d: dict) -> ModelConfig:
    return ModelConfig(**d)


def config_hash(obj) -> str:
    """Short SHA-256 of the canonical JSON encoding."""
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=list).encode()).hexdigest()[:16]


def weights_to_dict(model: Model) -> dict:
    cfg = config_to_dict(model.cfg)
    return {
        "format": WEIGHTS_FORMAT,
        "version": WEIGHTS_VERSION,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": model.seed,
        "epochs_completed": model.epochs_completed,
        "params": {
            name: {"shape": list(v.shape), "data": [float(x) for x in np.asarray(v).reshape(-1)]}
            for name, v in sorted(model.params.items())
        },
    }


def weights_from_dict(d: dict) -> Model:
    if d.get("format") != WEIGHTS_FORMAT or d.get("version") != WEIGHTS_VERSION:
        raise ValueError(f"not a version-{WEIGHTS_VERSION} weight file")
    params = {
        name: np.array(rec["data"], dtype=np.float64).reshape(rec["shape"]) for name, rec in d["params"].items()
    }
    return Model(config_from_dict(d["config"]), params, d.get("seed", 0), d.get("epochs_completed", 0))


def save_weights(model: Model, path) -> None:
    # json writes floats with repr, so values round-trip exactly
    Path(path).write_text(json.dumps(weights_to_dict(model), indent=1) + "\n")


def load_weights(path) -> Model:
    return weights_from_dict(json.loads(Path(path).read_text()))

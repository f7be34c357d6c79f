"""Adam, truncation-free BPTT training, evaluation and update accounting."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import cells
from .diffmath import ContractError, Tape
from .network import Model, batch_loss, config_to_dict, forward_batch, make_batch
from .tasks import Dataset, EventSequence

log = logging.getLogger(__name__)


class NonFiniteGradient(ArithmeticError):
    def __init__(self, name: str, step: int):
        super().__init__(f"non-finite gradient for {name!r} at optimizer step {step}")
        self.name = name
        self.step = step


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def project(params: dict[str, np.ndarray], trainable=None) -> None:
    """Keep tau away from zero and, when it is being learned, r_on inside its bounds."""
    if "tau" in params:
        np.maximum(params["tau"], cells.TAU_MIN, out=params["tau"])
    if "r_on" in params and (trainable is None or "r_on" in trainable):
        params["r_on"] = np.clip(params["r_on"], *cells.R_ON_BOUNDS)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """Bias-corrected Adam update of ``params`` in place for every name in ``grads``."""
    step = state.step + 1
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name, step)
    state.step = step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**step
    bc2 = 1.0 - b2**step
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        params[name] = p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    project(params, grads.keys())


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is not None and norm > max_norm:
        f = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * f
    return norm


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 10.0
    alpha_train: float | None = None
    train_tau: bool = True
    train_s: bool = True
    train_r_on: bool = False
    bucket_batches: int = 8
    eval_batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.eval_batch_size < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and eval_batch_size >= 1 required")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")


@dataclass
class EvalResult:
    n: int
    loss: float
    accuracy: float | None
    mse: float | None
    updates_per_neuron: float
    update_total: int
    event_total: int
    hidden: int

    @property
    def update_fraction(self) -> float:
        return self.update_total / (self.hidden * self.event_total)

    @property
    def metric(self) -> float:
        return self.accuracy if self.accuracy is not None else self.mse


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    test: dict
    wall_time: float
    grad_norm: float


@dataclass
class TrainReport:
    seed: int
    config: dict
    dataset_hash: str
    epochs: list[EpochRecord] = field(default_factory=list)
    diverged: bool = False
    abort_reason: str = ""

    @property
    def final(self) -> dict:
        if not self.epochs:
            raise ContractError("report has no epochs")
        return self.epochs[-1].test

    def losses(self) -> list[float]:
        return [e.train_loss for e in self.epochs]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainReport":
        d = dict(d)
        d["epochs"] = [EpochRecord(**e) for e in d.get("epochs", [])]
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def csv_rows(self) -> list[tuple]:
        rows = []
        for e in self.epochs:
            rows.append((e.epoch, "train", "loss", e.train_loss))
            rows.append((e.epoch, "train", "grad_norm", e.grad_norm))
            rows.append((e.epoch, "train", "wall_time", e.wall_time))
            for key, value in e.test.items():
                if value is not None:
                    rows.append((e.epoch, "test", key, value))
        return rows

    def to_csv(self, header_comment: str = "") -> str:
        buf = io.StringIO()
        if header_comment:
            buf.write(f"# {header_comment}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("epoch", "split", "metric", "value"))
        w.writerows(self.csv_rows())
        return buf.getvalue()


def batches(seqs: Sequence[EventSequence], batch_size: int, rng: np.random.Generator, bucket: int):
    """Shuffled index batches; within groups of ``bucket`` batches, similar lengths go together."""
    order = rng.permutation(len(seqs))
    if bucket > 1:
        chunk = batch_size * bucket
        lengths = np.array([len(s) for s in seqs])
        pieces = []
        for lo in range(0, len(order), chunk):
            part = order[lo : lo + chunk]
            part = part[np.argsort(lengths[part], kind="stable")]
            pieces += [part[i : i + batch_size] for i in range(0, len(part), batch_size)]
        return [pieces[i] for i in rng.permutation(len(pieces))]
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]


def evaluate(model: Model, seqs: Sequence[EventSequence], batch_size: int = 128, alpha: float = 0.0) -> EvalResult:
    """Accuracy or MSE with the leak set to ``alpha`` (0 at test time).

    ``updates_per_neuron`` is the mean number of open-phase steps per unit
    and sequence.
    """
    if not seqs:
        raise ContractError("evaluate needs at least one sequence")
    cfg = model.cfg
    lengths = np.array([len(s) for s in seqs])
    order = np.argsort(lengths, kind="stable")
    loss_sum = 0.0
    correct = 0
    sq = 0.0
    updates = 0
    for lo in range(0, len(order), batch_size):
        idx = order[lo : lo + batch_size]
        batch = make_batch([seqs[i] for i in idx], cfg)
        tape = Tape(recording=False)
        res = forward_batch(model, batch, tape, alpha=alpha)
        loss_sum += float(batch_loss(model, batch, res.output).value) * len(idx)
        out = res.output.value
        if batch.labels is not None:
            correct += int((out.argmax(axis=1) == batch.labels).sum())
        if batch.targets is not None:
            sq += float(((out - batch.targets) ** 2).sum())
        updates += int(res.updates.sum())
    n = len(seqs)
    classification = seqs[0].label is not None
    return EvalResult(
        n=n,
        loss=loss_sum / n,
        accuracy=correct / n if classification else None,
        mse=sq / (n * cfg.out_dim) if seqs[0].target is not None else None,
        updates_per_neuron=updates / (n * cfg.hidden),
        update_total=updates,
        event_total=int(lengths.sum()),
        hidden=cfg.hidden,
    )


def _eval_dict(r: EvalResult) -> dict:
    d = asdict(r)
    d["update_fraction"] = r.update_fraction
    return d


def train(model: Model, dataset: Dataset, cfg: TrainConfig, on_epoch=None) -> TrainReport:
    """Mini-batch BPTT with Adam; ``model`` is updated in place.

    Training runs with the model's leak (or ``cfg.alpha_train``); every epoch
    ends with an evaluation on the test split (training split if there is no
    test split) with the leak switched off.
    """
    if not dataset.train:
        raise ContractError("empty training set")
    test = dataset.test or dataset.train
    trainable = model.default_trainable(cfg.train_tau, cfg.train_s, cfg.train_r_on)
    state = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    report = TrainReport(
        seed=cfg.seed,
        config={"model": config_to_dict(model.cfg), "train": asdict(cfg), "task": dataset.task},
        dataset_hash=dataset.digest(),
    )
    # keyed on completed epochs so a resumed run does not replay earlier shuffles
    rng = np.random.default_rng([cfg.seed, model.epochs_completed])
    alpha = cfg.alpha_train
    for _ in range(cfg.epochs):
        t0 = time.perf_counter()
        total, count, gnorm = 0.0, 0, 0.0
        for idx in batches(dataset.train, cfg.batch_size, rng, cfg.bucket_batches):
            batch = make_batch([dataset.train[i] for i in idx], model.cfg)
            tape = Tape()
            res = forward_batch(model, batch, tape, trainable=trainable, alpha=alpha)
            loss = batch_loss(model, batch, res.output)
            lv = float(loss.value)
            if not math.isfinite(lv):
                report.diverged = True
                report.abort_reason = f"loss became {lv} in epoch {model.epochs_completed + 1}"
                return report
            grads = tape.backward(loss)
            gnorm = max(gnorm, clip_global_norm(grads, cfg.clip_norm))
            try:
                adam_step(model.params, grads, state)
            except NonFiniteGradient as exc:
                report.diverged = True
                report.abort_reason = str(exc)
                return report
            total += lv * len(idx)
            count += len(idx)
        model.epochs_completed += 1
        ev = evaluate(model, test, cfg.eval_batch_size, alpha=0.0)
        rec = EpochRecord(model.epochs_completed, total / count, _eval_dict(ev), time.perf_counter() - t0, gnorm)
        report.epochs.append(rec)
        log.info("epoch %d loss %.4f test %.4f (%.1fs)", rec.epoch, rec.train_loss, ev.metric, rec.wall_time)
        if on_epoch is not None:
            on_epoch(rec)
    return report


def count_update_ratio(report: TrainReport, baseline: TrainReport) -> float:
    """Per-neuron update count of ``report`` relative to ``baseline`` on the same data."""
    if report.dataset_hash != baseline.dataset_hash:
        raise ContractError("reports were produced on different datasets")
    return report.final["updates_per_neuron"] / baseline.final["updates_per_neuron"]

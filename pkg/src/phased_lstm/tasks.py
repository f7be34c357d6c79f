"""Seeded generators for the synthetic benchmarks.

Timestamps are in milliseconds.  Each sample ``i`` of a dataset is drawn
from its own generator ``default_rng([seed, i])`` so that samples can be
produced independently and in any order.
"""

from __future__ import annotations

import gzip
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .cells import SequencingError

SCHEMA_VERSION = 1

SAMPLING_DT = {"standard_1ms": 1.0, "oversampled_0p1ms": 0.1}
ASYNC_GAP = (0.02, 10.0)


@dataclass
class EventSequence:
    """Timestamped feature vectors.

    ``times`` has shape ``[n]`` and must be strictly increasing; ``values``
    has shape ``[n, features]``.  Classification samples carry an integer
    ``label``, regression samples a float ``target``.
    """

    times: np.ndarray
    values: np.ndarray
    label: int | None = None
    target: float | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if self.values.shape[0] != self.times.shape[0]:
            raise ValueError(f"{self.times.shape[0]} timestamps but {self.values.shape[0]} feature rows")
        if self.times.size == 0:
            raise ValueError("a sequence needs at least one event")
        if np.any(np.diff(self.times) <= 0):
            bad = int(np.nonzero(np.diff(self.times) <= 0)[0][0]) + 1
            raise SequencingError(f"timestamps must be strictly increasing (event {bad})")

    def __len__(self):
        return self.times.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    def to_record(self) -> dict:
        rec = {"schema": SCHEMA_VERSION}
        if self.label is not None:
            rec["label"] = int(self.label)
        if self.target is not None:
            rec["target"] = float(self.target)
        rec["events"] = [[float(t), *map(float, y)] for t, y in zip(self.times, self.values)]
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "EventSequence":
        ev = np.asarray(rec["events"], dtype=np.float64)
        return cls(ev[:, 0], ev[:, 1:], label=rec.get("label"), target=rec.get("target"))


def _union_length(intervals) -> float:
    return sum(b - a for a, b in intervals)


def sample_from_union(rng: np.random.Generator, intervals: Sequence[tuple[float, float]]) -> float:
    """Uniform draw over a union of disjoint intervals (weighted by length)."""
    u = rng.uniform(0.0, _union_length(intervals))
    for a, b in intervals:
        if u < b - a:
            return a + u
        u -= b - a
    a, b = intervals[-1]
    return b


def _disjoint(xs, ys) -> bool:
    return all(b1 <= a2 or b2 <= a1 for a1, b1 in xs for a2, b2 in ys)


@dataclass
class FreqTaskConfig:
    """Two-class sine period discrimination.

    The sample count of regular sampling follows from the duration (one
    sample per ``dt``); asynchronous sampling reuses the 1 ms count for the
    same duration, so paired standard/async draws have equal counts.
    """

    sampling: str = "standard_1ms"
    target_period: tuple[float, float] = (5.0, 6.0)
    offtarget: tuple[tuple[float, float], ...] = ((1.0, 5.0), (6.0, 100.0))
    duration_range: tuple[float, float] = (15.0, 125.0)
    horizon: float = 125.0
    superimposed: bool = False
    target_period2: tuple[float, float] = (13.0, 15.0)
    offtarget2: tuple[tuple[float, float], ...] = ((1.0, 13.0), (15.0, 100.0))
    kind: str = field(default="freq", init=False)

    def __post_init__(self):
        self.target_period = tuple(self.target_period)
        self.offtarget = tuple(tuple(x) for x in self.offtarget)
        self.target_period2 = tuple(self.target_period2)
        self.offtarget2 = tuple(tuple(x) for x in self.offtarget2)
        self.duration_range = tuple(self.duration_range)
        if self.sampling not in ("standard_1ms", "oversampled_0p1ms", "async"):
            raise ValueError(f"unknown sampling {self.sampling!r}")
        if not _disjoint([self.target_period], self.offtarget):
            raise ValueError("target and off-target periods overlap")
        if self.superimposed and not _disjoint([self.target_period2], self.offtarget2):
            raise ValueError("second target and off-target periods overlap")
        lo, hi = self.duration_range
        if not 0 < lo <= hi <= self.horizon:
            raise ValueError("need 0 < duration_range[0] <= duration_range[1] <= horizon")


@dataclass
class AddingTaskConfig:
    length_range: tuple[int, int] = (490, 510)
    value_range: tuple[float, float] = (-0.5, 0.5)
    first_window: float = 0.1
    second_window: float = 0.5
    kind: str = field(default="adding", init=False)

    def __post_init__(self):
        self.length_range = tuple(int(x) for x in self.length_range)
        self.value_range = tuple(self.value_range)
        lo, hi = self.length_range
        if not 2 <= lo <= hi:
            raise ValueError("length_range must satisfy 2 <= lo <= hi")
        if not 0 < self.first_window <= 1 - self.second_window < 1:
            raise ValueError("marker windows must be disjoint")


def task_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind", "freq")
    if kind == "freq":
        return FreqTaskConfig(**d)
    if kind == "adding":
        return AddingTaskConfig(**d)
    raise ValueError(f"unknown task kind {kind!r}")


def task_to_dict(cfg) -> dict:
    return asdict(cfg)


def _sine_params(rng, target: bool, cfg: FreqTaskConfig):
    periods = [rng.uniform(*cfg.target_period) if target else sample_from_union(rng, cfg.offtarget)]
    if cfg.superimposed:
        periods.append(rng.uniform(*cfg.target_period2) if target else sample_from_union(rng, cfg.offtarget2))
    phases = [rng.uniform(0.0, 2 * np.pi) for _ in periods]
    return periods, phases


def gen_freq_sample(cfg: FreqTaskConfig, rng: np.random.Generator, label: int | None = None) -> EventSequence:
    """One sine (or sum of two sines) sampled per ``cfg.sampling``.

    ``label`` 1 means the period(s) lie in the target range; when omitted a
    fair coin decides.
    """
    if label is None:
        label = int(rng.integers(0, 2))
    periods, phases = _sine_params(rng, label == 1, cfg)
    duration = rng.uniform(*cfg.duration_range)
    t0 = rng.uniform(0.0, cfg.horizon - duration)
    n_std = max(int(np.floor(duration)), 2)
    if cfg.sampling == "async":
        gaps = rng.uniform(*ASYNC_GAP, size=n_std - 1)
        # keep the 1 ms count; stretch the irregular gaps to span the same window
        gaps *= (n_std - 1) / gaps.sum()
        offsets = np.concatenate([[0.0], np.cumsum(gaps)])
    else:
        dt = SAMPLING_DT[cfg.sampling]
        n = max(int(np.floor(duration / dt + 1e-9)), 2)
        offsets = dt * np.arange(n)
    y = np.zeros_like(offsets)
    for period, ph in zip(periods, phases):
        y += np.sin(2 * np.pi * offsets / period + ph)
    return EventSequence(t0 + offsets, y[:, None], label=label)


def freq_sample_periods(cfg: FreqTaskConfig, rng: np.random.Generator, label: int) -> list[float]:
    """Periods that :func:`gen_freq_sample` would draw from the same ``rng`` state."""
    return _sine_params(rng, label == 1, cfg)[0]


def gen_adding_sample(cfg: AddingTaskConfig, rng: np.random.Generator) -> EventSequence:
    """Random values plus an indicator stream marking exactly two of them."""
    length = int(rng.integers(cfg.length_range[0], cfg.length_range[1] + 1))
    values = rng.uniform(*cfg.value_range, size=length)
    first_end = max(1, int(np.floor(cfg.first_window * length)))
    second_start = int(np.ceil((1 - cfg.second_window) * length))
    second_start = min(max(second_start, first_end), length - 1)
    i1 = int(rng.integers(0, first_end))
    i2 = int(rng.integers(second_start, length))
    marks = np.zeros(length)
    marks[[i1, i2]] = 1.0
    return EventSequence(
        np.arange(length, dtype=np.float64),
        np.stack([values, marks], axis=1),
        target=float(values[i1] + values[i2]),
    )


@dataclass
class Dataset:
    train: list[EventSequence]
    test: list[EventSequence]
    task: dict
    seed: int

    @property
    def classification(self) -> bool:
        return self.train[0].label is not None

    def digest(self) -> str:
        """SHA-256 over the canonical record encoding of both splits."""
        h = hashlib.sha256()
        for split, seqs in (("train", self.train), ("test", self.test)):
            for s in seqs:
                rec = s.to_record()
                rec["split"] = split
                h.update(json.dumps(rec, sort_keys=True).encode())
                h.update(b"\n")
        return h.hexdigest()


def gen_dataset(task_cfg, n: int, seed: int, test_fraction: float = 0.2) -> Dataset:
    """``n`` samples split into train (first part) and test (last part).

    Classification labels alternate 0, 1, 0, ... so both splits are balanced
    to within one sample.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    if not 0 <= test_fraction < 1:
        raise ValueError("test_fraction must lie in [0, 1)")
    seqs = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        if task_cfg.kind == "freq":
            seqs.append(gen_freq_sample(task_cfg, rng, label=i % 2))
        else:
            seqs.append(gen_adding_sample(task_cfg, rng))
    n_test = int(round(n * test_fraction))
    n_train = n - n_test
    if n_train == 0:
        raise ValueError("no training samples left after the split")
    return Dataset(seqs[:n_train], seqs[n_train:], task_to_dict(task_cfg), seed)


def _open(path: Path, mode: str):
    if str(path).endswith(".gz"):
        # empty name and mtime=0 keep gzip output byte-identical across runs and paths
        if "w" in mode:
            raw = open(path, "wb")
            return _Closing(io.TextIOWrapper(gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0), encoding="utf-8"), raw)
        return gzip.open(path, "rt", encoding="utf-8")
    return open(path, mode, encoding="utf-8")


class _Closing:
    """Text wrapper that also closes the raw file it was layered on."""

    def __init__(self, fh, raw):
        self.fh, self.raw = fh, raw

    def __enter__(self):
        return self.fh

    def __exit__(self, *exc):
        self.fh.close()
        self.raw.close()
        return False


def write_dataset(ds: Dataset, path, config_hash: str = "") -> int:
    """Write one header line then one JSON record per sample; returns record count."""
    path = Path(path)
    header = {
        "schema": SCHEMA_VERSION,
        "header": True,
        "task": ds.task,
        "seed": ds.seed,
        "n_train": len(ds.train),
        "n_test": len(ds.test),
        "config_hash": config_hash,
    }
    with _open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for split, seqs in (("train", ds.train), ("test", ds.test)):
            for s in seqs:
                rec = s.to_record()
                rec["split"] = split
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return len(ds.train) + len(ds.test)


def read_dataset(path) -> Dataset:
    path = Path(path)
    train, test, header = [], [], {}
    with _open(path, "r") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.get("schema") != SCHEMA_VERSION:
                raise ValueError(f"unsupported dataset schema {rec.get('schema')!r}")
            if rec.get("header"):
                header = rec
                continue
            (test if rec.get("split") == "test" else train).append(EventSequence.from_record(rec))
    if not train:
        raise ValueError(f"{path} holds no training records")
    task = task_to_dict(task_from_dict(header["task"])) if header.get("task") else {}
    return Dataset(train, test, task, header.get("seed", -1))


def class_counts(seqs: Iterable[EventSequence]) -> dict[int, int]:
    out: dict[int, int] = {}
    for s in seqs:
        out[s.label] = out.get(s.label, 0) + 1
    return dict(sorted(out.items()))

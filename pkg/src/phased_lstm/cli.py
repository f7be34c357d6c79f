"""Command line: gen, train, eval, gradcheck, gatewave, report.

Every command reads one JSON experiment config (``--config``); scalar
fields can be overridden with ``--set section.field=value``.  Exit codes:
0 success, 2 config error, 3 divergence, 4 verification failure.
"""

from __future__ import annotations

import argparse
import contextlib
import copy
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import diffmath as dm
from . import network, tasks, training, verify
from .cells import BRANCH_NAMES, gate_values

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_VERIFY = 0, 2, 3, 4
SCHEMA_VERSION = 1
THREADS_ENV = "PHASED_LSTM_THREADS"
SABOTAGE_ENV = "PHASED_LSTM_SABOTAGE"

log = logging.getLogger("phased_lstm")


class ConfigError(Exception):
    pass


@dataclass
class DataConfig:
    n: int = 1500
    test_fraction: float = 1 / 3
    seed: int = 0
    path: str | None = None


@dataclass
class GradcheckConfig:
    hidden: int = 4
    batch: int = 2
    events: int = 5
    epsilon: float = 1e-5
    tolerance: float = 1e-4
    op_tolerance: float = 1e-6
    op_trials: int = 2
    seed: int = 0


@dataclass
class ExperimentConfig:
    task: dict = field(default_factory=lambda: tasks.task_to_dict(tasks.FreqTaskConfig()))
    data: DataConfig = field(default_factory=DataConfig)
    model: network.ModelConfig = field(default_factory=network.ModelConfig)
    train: training.TrainConfig = field(default_factory=training.TrainConfig)
    gradcheck: GradcheckConfig = field(default_factory=GradcheckConfig)
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: str = "runs/default"
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        d = asdict(self)
        d["task"] = tasks.task_to_dict(self.task_config())
        return d

    def task_config(self):
        return tasks.task_from_dict(self.task)

    @property
    def hash(self) -> str:
        return network.config_hash(self.to_dict())


_SECTIONS = {"data": DataConfig, "model": network.ModelConfig, "train": training.TrainConfig, "gradcheck": GradcheckConfig}


def config_from_dict(d: dict) -> ExperimentConfig:
    d = copy.deepcopy(d)
    version = d.pop("schema_version", None)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    unknown = set(d) - {"task", "seeds", "output_dir", *_SECTIONS}
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    try:
        kw = {name: cls(**d.pop(name, {})) for name, cls in _SECTIONS.items()}
        cfg = ExperimentConfig(**kw, **d)
        cfg.task = tasks.task_to_dict(cfg.task_config())
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if not cfg.seeds or not all(isinstance(s, int) for s in cfg.seeds):
        raise ConfigError("seeds must be a non-empty list of integers")
    kind = cfg.task["kind"]
    if kind == "adding" and (cfg.model.loss_kind != "mse" or cfg.model.in_dim != 2 or cfg.model.out_dim != 1):
        raise ConfigError("the adding task needs model.loss_kind='mse', in_dim=2 and out_dim=1")
    if kind == "freq" and (cfg.model.loss_kind != "cross_entropy" or cfg.model.in_dim != 1 or cfg.model.out_dim != 2):
        raise ConfigError("the frequency task needs model.loss_kind='cross_entropy', in_dim=1 and out_dim=2")
    return cfg


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` assignments; values are parsed as JSON when possible."""
    d = copy.deepcopy(d)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {key}: {p!r} is not a section")
        node[parts[-1]] = _parse_value(raw)
    return d


def load_config(path: str | None, overrides: list[str]) -> ExperimentConfig:
    if path is None:
        raw = ExperimentConfig().to_dict()
    else:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from None
    return config_from_dict(apply_overrides(raw, overrides))


# -------------------------------------------------------------- utilities


@contextlib.contextmanager
def output_lock(directory: Path):
    """Refuse to run when another process holds the directory's lockfile."""
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(f"{directory} is locked by another run ({lock}); remove it if stale") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _write_json(path: Path, obj: dict, config_hash: str):
    obj = dict(obj, config_hash=config_hash)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _load_dataset(cfg: ExperimentConfig) -> tasks.Dataset:
    if cfg.data.path:
        path = Path(cfg.data.path)
        if not path.exists():
            raise ConfigError(f"dataset {path} not found; create it with `phased-lstm gen --config ...`")
        try:
            return tasks.read_dataset(path)
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"cannot read dataset {path}: {exc}") from None
    return tasks.gen_dataset(cfg.task_config(), cfg.data.n, cfg.data.seed, cfg.data.test_fraction)


def _run_paths(out: Path, seed: int) -> dict[str, Path]:
    return {
        "report": out / f"report_seed{seed}.json",
        "csv": out / f"report_seed{seed}.csv",
        "weights": out / f"weights_seed{seed}.json",
    }


# --------------------------------------------------------------- commands


def cmd_gen(cfg: ExperimentConfig, out: str | None) -> int:
    ds = tasks.gen_dataset(cfg.task_config(), cfg.data.n, cfg.data.seed, cfg.data.test_fraction)
    path = Path(out or cfg.data.path or Path(cfg.output_dir) / "dataset.jsonl.gz")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        count = tasks.write_dataset(ds, path, cfg.hash)
    except OSError as exc:
        raise ConfigError(f"cannot write {path}: {exc}") from None
    print(f"wrote {count} records to {path}")
    if ds.classification:
        counts = tasks.class_counts(ds.train + ds.test)
        print("class balance: " + ", ".join(f"{k}: {v}" for k, v in counts.items()))
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, resume: str | None) -> int:
    if resume and len(cfg.seeds) != 1:
        raise ConfigError("--resume continues a single run; give exactly one seed")
    ds = _load_dataset(cfg)
    out = Path(cfg.output_dir)
    status = EXIT_OK
    with output_lock(out):
        (out / "config.json").write_text(json.dumps(dict(cfg.to_dict(), config_hash=cfg.hash), indent=1) + "\n")
        for seed in cfg.seeds:
            if resume:
                model = network.load_weights(resume)
                if model.cfg != cfg.model:
                    raise ConfigError(f"{resume} was trained with a different model config")
            else:
                model = network.init_model(cfg.model, seed)
            tcfg = replace(cfg.train, seed=seed)
            report = training.train(model, ds, tcfg, on_epoch=_progress(seed))
            paths = _run_paths(out, seed)
            _write_json(paths["report"], report.to_dict(), cfg.hash)
            paths["csv"].write_text(report.to_csv(f"config_hash={cfg.hash} seed={seed}"))
            weights = network.weights_to_dict(model)
            weights["experiment_hash"] = cfg.hash
            paths["weights"].write_text(json.dumps(weights, indent=1) + "\n")
            if report.diverged:
                print(f"seed {seed}: diverged: {report.abort_reason}", file=sys.stderr)
                status = EXIT_DIVERGED
            elif report.epochs:
                print(f"seed {seed}: final {_metric_name(report.final)} {_metric(report.final):.6g}")
    return status


def _metric_name(ev: dict) -> str:
    return "accuracy" if ev.get("accuracy") is not None else "mse"


def _metric(ev: dict) -> float:
    return ev[_metric_name(ev)]


def _progress(seed: int):
    def cb(rec: training.EpochRecord):
        log.info("seed %d epoch %d loss %.5f test %s %.5f", seed, rec.epoch, rec.train_loss, _metric_name(rec.test), _metric(rec.test))

    return cb


def cmd_eval(cfg: ExperimentConfig, weights: str, split: str) -> int:
    ds = _load_dataset(cfg)
    try:
        model = network.load_weights(weights)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot load weights {weights}: {exc}") from None
    seqs = ds.test if split == "test" and ds.test else ds.train
    ev = training.evaluate(model, seqs, cfg.train.eval_batch_size, alpha=0.0)
    result = dict(training._eval_dict(ev), split=split, weights=str(weights), epochs_completed=model.epochs_completed)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / f"eval_{Path(weights).stem}_{split}.json", result, cfg.hash)
    print(f"{split} {_metric_name(result)} {_metric(result):.6g} ({ev.n} sequences, update fraction {ev.update_fraction:.4f})")
    return EXIT_OK


def cmd_gradcheck(cfg: ExperimentConfig) -> int:
    g = cfg.gradcheck
    sabotaged = [s for s in os.environ.get(SABOTAGE_ENV, "").split(",") if s]
    mcfg = replace(cfg.model, hidden=g.hidden)
    with dm.sabotage(*sabotaged):
        ops = verify.check_ops(trials=g.op_trials, seed=g.seed, tolerance=g.op_tolerance, epsilon=g.epsilon)
        model = verify.check_model(mcfg, g.seed, g.batch, g.events, g.epsilon, g.tolerance)
    print(f"per-op checks (tolerance {g.op_tolerance:g}):")
    print("\n".join("  " + line for line in ops.lines()))
    print(f"{mcfg.cell_kind} model, hidden {g.hidden}, batch {g.batch}, {g.events} events (tolerance {g.tolerance:g}):")
    print("\n".join("  " + line for line in model.lines()))
    if ops.passed and model.passed:
        print(f"PASS worst relative error {max(ops.worst, model.worst):.3e}")
        return EXIT_OK
    bad = [f"op {o}" for o in ops.failures] + [f"parameter {p}" for p in model.failures]
    print("FAIL " + ", ".join(bad))
    return EXIT_VERIFY


def cmd_gatewave(args) -> int:
    if not args.dt > 0:
        raise ConfigError("--dt must be positive")
    if not args.tau > 0 or not 0 < args.r_on <= 1 or args.alpha < 0:
        raise ConfigError("need tau > 0, 0 < r_on <= 1 and alpha >= 0")
    n = int(np.floor((args.t_end - args.t_start) / args.dt + 1e-9)) + 1
    t = args.t_start + args.dt * np.arange(max(n, 0))
    phi, k, branch = gate_values(t, np.array([args.tau]), np.array([args.s]), args.r_on, args.alpha)
    params = {"tau": args.tau, "s": args.s, "r_on": args.r_on, "alpha": args.alpha, "t_start": args.t_start, "t_end": args.t_end, "dt": args.dt}
    h = network.config_hash(params)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        fh.write(f"# config_hash={h} {json.dumps(params, sort_keys=True)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("t", "phi", "k", "branch"))
        for i in range(t.size):
            w.writerow((repr(float(t[i])), repr(float(phi[i, 0])), repr(float(k[i, 0])), BRANCH_NAMES[branch[i, 0]]))
    finally:
        if fh is not sys.stdout:
            fh.close()
    return EXIT_OK


def read_csv_rows(path: Path) -> tuple[list[str], list[list[str]], list[str]]:
    """Header, data rows and ``#`` comment lines of a CSV file."""
    comments, lines = [], []
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("#"):
                comments.append(line[1:].strip())
            else:
                lines.append(line)
    reader = csv.reader(lines)
    header = next(reader, None)
    if header is None:
        raise ConfigError(f"{path} has no header row")
    return header, list(reader), comments


def cmd_report(inputs: list[str], out: str | None) -> int:
    """Concatenate per-run CSVs into one long table with a ``run`` column."""
    if not inputs:
        raise ConfigError("report needs at least one CSV")
    merged, header0, hashes = [], None, []
    for name in inputs:
        path = Path(name)
        if not path.exists():
            raise ConfigError(f"{path} not found")
        header, rows, comments = read_csv_rows(path)
        if header0 is None:
            header0 = header
        elif header != header0:
            raise ConfigError(f"{path} has columns {header}, expected {header0}")
        hashes += [c for c in comments if c.startswith("config_hash=")]
        merged += [[path.stem, *r] for r in rows]
    fh = open(out, "w", newline="") if out else sys.stdout
    try:
        fh.write(f"# merged from {len(inputs)} files; config_hash={network.config_hash(sorted(hashes))}\n")
        for hline in hashes:
            fh.write(f"# source {hline}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", *header0])
        w.writerows(merged)
    finally:
        if fh is not sys.stdout:
            fh.close()
    return EXIT_OK


# ------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="phased-lstm", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="experiment JSON (defaults apply when omitted)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config field")
        return sp

    with_config(sub.add_parser("gen", help="generate a dataset file")).add_argument("--out")
    with_config(sub.add_parser("train", help="train one model per seed")).add_argument("--resume", metavar="WEIGHTS")
    sp = with_config(sub.add_parser("eval", help="evaluate saved weights"))
    sp.add_argument("--weights", required=True)
    sp.add_argument("--split", choices=("test", "train"), default="test")
    with_config(sub.add_parser("gradcheck", help="finite-difference gradient suite"))
    sp = sub.add_parser("gatewave", help="sample the time gate densely to CSV")
    sp.add_argument("--tau", type=float, default=1.0)
    sp.add_argument("--s", type=float, default=0.0)
    sp.add_argument("--r-on", type=float, default=0.05)
    sp.add_argument("--alpha", type=float, default=0.0)
    sp.add_argument("--t-start", type=float, default=0.0)
    sp.add_argument("--t-end", type=float, default=1.0)
    sp.add_argument("--dt", type=float, default=0.001)
    sp.add_argument("--out")
    sp = sub.add_parser("report", help="merge report CSVs for plotting")
    sp.add_argument("inputs", nargs="+")
    sp.add_argument("--out")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with _thread_limit():
            if args.command == "gatewave":
                return cmd_gatewave(args)
            if args.command == "report":
                return cmd_report(args.inputs, args.out)
            cfg = load_config(args.config, args.set)
            if args.command == "gen":
                return cmd_gen(cfg, args.out)
            if args.command == "train":
                return cmd_train(cfg, args.resume)
            if args.command == "eval":
                return cmd_eval(cfg, args.weights, args.split)
            return cmd_gradcheck(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

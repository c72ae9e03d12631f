"""Training, model selection, and the statistical comparison used by the bench.

A bench grid is the product family x task x replicate x learning rate. Every
(family, task, replicate, lr) cell trains independently, so cells fan out over
worker processes; selection and the statistics are a serial reduction.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .autodiff import AutodiffError, NonFiniteError, Tape, backward
from .models import SetModel, build_model, default_config, loss_mse
from .nkm import SetBatch
from .synthgen import Dataset, DatasetRecord

__all__ = [
    "TrainConfig",
    "TrainingError",
    "Adam",
    "RunResult",
    "RunFailure",
    "BenchResult",
    "train",
    "evaluate",
    "select_and_test",
    "run_replicate",
    "run_bench",
    "win_loss_matrix",
    "binomial_test_one_tailed",
    "significance_flag",
    "significance_marker",
    "summarize",
    "bench_report",
    "write_metrics_csv",
    "read_metrics_csv",
    "CSV_HEADER",
    "worker_count",
]

log = logging.getLogger(__name__)

CSV_HEADER = ("family", "task", "replicate", "lr", "val_mse", "test_mse", "params", "seconds")


@dataclass(frozen=True)
class TrainConfig:
    learning_rates: tuple[float, ...] = (1e-4, 5e-4, 1e-3, 5e-3)
    batch_size: int = 32
    epochs: int = 20
    latent_dim: int = 16
    seed: int = 0
    replicates: int = 10

    def __post_init__(self):
        object.__setattr__(self, "learning_rates", tuple(float(lr) for lr in self.learning_rates))
        if not self.learning_rates:
            raise ValueError("at least one learning rate is needed")
        if any(not lr > 0 for lr in self.learning_rates):
            raise ValueError(f"learning rates must be positive, got {self.learning_rates}")
        for name in ("batch_size", "epochs", "latent_dim", "replicates"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")


class TrainingError(RuntimeError):
    pass


class Adam:
    """Adaptive-moment optimizer over a fixed list of parameter tensors."""

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if not lr > 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _batch(records: Sequence[DatasetRecord], idx) -> tuple[SetBatch, np.ndarray]:
    chunk = [records[i] for i in idx]
    return SetBatch.from_sets([r.points for r in chunk]), np.stack([r.target for r in chunk])


def train(model: SetModel, train_records: Sequence[DatasetRecord], config: TrainConfig,
          lr: float) -> tuple[SetModel, list[float]]:
    """Mini-batch Adam on the MSE loss; returns the model and per-epoch mean loss.

    The shuffle order depends only on ``config.seed`` and the epoch number.
    """
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if not train_records:
        raise ValueError("training data is empty")
    opt = Adam(model.parameters(), lr)
    n = len(train_records)
    epoch_losses = []
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, config.batch_size)):
            batch, target = _batch(train_records, order[start:start + config.batch_size])
            opt.zero_grad()
            try:
                with Tape() as tape:
                    loss = loss_mse(model(batch), target)
                value = loss.item()
                if not math.isfinite(value):
                    raise NonFiniteError(f"loss is {value}")
                backward(loss, tape)
                opt.step()
                model.post_step()
            except (NonFiniteError, AutodiffError, ArithmeticError, ValueError) as exc:
                raise TrainingError(f"epoch {epoch}, batch {b}: non-finite or invalid value ({exc})") from exc
            for p in opt.params:
                if not np.isfinite(p.data).all():
                    raise TrainingError(f"epoch {epoch}, batch {b}: parameters became non-finite")
            total += value * len(target)
        epoch_losses.append(total / n)
    return model, epoch_losses


def evaluate(model: SetModel, records: Sequence[DatasetRecord], batch_size: int = 32) -> float:
    """Mean squared error over every record and output coordinate."""
    if not records:
        raise ValueError("cannot evaluate on an empty split")
    sse = 0.0
    count = 0
    for start in range(0, len(records), batch_size):
        batch, target = _batch(records, range(start, min(start + batch_size, len(records))))
        err = model(batch).data - target
        sse += float(np.sum(err * err))
        count += err.size
    return sse / count


@dataclass
class RunResult:
    family: str
    task: str
    replicate: int
    seed: int
    best_lr: float
    val_mse: float
    test_mse: float
    epoch_losses: list[float]
    parameter_count: int
    wall_time_seconds: float
    val_by_lr: dict[float, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["val_by_lr"] = {repr(k): v for k, v in self.val_by_lr.items()}
        return d


@dataclass
class RunFailure:
    family: str
    task: str
    replicate: int
    lr: float | None
    error: str
    status: str = "failed"


def select_and_test(candidates: Sequence[tuple[float, SetModel]], val_records, test_records,
                    val_mses: Sequence[float] | None = None,
                    batch_size: int = 32) -> tuple[int, list[float], float]:
    """Pick the candidate with the lowest validation MSE and test it once.

    ``candidates`` holds (lr, model) pairs. Ties go to the smaller learning
    rate. Returns (selected index, validation MSEs, test MSE).
    """
    if not candidates:
        raise ValueError("no candidates to select from")
    if val_mses is None:
        val_mses = [evaluate(m, val_records, batch_size) for _, m in candidates]
    val_mses = [float(v) for v in val_mses]
    if len(val_mses) != len(candidates):
        raise ValueError("one validation MSE per candidate expected")
    best = min(range(len(candidates)), key=lambda i: (val_mses[i], candidates[i][0]))
    test_mse = evaluate(candidates[best][1], test_records, batch_size)
    return best, val_mses, test_mse


def _model_seed(seed: int, replicate: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(replicate)]).generate_state(1)[0])


def _model_for(family: str, dataset: Dataset, config: TrainConfig, replicate: int) -> SetModel:
    task = dataset.task
    cfg = default_config(family, element_width=task.dim, latent_width=config.latent_dim,
                         output_width=task.target_width, seed=_model_seed(config.seed, replicate))
    return build_model(cfg)


def _train_cell(family: str, dataset: Dataset, config: TrainConfig, replicate: int, lr: float):
    """One grid cell: train at ``lr`` and score on validation."""
    start = time.perf_counter()
    model = _model_for(family, dataset, config, replicate)
    rep_config = replace(config, seed=_model_seed(config.seed, replicate))
    model, losses = train(model, dataset.train, rep_config, lr)
    val = evaluate(model, dataset.val, config.batch_size)
    return model, losses, val, time.perf_counter() - start


def _finish_replicate(family, dataset, config, replicate, cells) -> RunResult:
    """Select among trained cells [(lr, model, losses, val, seconds)] and test once."""
    start = time.perf_counter()
    candidates = [(lr, model) for lr, model, _, _, _ in cells]
    best, vals, test = select_and_test(candidates, dataset.val, dataset.test,
                                       val_mses=[c[3] for c in cells], batch_size=config.batch_size)
    lr, model, losses, _, _ = cells[best]
    seconds = sum(c[4] for c in cells) + time.perf_counter() - start
    return RunResult(family, dataset.task.kind, replicate, _model_seed(config.seed, replicate), lr,
                     vals[best], test, losses, model.parameter_count, seconds,
                     {c[0]: v for c, v in zip(cells, vals)})


def run_replicate(family: str, dataset: Dataset, config: TrainConfig, replicate: int = 0) -> RunResult:
    """Train one model per learning rate, select on validation, test the winner."""
    cells = []
    for lr in config.learning_rates:
        cells.append((lr, *_train_cell(family, dataset, config, replicate, lr)))
    return _finish_replicate(family, dataset, config, replicate, cells)


# ---------------------------------------------------------------------------
# Grid execution
# ---------------------------------------------------------------------------


def worker_count() -> int:
    """Parallel runs allowed: QUANN_THREADS if set, else the usable cores."""
    env = os.environ.get("QUANN_THREADS")
    if env:
        try:
            value = int(env)
        except ValueError:
            raise ValueError(f"QUANN_THREADS must be an integer, got {env!r}") from None
        if value < 1:
            raise ValueError("QUANN_THREADS must be at least 1")
        return value
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # pragma: no cover - non-Linux
        return os.cpu_count() or 1


_WORKER_DATA: dict = {}


def _init_worker(datasets, config):
    _WORKER_DATA["datasets"] = datasets
    _WORKER_DATA["config"] = config


def _cell_job(family: str, task: str, replicate: int, lr: float):
    ds = _WORKER_DATA["datasets"][task]
    config = _WORKER_DATA["config"]
    try:
        model, losses, val, seconds = _train_cell(family, ds, config, replicate, lr)
    except Exception as exc:  # isolate every failure to its own cell
        return None, f"{type(exc).__name__}: {exc}\n{traceback.format_exc(limit=3)}"
    log.info("%s/%s rep %d lr %g: val %.6g (%.1f s)", family, task, replicate, lr, val, seconds)
    return (model.state_dict(), losses, val, seconds), None


@dataclass
class BenchResult:
    results: list[RunResult]
    failures: list[RunFailure]
    config: TrainConfig
    families: list[str]
    tasks: list[str]
    seconds: float = 0.0


def run_bench(datasets: Mapping[str, Dataset], families: Sequence[str], config: TrainConfig,
              workers: int | None = None) -> BenchResult:
    """Run the family x task x replicate x lr grid.

    A failing cell is recorded and excluded from its replicate; a replicate
    left without any successful cell is reported as failed. Nothing aborts
    the grid.
    """
    start = time.perf_counter()
    workers = worker_count() if workers is None else workers
    jobs = [(f, t, r, lr) for f in families for t in datasets
            for r in range(config.replicates) for lr in config.learning_rates]
    if workers > 1:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(dict(datasets), config)) as pool:
            outcomes = list(pool.map(_cell_job, *zip(*jobs)))
    else:
        _init_worker(dict(datasets), config)
        outcomes = [_cell_job(*job) for job in jobs]

    grouped: dict[tuple, list] = {}
    failures: list[RunFailure] = []
    for (family, task, rep, lr), (payload, err) in zip(jobs, outcomes):
        grouped.setdefault((family, task, rep), [])
        if err is not None:
            log.warning("run %s/%s/rep%d/lr=%g failed: %s", family, task, rep, lr, err.splitlines()[0])
            failures.append(RunFailure(family, task, rep, lr, err))
            continue
        state, losses, val, seconds = payload
        model = _model_for(family, datasets[task], config, rep)
        model.load_state_dict(state)
        grouped[(family, task, rep)].append((lr, model, losses, val, seconds))

    results = []
    for (family, task, rep), cells in grouped.items():
        if not cells:
            failures.append(RunFailure(family, task, rep, None, "every learning rate failed"))
            continue
        try:
            results.append(_finish_replicate(family, datasets[task], config, rep, cells))
        except Exception as exc:
            failures.append(RunFailure(family, task, rep, None, f"{type(exc).__name__}: {exc}"))
    return BenchResult(results, failures, config, list(families), list(datasets),
                       time.perf_counter() - start)


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------


def binomial_test_one_tailed(wins: int, trials: int) -> float:
    """P[X >= wins] for X ~ Binomial(trials, 1/2), summed exactly."""
    if trials < 1:
        raise ValueError("trials must be at least 1")
    if not 0 <= wins <= trials:
        raise ValueError(f"wins must lie in [0, {trials}], got {wins}")
    tail = sum(math.comb(trials, k) for k in range(wins, trials + 1))
    return tail / 2 ** trials


def significance_marker(p_value: float) -> str:
    if p_value < 0.01:
        return "**"
    if p_value < 0.05:
        return "*"
    return ""


def significance_flag(mean_a: float, std_a: float, mean_b: float, std_b: float) -> str:
    """Compare loss A against loss B: 'better' when A is lower by more than std_a + std_b."""
    if std_a < 0 or std_b < 0:
        raise ValueError("standard deviations must be non-negative")
    margin = std_a + std_b
    if mean_b - mean_a > margin:
        return "better"
    if mean_a - mean_b > margin:
        return "worse"
    return "tie"


def summarize(results: Sequence[RunResult]) -> dict[tuple[str, str], dict]:
    """Mean and population std of test MSE per (family, task)."""
    cells: dict[tuple[str, str], list[float]] = {}
    for r in results:
        cells.setdefault((r.family, r.task), []).append(r.test_mse)
    return {k: {"mean": float(np.mean(v)), "std": float(np.std(v)), "n": len(v)} for k, v in cells.items()}


def win_loss_matrix(results: Sequence[RunResult], families: Sequence[str] | None = None):
    """Pairwise win fractions over tasks, comparing mean test MSE only.

    Returns (families, fractions, wins, trials). ``fractions[a, b]`` is the
    share of tasks both families ran on where family a has the strictly lower
    mean; exact ties award nothing and the diagonal is NaN.
    """
    summary = summarize(results)
    counts = {}
    for (fam, task), s in summary.items():
        counts.setdefault(task, set()).add(s["n"])
    for task, ns in counts.items():
        if len(ns) > 1:
            raise ValueError(f"task {task!r}: families have different replicate counts {sorted(ns)}")
    if families is None:
        families = sorted({f for f, _ in summary})
    families = list(families)
    tasks = sorted({t for _, t in summary})
    k = len(families)
    wins = np.zeros((k, k), dtype=int)
    trials = np.zeros((k, k), dtype=int)
    for a, fa in enumerate(families):
        for b, fb in enumerate(families):
            if a == b:
                continue
            for t in tasks:
                sa, sb = summary.get((fa, t)), summary.get((fb, t))
                if sa is None or sb is None:
                    continue
                trials[a, b] += 1
                wins[a, b] += sa["mean"] < sb["mean"]
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(trials > 0, wins / np.maximum(trials, 1), np.nan)
    np.fill_diagonal(frac, np.nan)
    return families, frac, wins, trials


def bench_report(bench: BenchResult) -> dict:
    """JSON-ready summary: per-cell stats, win-loss matrix, binomial p-values."""
    families, frac, wins, trials = win_loss_matrix(bench.results, bench.families)
    pairs = []
    for a, fa in enumerate(families):
        for b, fb in enumerate(families):
            if a == b or trials[a, b] == 0:
                continue
            p = binomial_test_one_tailed(int(wins[a, b]), int(trials[a, b]))
            pairs.append({"row": fa, "column": fb, "wins": int(wins[a, b]), "trials": int(trials[a, b]),
                          "fraction": float(frac[a, b]), "p_value": p, "marker": significance_marker(p)})
    summary = summarize(bench.results)
    return {
        "config": asdict(bench.config),
        "families": families,
        "tasks": bench.tasks,
        "cells": [{"family": f, "task": t, **s} for (f, t), s in sorted(summary.items())],
        "win_loss": {
            "families": families,
            "matrix": [[None if math.isnan(x) else float(x) for x in row] for row in frac],
        },
        "pairs": pairs,
        "failures": [asdict(f) for f in bench.failures],
        "runs": [r.to_dict() for r in bench.results],
        "seconds": bench.seconds,
    }


def write_metrics_csv(results: Sequence[RunResult], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in sorted(results, key=lambda r: (r.family, r.task, r.replicate)):
            w.writerow([r.family, r.task, r.replicate, repr(r.best_lr), repr(r.val_mse), repr(r.test_mse),
                        r.parameter_count, f"{r.wall_time_seconds:.3f}"])


def read_metrics_csv(path) -> list[RunResult]:
    """Parse a metrics CSV; malformed rows raise ValueError naming the line."""
    results = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty metrics file")
        if tuple(header) != CSV_HEADER:
            raise ValueError(f"{path}:1: expected header {','.join(CSV_HEADER)}")
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(CSV_HEADER):
                raise ValueError(f"{path}:{line}: expected {len(CSV_HEADER)} fields, got {len(row)}")
            try:
                fam, task, rep, lr, val, test, params, secs = row
                results.append(RunResult(fam, task, int(rep), 0, float(lr), float(val), float(test), [],
                                         int(params), float(secs)))
            except ValueError as exc:
                raise ValueError(f"{path}:{line}: {exc}") from exc
    if not results:
        raise ValueError(f"{path}: no metric rows")
    return results

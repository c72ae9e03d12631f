"""Synthetic point-cloud benchmarks and exact aggregation oracles.

Vector tasks draw a cloud of ``n`` points in ``dim`` dimensions, apply a random
affine map ``a * x + b`` and label the cloud with a vector aggregate. Scalar
tasks draw ``n`` digit labels in 1..9 and label them with a scalar aggregate.

Every oracle is exactly permutation invariant: any reduction whose floating
point result could depend on summation order runs over sorted values, and
every tie rule breaks on values rather than on input positions.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

__all__ = [
    "VECTOR_TASKS",
    "SCALAR_TASKS",
    "TASKS",
    "GENERATOR_VERSION",
    "TaskSpec",
    "DatasetRecord",
    "Dataset",
    "default_task",
    "generate_dataset",
    "oracle_vector",
    "oracle_scalar",
    "oracle",
    "write_dataset",
    "read_dataset",
]

VECTOR_TASKS = ("marginal_median", "geometric_median", "medoid", "quadratic_mean", "midpoint",
                "vec_max_norm", "row_max", "log_sum_exp", "variance", "skewness")
SCALAR_TASKS = ("mean", "median", "mode", "geometric_mean", "harmonic_mean", "log_mean_exp",
                "midrange", "variance_s", "max_s", "sum_s")
TASKS = VECTOR_TASKS + SCALAR_TASKS

GENERATOR_VERSION = 1
SPLITS = ("train", "val", "test")
# how many records per split are re-labelled and compared when a dataset is read back
SPOT_CHECKS = 8


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    n_min: int = 2
    n_max: int = 1024
    dim: int = 16
    affine_scale_range: tuple[float, float] = (0.0, 1.0)
    affine_shift_range: tuple[float, float] = (-10.0, 10.0)

    def __post_init__(self):
        if self.kind not in TASKS:
            raise ValueError(f"unknown task {self.kind!r}; valid kinds: {', '.join(TASKS)}")
        if not 2 <= self.n_min <= self.n_max:
            raise ValueError(f"need 2 <= n_min <= n_max, got n_min={self.n_min}, n_max={self.n_max}")
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if self.is_scalar and self.dim != 1:
            raise ValueError(f"scalar task {self.kind!r} needs dim=1")

    @property
    def is_scalar(self) -> bool:
        return self.kind in SCALAR_TASKS

    @property
    def target_width(self) -> int:
        return 1 if self.is_scalar else self.dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["affine_scale_range"] = list(self.affine_scale_range)
        d["affine_shift_range"] = list(self.affine_shift_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        d = dict(d)
        for key in ("affine_scale_range", "affine_shift_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def default_task(kind: str) -> TaskSpec:
    """Vector tasks: n in [2, 1024], dim 16. Scalar tasks: n in [2, 16], dim 1."""
    if kind in SCALAR_TASKS:
        return TaskSpec(kind, n_min=2, n_max=16, dim=1)
    return TaskSpec(kind)


@dataclass
class DatasetRecord:
    points: np.ndarray
    target: np.ndarray

    def to_json(self) -> str:
        # repr() of a Python float round-trips exactly, so the file is lossless
        return json.dumps({"points": self.points.tolist(), "target": self.target.tolist()},
                          separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "DatasetRecord":
        obj = json.loads(line)
        points = np.asarray(obj["points"], dtype=np.float64)
        if points.ndim != 2:
            raise ValueError("record points must be a list of vectors")
        return cls(points, np.asarray(obj["target"], dtype=np.float64).reshape(-1))


@dataclass
class Dataset:
    task: TaskSpec
    seed: int
    train: list[DatasetRecord] = field(default_factory=list)
    val: list[DatasetRecord] = field(default_factory=list)
    test: list[DatasetRecord] = field(default_factory=list)

    def split(self, name: str) -> list[DatasetRecord]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    @property
    def counts(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def _record_rng(seed: int, split_id: int, index: int) -> np.random.Generator:
    # SeedSequence hashes the triple, so every record owns an independent stream
    return np.random.default_rng([int(seed), split_id, index])


def _make_record(task: TaskSpec, rng: np.random.Generator) -> DatasetRecord:
    n = int(rng.integers(task.n_min, task.n_max + 1))
    if task.is_scalar:
        points = rng.integers(1, 10, size=(n, 1)).astype(np.float64)
    else:
        x = rng.uniform(0.0, 1.0, size=(n, task.dim))
        a = rng.uniform(*task.affine_scale_range)
        b = rng.uniform(*task.affine_shift_range, size=task.dim)
        points = a * x + b
    return DatasetRecord(points, oracle(task.kind, points))


def generate_dataset(task: TaskSpec, counts: Sequence[int], seed: int) -> Dataset:
    counts = tuple(int(c) for c in counts)
    if len(counts) != 3 or min(counts) < 1:
        raise ValueError(f"counts must be three positive integers, got {counts}")
    ds = Dataset(task, int(seed))
    for split_id, (name, count) in enumerate(zip(SPLITS, counts)):
        ds.split(name).extend(_make_record(task, _record_rng(seed, split_id, i)) for i in range(count))
    return ds


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------


def _as_points(points) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    if p.ndim == 1:
        p = p[:, None]
    if p.ndim != 2 or len(p) == 0:
        raise ValueError("an aggregation oracle needs at least one point")
    return p


def _lex_order(p: np.ndarray) -> np.ndarray:
    """Row indices sorting the rows lexicographically (first coordinate first)."""
    return np.lexsort(p.T[::-1])


def _sorted_sum(v: np.ndarray, axis=0) -> np.ndarray:
    return np.sort(v, axis=axis).sum(axis=axis)


def _mean(p: np.ndarray) -> np.ndarray:
    return _sorted_sum(p) / len(p)


def _median(p: np.ndarray) -> np.ndarray:
    s = np.sort(p, axis=0)
    n = len(s)
    if n % 2:
        return s[n // 2].copy()
    return 0.5 * (s[n // 2 - 1] + s[n // 2])


def _population_variance(p: np.ndarray) -> np.ndarray:
    d = p - _mean(p)
    return _sorted_sum(d * d) / len(p)


def _medoid(p: np.ndarray) -> np.ndarray:
    totals = _sorted_sum(cdist(p, p), axis=1)
    winners = p[totals == totals.min()]
    return winners[_lex_order(winners)[0]].copy()


def _midpoint(p: np.ndarray) -> np.ndarray:
    if len(p) < 2:
        raise ValueError("midpoint needs at least two points")
    d = cdist(p, p)
    i, j = np.nonzero(np.triu(d == d.max(), k=1))
    # order each pair lexicographically, then pick the lexicographically smallest pair
    best = None
    for a, b in zip(i, j):
        lo, hi = sorted((tuple(p[a]), tuple(p[b])))
        if best is None or (lo, hi) < best:
            best = (lo, hi)
    lo, hi = (np.asarray(v) for v in best)
    return 0.5 * (lo + hi)


def _vec_max_norm(p: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(p, axis=1)
    winners = p[norms == norms.max()]
    return winners[_lex_order(winners)[0]].copy()


def _skewness(p: np.ndarray) -> np.ndarray:
    mu = _mean(p)
    sigma = np.sqrt(_population_variance(p))
    out = np.zeros(p.shape[1])
    ok = sigma > 0
    if ok.any():
        z = (p[:, ok] - mu[ok]) / sigma[ok]
        out[ok] = _sorted_sum(z * z * z) / len(p)
    return out


_VECTOR = {
    "marginal_median": _median,
    # the L1 objective separates by coordinate, so it is minimised by the median
    "geometric_median": _median,
    "medoid": _medoid,
    "quadratic_mean": lambda p: np.sqrt(_sorted_sum(p * p) / len(p)),
    "midpoint": _midpoint,
    "vec_max_norm": _vec_max_norm,
    "row_max": lambda p: p.max(axis=0),
    "log_sum_exp": lambda p: logsumexp(np.sort(p, axis=0), axis=0),
    "variance": _population_variance,
    "skewness": _skewness,
}


def oracle_vector(kind: str, points) -> np.ndarray:
    if kind not in _VECTOR:
        raise ValueError(f"unknown vector task {kind!r}")
    return np.asarray(_VECTOR[kind](_as_points(points)), dtype=np.float64)


def _mode(v: np.ndarray) -> float:
    values, freq = np.unique(v, return_counts=True)
    return float(values[np.argmax(freq)])  # unique() sorts, argmax takes the first


def _positive(v: np.ndarray, kind: str) -> np.ndarray:
    if (v <= 0).any():
        raise ValueError(f"{kind} needs strictly positive values")
    return v


_SCALAR = {
    "mean": lambda v: _sorted_sum(v) / len(v),
    "median": lambda v: _median(v[:, None])[0],
    "mode": _mode,
    "geometric_mean": lambda v: math.exp(_sorted_sum(np.log(_positive(v, "geometric_mean"))) / len(v)),
    "harmonic_mean": lambda v: len(v) / _sorted_sum(1.0 / _positive(v, "harmonic_mean")),
    "log_mean_exp": lambda v: logsumexp(np.sort(v)) - math.log(len(v)),
    "midrange": lambda v: 0.5 * (v.min() + v.max()),
    "variance_s": lambda v: _population_variance(v[:, None])[0],
    "max_s": lambda v: v.max(),
    "sum_s": lambda v: _sorted_sum(v),
}


def oracle_scalar(kind: str, values) -> float:
    if kind not in _SCALAR:
        raise ValueError(f"unknown scalar task {kind!r}")
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise ValueError("an aggregation oracle needs at least one value")
    return float(_SCALAR[kind](v))


def oracle(kind: str, points) -> np.ndarray:
    """Target vector for a record of task ``kind`` (length 1 for scalar tasks)."""
    if kind in SCALAR_TASKS:
        return np.array([oracle_scalar(kind, points)])
    return oracle_vector(kind, points)


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_dataset(ds: Dataset, out_dir) -> Path:
    """Write train/val/test JSONL files and a manifest; returns the manifest path."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        files = {}
        for name in SPLITS:
            path = out / f"{name}.jsonl"
            with path.open("w", encoding="utf-8") as fh:
                for rec in ds.split(name):
                    fh.write(rec.to_json())
                    fh.write("\n")
            files[name] = {"file": path.name, "sha256": _file_digest(path)}
        manifest = {
            "task": ds.task.kind,
            "task_spec": ds.task.to_dict(),
            "counts": dict(zip(SPLITS, ds.counts)),
            "seed": ds.seed,
            "dim": ds.task.dim,
            "generator_version": GENERATOR_VERSION,
            "files": files,
        }
        path = out / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write dataset to {out}: {exc}") from exc
    return path


def _read_records(path: Path) -> list[DatasetRecord]:
    records = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(DatasetRecord.from_json(line))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed record ({exc})") from exc
    return records


def read_dataset(data_dir, spot_checks: int = SPOT_CHECKS) -> Dataset:
    """Load a dataset written by :func:`write_dataset`.

    The first ``spot_checks`` records of every split are re-labelled with the
    oracle and must reproduce the stored target bit for bit.
    """
    base = Path(data_dir)
    manifest_path = base / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise OSError(f"cannot read manifest {manifest_path}: {exc}") from exc
    if manifest.get("generator_version") != GENERATOR_VERSION:
        raise ValueError(f"{manifest_path}: unsupported generator version {manifest.get('generator_version')}")
    task = TaskSpec.from_dict(manifest["task_spec"])
    ds = Dataset(task, int(manifest["seed"]))
    for name in SPLITS:
        path = base / manifest["files"][name]["file"]
        try:
            records = _read_records(path)
        except OSError as exc:
            raise OSError(f"cannot read {path}: {exc}") from exc
        if len(records) != manifest["counts"][name]:
            raise ValueError(f"{path}: expected {manifest['counts'][name]} records, found {len(records)}")
        for i, rec in enumerate(records[:spot_checks]):
            if not np.array_equal(oracle(task.kind, rec.points), rec.target):
                raise ValueError(f"{path}: record {i} target does not match the {task.kind} oracle")
        ds.split(name).extend(records)
    return ds


def iter_batches(records: Sequence[DatasetRecord], batch_size: int,
                 order: Iterable[int] | None = None):
    """Yield (points list, targets array) chunks in the given record order."""
    idx = list(range(len(records))) if order is None else list(order)
    for start in range(0, len(idx), batch_size):
        chunk = [records[i] for i in idx[start:start + batch_size]]
        yield [r.points for r in chunk], np.stack([r.target for r in chunk])

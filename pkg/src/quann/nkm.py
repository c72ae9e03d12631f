"""Neuralized Kolmogorov mean pooling, fixed poolings, the power mean, and the
analytic derivative of the Kolmogorov mean.

Poolings come in two flavours. The public ``*_pool`` functions take a padded
:class:`SetBatch`; the ``pool_*`` helpers take the already-gathered valid rows
plus their :class:`~quann.autodiff.Segments`, which is what the models use so
that padded slots never enter any arithmetic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Protocol, Sequence

import numpy as np
from scipy.special import logsumexp

from .autodiff import DomainError, Segments, ShapeError, Tensor, jacobian

__all__ = [
    "EmptySetError",
    "SingularGeneratorError",
    "GeneratingFunction",
    "Identity",
    "Affine",
    "Exponential",
    "Log",
    "Power",
    "SetBatch",
    "nkm_pool",
    "pool_nkm",
    "fixed_pool",
    "pool_fixed",
    "power_mean_pool",
    "pool_power_mean",
    "clamp_exponent",
    "closed_form_kolmogorov",
    "nkm_jacobian",
    "MIN_EXPONENT",
    "COND_LIMIT",
]

MIN_EXPONENT = 1e-3
COND_LIMIT = 1e12


class EmptySetError(ValueError):
    """The Kolmogorov mean (and every other pooling here) of an empty set."""


class SingularGeneratorError(ArithmeticError):
    pass


class GeneratingFunction(Protocol):
    def forward(self, x: Tensor) -> Tensor: ...

    def inverse(self, y: Tensor) -> Tensor: ...


# ---------------------------------------------------------------------------
# Closed-form scalar generators. Each works both on Tensors (so it can drive
# nkm_pool) and on plain arrays via f / f_inv.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Identity:
    def forward(self, x):
        return x

    def inverse(self, y):
        return y


@dataclass(frozen=True)
class Affine:
    w1: float
    w2: float

    def __post_init__(self):
        if self.w1 == 0:
            raise ValueError("affine generator needs w1 != 0")

    def forward(self, x):
        return x * self.w1 + self.w2

    def inverse(self, y):
        return (y - self.w2) * (1.0 / self.w1)

    def f(self, x):
        return self.w1 * np.asarray(x, dtype=np.float64) + self.w2

    def f_inv(self, y):
        return (y - self.w2) / self.w1


@dataclass(frozen=True)
class Exponential:
    """exp(w x); the induced mean is the scaled log-mean-exp."""

    w: float = 1.0

    def __post_init__(self):
        if self.w == 0:
            raise ValueError("exponential generator needs w != 0")

    def forward(self, x):
        return (x * self.w).exp()

    def inverse(self, y):
        return y.log() * (1.0 / self.w)

    def f(self, x):
        return np.exp(self.w * np.asarray(x, dtype=np.float64))

    def f_inv(self, y):
        return np.log(y) / self.w


@dataclass(frozen=True)
class Log:
    def forward(self, x):
        return x.log()

    def inverse(self, y):
        return y.exp()

    def f(self, x):
        x = np.asarray(x, dtype=np.float64)
        if (x <= 0).any():
            raise DomainError("log generator needs strictly positive values")
        return np.log(x)

    def f_inv(self, y):
        return np.exp(y)


@dataclass(frozen=True)
class Power:
    p: float

    def __post_init__(self):
        if self.p == 0:
            raise ValueError("power generator needs p != 0")

    def forward(self, x):
        return x ** self.p

    def inverse(self, y):
        return y ** (1.0 / self.p)

    def f(self, x):
        x = np.asarray(x, dtype=np.float64)
        if (x <= 0).any():
            raise DomainError("power generator needs strictly positive values")
        return x ** self.p

    def f_inv(self, y):
        return y ** (1.0 / self.p)


def closed_form_kolmogorov(generator, values: Sequence[float]) -> float:
    """Quasi-arithmetic mean f^-1(mean f(x)) of a scalar sample."""
    x = np.asarray(values, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise EmptySetError("Kolmogorov mean of an empty set")
    n = x.size
    if isinstance(generator, Identity):
        return float(np.mean(x))
    if isinstance(generator, Exponential):
        # log-sum-exp route around the extreme value; exp(w x) overflows for
        # w x >~ 709. Centring keeps constants exact: the log term is then
        # log(n) - log(n) = 0.
        w = generator.w
        m = x.max() if w > 0 else x.min()
        return float(m + (logsumexp(w * (x - m)) - math.log(n)) / w)
    if isinstance(generator, Log):
        return float(np.exp(np.mean(generator.f(x))))
    if isinstance(generator, (Affine, Power)):
        return float(generator.f_inv(np.mean(generator.f(x))))
    raise TypeError(f"no closed form for generator {generator!r}")


# ---------------------------------------------------------------------------
# Set batches
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class SetBatch:
    """Padded batch of variable-cardinality sets.

    ``data`` has shape (batch, n_max, width); ``mask[b, i]`` is true for the
    first ``cardinalities[b]`` slots of row b and padded slots hold zeros.
    """

    data: Tensor
    mask: np.ndarray
    cardinalities: tuple[int, ...]

    def __post_init__(self):
        if not isinstance(self.data, Tensor):
            self.data = Tensor(self.data)
        self.mask = np.asarray(self.mask, dtype=bool)
        self.cardinalities = tuple(int(c) for c in self.cardinalities)
        if self.data.ndim != 3:
            raise ShapeError(f"set batch data must be (batch, n_max, width), got {self.data.shape}")
        if self.mask.shape != self.data.shape[:2]:
            raise ShapeError(f"mask shape {self.mask.shape} does not match data {self.data.shape}")
        if len(self.cardinalities) != self.mask.shape[0]:
            raise ShapeError("one cardinality per batch row expected")
        expected = np.arange(self.mask.shape[1])[None, :] < np.asarray(self.cardinalities)[:, None]
        if not np.array_equal(expected, self.mask):
            raise ValueError("mask must have exactly `cardinality` leading true entries per row")
        if np.any(self.data.data[~self.mask]):
            raise ValueError("padded slots must hold zeros")

    @classmethod
    def from_sets(cls, sets: Sequence, n_max: int | None = None) -> "SetBatch":
        arrays = [np.asarray(s, dtype=np.float64) for s in sets]
        if not arrays:
            raise ValueError("a set batch needs at least one set")
        arrays = [a.reshape(len(a), -1) if a.ndim != 2 else a for a in arrays]
        width = arrays[0].shape[1]
        if any(a.shape[1] != width for a in arrays):
            raise ShapeError("all sets in a batch must share the element width")
        counts = [len(a) for a in arrays]
        n_max = max(counts) if n_max is None else n_max
        if max(counts) > n_max:
            raise ValueError(f"set of size {max(counts)} exceeds n_max={n_max}")
        data = np.zeros((len(arrays), max(n_max, 1), width))
        for b, a in enumerate(arrays):
            data[b, :len(a)] = a
        mask = np.arange(data.shape[1])[None, :] < np.asarray(counts)[:, None]
        return cls(Tensor._wrap(data), mask, tuple(counts))

    @property
    def batch_size(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @cached_property
    def index(self) -> tuple[np.ndarray, np.ndarray]:
        return np.nonzero(self.mask)

    @cached_property
    def segments(self) -> Segments:
        return Segments.from_counts(self.cardinalities)

    def require_nonempty(self) -> None:
        if min(self.cardinalities) < 1:
            raise EmptySetError(f"set {self.cardinalities.index(0)} in the batch is empty")

    def rows(self) -> Tensor:
        """Valid elements of every set stacked into (total, width)."""
        return self.data[self.index]

    def sets(self) -> list[np.ndarray]:
        return [self.data.data[b, :n].copy() for b, n in enumerate(self.cardinalities)]


# ---------------------------------------------------------------------------
# Poolings over gathered rows
# ---------------------------------------------------------------------------


def _check_segments(rows: Tensor, segments: Segments) -> None:
    if (segments.counts == 0).any():
        raise EmptySetError("cannot pool an empty set")
    if rows.shape[0] != segments.total:
        raise ShapeError(f"{rows.shape[0]} rows but segments cover {segments.total}")


def pool_nkm(psi: GeneratingFunction, rows: Tensor, segments: Segments,
             normalize: bool = True) -> Tensor:
    """psi^-1(mean psi(z)) per segment; plain sum inside when normalize=False."""
    _check_segments(rows, segments)
    z = psi.forward(rows)
    agg = z.mean(segments=segments) if normalize else z.sum(segments=segments)
    return psi.inverse(agg)


def pool_fixed(kind: str, rows: Tensor, segments: Segments) -> Tensor:
    _check_segments(rows, segments)
    if kind == "sum":
        return rows.sum(segments=segments)
    if kind == "mean":
        return rows.mean(segments=segments)
    if kind == "max":
        return rows.max(segments=segments)
    raise ValueError(f"unknown fixed pooling {kind!r}; expected sum, mean or max")


def clamp_exponent(w: Tensor) -> Tensor:
    """Keep |w| >= MIN_EXPONENT; a clamped exponent is treated as a constant."""
    val = float(w.data)
    if abs(val) >= MIN_EXPONENT:
        return w
    return Tensor(math.copysign(MIN_EXPONENT, val if val != 0 else 1.0))


def pool_power_mean(w: Tensor, rows: Tensor, segments: Segments) -> Tensor:
    """Elementwise (mean z^w)^(1/w) per segment; z must be strictly positive."""
    _check_segments(rows, segments)
    if (rows.data <= 0).any():
        raise DomainError("power mean needs strictly positive latents (shift them upstream)")
    w = clamp_exponent(w if isinstance(w, Tensor) else Tensor(w))
    return (rows ** w).mean(segments=segments) ** (1.0 / w)


# ---------------------------------------------------------------------------
# Poolings over padded batches
# ---------------------------------------------------------------------------


def nkm_pool(psi: GeneratingFunction, latents: SetBatch) -> Tensor:
    latents.require_nonempty()
    return pool_nkm(psi, latents.rows(), latents.segments)


def fixed_pool(kind: str, latents: SetBatch) -> Tensor:
    latents.require_nonempty()
    return pool_fixed(kind, latents.rows(), latents.segments)


def power_mean_pool(w, latents: SetBatch) -> Tensor:
    latents.require_nonempty()
    return pool_power_mean(w, latents.rows(), latents.segments)


# ---------------------------------------------------------------------------
# Analytic derivative
# ---------------------------------------------------------------------------


def nkm_jacobian(psi: GeneratingFunction, set_latents, j: int) -> np.ndarray:
    """d M_psi / d z_j = (1/n) J_psi(y)^-1 J_psi(z_j), with y the pooled value.

    Both Jacobians come from reverse-mode autodiff; the inverse is a dense
    solve guarded by a condition-number check.
    """
    z = np.asarray(set_latents, dtype=np.float64)
    if z.ndim == 1:
        z = z[:, None]
    n = len(z)
    if n == 0:
        raise EmptySetError("Kolmogorov mean of an empty set")
    if not 0 <= j < n:
        raise IndexError(f"element index {j} out of range for a set of {n}")
    y = pool_nkm(psi, Tensor(z), Segments.from_counts([n])).data[0]
    jy = jacobian(psi.forward, y)
    jz = jacobian(psi.forward, z[j])
    cond = np.linalg.cond(jy)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularGeneratorError(f"J_psi at the pooled point is ill-conditioned (cond={cond:.3g})")
    return np.linalg.solve(jy, jz) / n

"""Numerical certification of the analytic properties of Kolmogorov means.

Each ``check_*`` returns a :class:`PropositionCheck`. A check passes when its
``observed_max_violation`` is at most zero; the worst instance is kept so a
failure can be replayed by hand.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .autodiff import Segments, Tensor
from .nets import RevNet, RevNetSpec
from .nkm import (Affine, Exponential, Identity, Log, Power, closed_form_kolmogorov, nkm_jacobian,
                  pool_nkm)

__all__ = [
    "PropositionCheck",
    "DEFAULT_TOLERANCE",
    "LINEAR_TOLERANCE",
    "DERIVATIVE_TOLERANCE",
    "check_linear_collapse",
    "check_max_bound",
    "check_sum_growth",
    "check_expected_sum_rescale",
    "check_appendix_derivative",
    "run_all",
    "report_json",
]

DEFAULT_TOLERANCE = 1e-9
LINEAR_TOLERANCE = 1e-10
DERIVATIVE_TOLERANCE = 1e-4
DEFAULT_N_VALUES = tuple(2 ** k for k in range(1, 11))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    return obj


@dataclass
class PropositionCheck:
    name: str
    instances: int
    params: dict
    bound: str
    observed_max_violation: float
    tolerance: float
    worst_instance: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.observed_max_violation <= 0.0

    def to_dict(self) -> dict:
        d = _jsonable(asdict(self))
        d["passed"] = self.passed
        return d


def _rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), tag])


# ---------------------------------------------------------------------------


def check_linear_collapse(instances: int = 1000, seed: int = 0, tolerance: float = LINEAR_TOLERANCE,
                          max_n: int = 64) -> PropositionCheck:
    """An affine generator induces the arithmetic mean."""
    if instances < 1:
        raise ValueError("instances must be at least 1")
    rng = _rng(seed, 1)
    worst = (-1.0, {})
    for i in range(instances):
        w1 = rng.uniform(0.1, 10.0)
        w2 = rng.uniform(-5.0, 5.0)
        x = rng.uniform(-10.0, 10.0, size=int(rng.integers(1, max_n + 1)))
        dev = abs(closed_form_kolmogorov(Affine(w1, w2), x) - float(np.mean(x)))
        if dev > worst[0]:
            worst = (dev, {"index": i, "w1": w1, "w2": w2, "x": x})
    return PropositionCheck(
        "linear_collapse", instances, {"w1_range": [0.1, 10.0], "w2_range": [-5.0, 5.0], "max_n": max_n},
        "|M_f(x) - mean(x)| = 0", worst[0] - tolerance, tolerance, worst[1], {"max_deviation": worst[0]})


def _exp_mean_rows(x: np.ndarray, w: float) -> np.ndarray:
    """Row-wise exponential Kolmogorov mean, centred on the row maximum."""
    m = x.max(axis=1)
    s = np.log(np.exp(w * (x - m[:, None])).sum(axis=1)) - math.log(x.shape[1])
    return m + s / w


def check_max_bound(w_values: Sequence[float] = (1.0, 5.0, 25.0), n_values: Sequence[int] = DEFAULT_N_VALUES,
                    instances: int = 1000, seed: int = 0,
                    tolerance: float = DEFAULT_TOLERANCE) -> PropositionCheck:
    """With psi = exp(w x) and identity a, b: 0 <= max(x) - M_psi(x) <= log(n) / w.

    Besides random sets, every (w, n) pair is probed with the extremal set
    (one element far above the rest) whose gap should reach the bound.
    """
    if any(w <= 0 for w in w_values):
        raise ValueError("the exponent w must be positive")
    rng = _rng(seed, 2)
    violation = -math.inf
    worst: dict = {}
    tightness = {}
    for w in w_values:
        for n in n_values:
            bound = math.log(n) / w
            x = rng.uniform(-5.0, 5.0, size=(instances, n))
            gap = x.max(axis=1) - _exp_mean_rows(x, w)
            v = np.maximum(-gap, gap - bound) - tolerance
            k = int(np.argmax(v))
            if v[k] > violation:
                violation = float(v[k])
                worst = {"w": w, "n": n, "bound": bound, "gap": float(gap[k]), "x": x[k]}
            # extremal set: gap = log(n)/w - log(1 + (n-1) e^{-50}) / w
            spike = np.full((1, n), -50.0 / w)
            spike[0, 0] = 0.0
            extremal = float(-_exp_mean_rows(spike, w)[0])
            tightness[f"w={w},n={n}"] = extremal / bound if bound > 0 else 1.0
            v_ext = max(-extremal, extremal - bound) - tolerance
            if v_ext > violation:
                violation = v_ext
                worst = {"w": w, "n": n, "bound": bound, "gap": extremal, "x": spike[0]}
    # boundary cases that must collapse to a zero gap
    for w in w_values:
        for x in (np.array([[1.7]]), np.full((1, 7), -2.25)):
            gap = float(x.max() - _exp_mean_rows(x, w)[0])
            if abs(gap) - tolerance > violation:
                violation = abs(gap) - tolerance
                worst = {"w": w, "n": x.shape[1], "bound": 0.0, "gap": gap, "x": x[0]}
    return PropositionCheck(
        "max_bound", instances * len(w_values) * len(n_values),
        {"w": list(w_values), "n_range": [min(n_values), max(n_values)], "L_a": 1.0},
        "0 <= max(x) - M_exp(x) <= L_a * log(n) / w", violation, tolerance, worst,
        {"extremal_gap_over_bound": tightness})


def _random_generator(rng: np.random.Generator, kind: str):
    if kind == "identity":
        return Identity()
    if kind == "affine":
        return Affine(rng.uniform(0.1, 10.0), rng.uniform(-5.0, 5.0))
    if kind == "exponential":
        return Exponential(rng.uniform(0.5, 5.0))
    if kind == "log":
        return Log()
    return Power(rng.uniform(0.5, 3.0))


_GENERATOR_KINDS = ("identity", "affine", "exponential", "log", "power")


def check_sum_growth(n_values: Sequence[int] = (2, 8, 32, 128), instances: int = 200, seed: int = 0,
                     b0: float = 0.5, b1: float = 1.0) -> PropositionCheck:
    """A Kolmogorov mean of values in (B0, B1) misses the sum by at least nB0 - B1.

    For each closed-form generator family the error |sum(x) - M_f(x)| is
    averaged per n and a least-squares slope is fitted against n; the check
    needs the smallest slope to reach 0.9 * B0.
    """
    if not 0 < b0 < b1:
        raise ValueError("need 0 < B0 < B1")
    if len(n_values) < 2:
        raise ValueError("at least two cardinalities are needed to fit a slope")
    rng = _rng(seed, 3)
    threshold = 0.9 * b0
    slopes = {}
    for kind in _GENERATOR_KINDS:
        errs = []
        for n in n_values:
            e = []
            for _ in range(instances):
                x = rng.uniform(b0, b1, size=n)
                e.append(abs(float(np.sum(x)) - closed_form_kolmogorov(_random_generator(rng, kind), x)))
            errs.append(float(np.mean(e)))
        slopes[kind] = (float(np.polyfit(np.asarray(n_values, dtype=float), errs, 1)[0]), errs)
    weakest = min(slopes, key=lambda k: slopes[k][0])
    # constant sets: the mean is the constant, so the error is exactly (n - 1) c
    const_err = 0.0
    for n in n_values:
        c = b0
        got = float(np.sum(np.full(n, c))) - closed_form_kolmogorov(Identity(), np.full(n, c))
        const_err = max(const_err, abs(got - (n - 1) * c))
    violation = max(threshold - slopes[weakest][0], const_err - DEFAULT_TOLERANCE)
    return PropositionCheck(
        "sum_growth", instances * len(n_values) * len(_GENERATOR_KINDS),
        {"n_values": list(n_values), "B0": b0, "B1": b1, "L_a": 1.0, "regime": "n*B1 >= w*B0"},
        "slope of |sum(x) - M_f(x)| against n >= 0.9 * B0", violation, 0.0,
        {"generator": weakest, "slope": slopes[weakest][0], "mean_errors": slopes[weakest][1]},
        {"slopes": {k: v[0] for k, v in slopes.items()}, "constant_set_error": const_err})


def _rescale_errors(rng, n_values, scale: Fraction, instances: int, b0, b1):
    errs = []
    draws = []
    for _ in range(instances):
        n = int(rng.choice(n_values))
        x = rng.uniform(b0, b1, size=n)
        exact = [Fraction(float(v)) for v in x]
        total = sum(exact, Fraction(0))
        # identity generator: M(scale * x) = scale * mean(x), evaluated exactly
        approx = scale * total / n
        errs.append(abs(total - approx))
        draws.append(x)
    return errs, draws


def check_expected_sum_rescale(n_distribution: Sequence[int] = (9, 10, 11), instances: int = 500, seed: int = 0,
                               b0: float = 0.5, b1: float = 1.0,
                               tolerance: float = DEFAULT_TOLERANCE) -> PropositionCheck:
    """Scaling the encoder by the expected cardinality makes the mean track the sum.

    ``n_distribution`` lists equally likely cardinalities with mean n_bar.
    Errors are computed in exact rational arithmetic. Passing needs the
    rescaled mean error to beat the unscaled one (unless the distribution is
    already degenerate) and, when n_bar is an integer, the degenerate
    companion n = n_bar to give errors within ``tolerance`` (they are exactly 0).
    """
    values = [int(n) for n in n_distribution]
    if not values:
        raise ValueError("the cardinality distribution is empty")
    if min(values) < 1:
        raise ValueError("cardinalities must be positive")
    n_bar = Fraction(sum(values), len(values))
    scaled, draws = _rescale_errors(_rng(seed, 4), values, n_bar, instances, b0, b1)
    plain, _ = _rescale_errors(_rng(seed, 4), values, Fraction(1), instances, b0, b1)
    mean_scaled = float(sum(scaled, Fraction(0)) / instances)
    mean_plain = float(sum(plain, Fraction(0)) / instances)
    violations = []
    if len(set(values)) > 1:
        violations.append(mean_scaled - mean_plain)
    worst = {}
    degenerate_max = None
    if n_bar.denominator == 1:
        degen, degen_draws = _rescale_errors(_rng(seed, 6), [int(n_bar)], n_bar, instances, b0, b1)
        k = max(range(instances), key=lambda i: degen[i])
        degenerate_max = float(degen[k])
        violations.append(degenerate_max - tolerance)
        worst = {"n": int(n_bar), "error": degenerate_max, "x": degen_draws[k]}
    if not worst:
        k = max(range(instances), key=lambda i: scaled[i])
        worst = {"error": float(scaled[k]), "x": draws[k]}
    return PropositionCheck(
        "expected_sum_rescale", instances,
        {"n_distribution": values, "n_bar": float(n_bar), "B0": b0, "B1": b1, "scale": float(n_bar)},
        "E|sum(x) - n_bar * mean(x)| < E|sum(x) - mean(x)|; exactly 0 when n is constant",
        max(violations) if violations else -1.0, tolerance, worst,
        {"mean_error_scaled": mean_scaled, "mean_error_unscaled": mean_plain,
         "degenerate_max_error": degenerate_max})


def _fd_pool_jacobian(psi, z: np.ndarray, j: int, step: float = 1e-6) -> np.ndarray:
    seg = Segments.from_counts([len(z)])
    d = z.shape[1]
    jac = np.empty((d, d))
    for k in range(d):
        zp, zm = z.copy(), z.copy()
        zp[j, k] += step
        zm[j, k] -= step
        yp = pool_nkm(psi, Tensor(zp), seg).data[0]
        ym = pool_nkm(psi, Tensor(zm), seg).data[0]
        jac[:, k] = (yp - ym) / (2 * step)
    return jac


def check_appendix_derivative(dims: Sequence[int] = (8,), instances: int = 100, seed: int = 0,
                              tolerance: float = DERIVATIVE_TOLERANCE, max_n: int = 8) -> PropositionCheck:
    """Analytic Jacobian of the pooled value against finite differences.

    The random generators are 4-block RevNets with one hidden layer of 16.

    Also confirms that the generator Jacobian at the pooled point is
    non-singular and that scalar monotone generators give positive derivatives.
    """
    from .autodiff import jacobian

    rng = _rng(seed, 5)
    violation = -math.inf
    worst: dict = {}
    min_det = math.inf
    for dim in dims:
        for i in range(instances):
            psi = RevNet(RevNetSpec(dim), rng=np.random.default_rng(rng.integers(2 ** 63)))
            n = int(rng.integers(1, max_n + 1))
            z = rng.uniform(-1.0, 1.0, size=(n, dim))
            j = int(rng.integers(n))
            analytic = nkm_jacobian(psi, z, j)
            numeric = _fd_pool_jacobian(psi, z, j)
            rel = float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-300))
            pooled = pool_nkm(psi, Tensor(z), Segments.from_counts([n])).data[0]
            det = abs(float(np.linalg.det(jacobian(psi.forward, pooled))))
            min_det = min(min_det, det)
            v = max(rel - tolerance, 1e-12 - det)
            if v > violation:
                violation = v
                worst = {"dim": dim, "instance": i, "n": n, "j": j, "rel_err": rel, "det": det, "z": z}
    # scalar exponential generator: the derivative (1/n) e^{z_j - y} is positive
    min_scalar = math.inf
    for _ in range(instances):
        n = int(rng.integers(1, max_n + 1))
        z = rng.uniform(-3.0, 3.0, size=(n, 1))
        j = int(rng.integers(n))
        min_scalar = min(min_scalar, float(nkm_jacobian(Exponential(1.0), z, j)[0, 0]))
    if min_scalar <= 0:
        violation = max(violation, 1.0)
        worst = {"scalar_derivative": min_scalar}
    return PropositionCheck(
        "appendix_derivative", instances * len(dims),
        {"dims": list(dims), "max_n": max_n, "fd_step": 1e-6},
        "||J_analytic - J_fd|| / ||J_fd|| < tolerance; |det J_psi| > 1e-12; scalar derivative > 0",
        violation, tolerance, worst, {"min_abs_det": min_det, "min_scalar_derivative": min_scalar})


def run_all(seed: int = 0, tolerance: float | None = None) -> list[PropositionCheck]:
    """Every check at its default size. ``tolerance`` overrides the bound tolerances."""
    lin = LINEAR_TOLERANCE if tolerance is None else tolerance
    tol = DEFAULT_TOLERANCE if tolerance is None else tolerance
    return [
        check_linear_collapse(1000, seed, lin),
        check_max_bound(seed=seed, tolerance=tol),
        check_sum_growth(seed=seed),
        check_expected_sum_rescale((9, 10, 11), seed=seed, tolerance=tol),
        check_appendix_derivative(seed=seed),
    ]


def report_json(checks: Sequence[PropositionCheck]) -> str:
    return json.dumps([c.to_dict() for c in checks], indent=2)

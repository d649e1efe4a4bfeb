"""Agreement statistics: Pearson correlation, percentile bootstrap, paired one-tailed t-test.

Bootstrap resampling uses numpy's Philox4x64 counter-based generator. Resample
``i`` draws from ``Philox(SeedSequence(seed, spawn_key=(i,)))``, so every
resample's stream depends only on (seed, i) and serial and parallel runs agree.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DegenerateError, UndefinedStatisticError, UsageError
from .quant import mae

DEFAULT_RESAMPLES = 1000
REDRAW_FACTOR = 10


@dataclass(frozen=True)
class BootstrapResult:
    point: float
    lo: float
    hi: float
    n_resamples: int
    seed: int
    redraws: int = 0

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class TTestResult:
    t: float
    p_one_tailed: float
    df: int
    flag: str | None = None  # "infinite-t" or "degenerate"

    def to_dict(self):
        return asdict(self)


def pearson(xs, ys) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise UsageError(f"pearson needs two equal-length 1D samples, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise UsageError("pearson needs at least two pairs")
    dx = x - math.fsum(x) / x.size
    dy = y - math.fsum(y) / y.size
    sxx = math.fsum(dx * dx)
    syy = math.fsum(dy * dy)
    if sxx == 0 or syy == 0:
        raise UndefinedStatisticError("correlation undefined for a constant sample")
    # sqrt of the product: identical samples then give exactly 1.0
    r = math.fsum(dx * dy) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def mae_stat(xs, ys) -> float:
    return mae(np.asarray(xs, dtype=np.float64).tolist(), np.asarray(ys, dtype=np.float64).tolist())


# -- Student t distribution ---------------------------------------------------------

def _betacf(a, b, x, eps=1e-16, max_iter=100000):
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc_reg(a: float, b: float, x: float, one_minus_x: float | None = None) -> float:
    """Regularized incomplete beta I_x(a, b).

    ``one_minus_x`` may be passed when 1 - x is known more accurately than the
    subtraction would give.
    """
    if one_minus_x is None:
        one_minus_x = 1.0 - x
    if x <= 0.0:
        return 0.0
    if one_minus_x <= 0.0:
        return 1.0
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log(one_minus_x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, one_minus_x) / b


def t_sf(t: float, df: float) -> float:
    """Upper tail P(T > t) of Student's t with ``df`` degrees of freedom."""
    if df < 1:
        raise UsageError(f"degrees of freedom must be >= 1, got {df}")
    if math.isnan(t):
        raise UsageError("t is NaN")
    if math.isinf(t):
        return 0.0 if t > 0 else 1.0
    t2 = t * t
    # x = df / (df + t^2); tail = I_x(df/2, 1/2) / 2
    tail = 0.5 * betainc_reg(df / 2.0, 0.5, df / (df + t2), t2 / (df + t2))
    return tail if t >= 0 else 1.0 - tail


def t_cdf(t: float, df: float) -> float:
    """Student t CDF via the regularized incomplete beta function."""
    if t >= 0:
        return 1.0 - t_sf(t, df)
    return t_sf(-t, df)


def paired_t_one_tailed(a, b) -> TTestResult:
    """Related-sample t-test of H1: mean(a) > mean(b).

    p = 1 - F_t(t; n - 1). Zero spread in the differences is flagged rather
    than raised: all-zero differences give t = 0, p = 0.5 ("degenerate"); a
    constant nonzero difference gives t = +/-inf ("infinite-t").
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise UsageError(f"paired samples must be equal-length 1D, got {a.shape} and {b.shape}")
    n = a.size
    if n < 2:
        raise UsageError("paired t-test needs at least two pairs")
    d = a - b
    mean = math.fsum(d) / n
    sd = math.sqrt(math.fsum((d - mean) ** 2) / (n - 1))
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, 0.5, n - 1, "degenerate")
        t = math.copysign(math.inf, mean)
        return TTestResult(t, t_sf(t, n - 1), n - 1, "infinite-t")
    t = mean / (sd / math.sqrt(n))
    return TTestResult(t, t_sf(t, n - 1), n - 1)


# -- bootstrap ------------------------------------------------------------------------

def resample_generator(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(index,))))


def bootstrap(stat, data, n_resamples: int = DEFAULT_RESAMPLES, seed: int = 0) -> BootstrapResult:
    """Percentile bootstrap (2.5th / 97.5th, linear interpolation) over paired cases.

    ``stat(xs, ys)`` is evaluated on index-resampled copies of the pairs. A
    resample on which ``stat`` raises UndefinedStatisticError is redrawn from
    the same stream; more than ``10 * n_resamples`` draws in total is an error.
    """
    pairs = np.asarray(list(data), dtype=np.float64)
    if pairs.size == 0:
        raise UsageError("bootstrap needs at least one case")
    if pairs.ndim != 2 or pairs.shape[1] != 2:
        raise UsageError(f"bootstrap data must be a list of pairs, got shape {pairs.shape}")
    if n_resamples < 1:
        raise UsageError(f"n_resamples must be >= 1, got {n_resamples}")
    xs, ys = pairs[:, 0], pairs[:, 1]
    n = len(pairs)
    point = stat(xs, ys)

    cap = REDRAW_FACTOR * n_resamples
    draws = 0
    values = np.empty(n_resamples)
    for i in range(n_resamples):
        rng = resample_generator(seed, i)
        while True:
            draws += 1
            if draws > cap:
                raise DegenerateError(f"statistic undefined on too many resamples ({cap} draws)")
            idx = rng.integers(0, n, size=n)
            try:
                values[i] = stat(xs[idx], ys[idx])
                break
            except UndefinedStatisticError:
                continue
    lo, hi = np.percentile(values, [2.5, 97.5])
    return BootstrapResult(float(point), float(lo), float(hi), n_resamples, seed, draws - n_resamples)

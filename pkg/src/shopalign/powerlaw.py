"""Truncated discrete power law: pmf, sampling, maximum-likelihood fitting, KS distance.

The pmf is ``p(x) ∝ x**-alpha * exp(-x / cutoff)`` on ``x = 1..size``. Fitted
quantities follow the discrete MLE with ``xmin = 1``.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import zeta

from .errors import ValidationError

_ALPHA_BOUNDS = (1.0 + 1e-6, 10.0)


def sample_truncated_power_law(alpha: float, cutoff: float, size: int) -> np.ndarray:
    """Normalised weights ``r**-alpha * exp(-r/cutoff)`` over ``r = 1..size``.

    ``cutoff=math.inf`` gives the plain (finite-support) power law.
    """
    if alpha <= 1:
        raise ValidationError(f"alpha must exceed 1, got {alpha}")
    if cutoff < 1:
        raise ValidationError(f"cutoff must be >= 1, got {cutoff}")
    if size < 1:
        raise ValidationError(f"size must be >= 1, got {size}")
    r = np.arange(1, size + 1, dtype=np.float64)
    # log space keeps exp(-r/cutoff) from underflowing to an all-zero row
    logw = -alpha * np.log(r)
    if math.isfinite(cutoff):
        logw -= r / cutoff
    w = np.exp(logw - logw.max())
    return w / w.sum()


def draw_power_law(alpha: float, cutoff: float, size: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` integer values in ``1..size`` from the truncated power law."""
    pmf = sample_truncated_power_law(alpha, cutoff, size)
    cdf = np.cumsum(pmf)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, rng.random(n), side="right") + 1


def _check_observations(values) -> np.ndarray:
    x = np.asarray(values)
    if x.ndim != 1 or len(x) < 100:
        raise ValidationError(f"need at least 100 observations, got {x.size}")
    if np.any(x < 1) or np.any(x != np.floor(x)):
        raise ValidationError("observations must be integers >= 1")
    if len(np.unique(x)) <= 2:
        raise ValidationError("degenerate sample: fewer than three distinct values")
    return x.astype(np.float64)


def _log_norm(alpha: float, lam: float, xmax: int | None) -> float:
    """log of sum_{x=1}^{xmax} x**-alpha * exp(-lam*x); xmax=None means unbounded."""
    if lam == 0.0 and xmax is None:
        return math.log(zeta(alpha, 1))
    m = xmax if xmax is not None else 2000
    x = np.arange(1, m + 1, dtype=np.float64)
    terms = -alpha * np.log(x) - lam * x
    top = terms.max()
    head = top + math.log(np.exp(terms - top).sum())
    if xmax is not None:
        return head
    # unbounded support: add the Hurwitz tail, damped by the cutoff at its start
    tail = zeta(alpha, m + 1) * math.exp(-lam * (m + 1)) if alpha > 1 else 0.0
    return math.log(math.exp(head) + tail)


def _fit_alpha(sum_log: float, sum_x: float, n: int, lam: float, xmax: int | None) -> tuple[float, float]:
    lo = _ALPHA_BOUNDS[0] if (lam == 0.0 and xmax is None) else -2.0

    def nll(a):
        return a * sum_log + lam * sum_x + n * _log_norm(a, lam, xmax)

    res = minimize_scalar(nll, bounds=(lo, _ALPHA_BOUNDS[1]), method="bounded", options={"xatol": 1e-7})
    return float(res.x), float(res.fun)


def fit_power_law_exponent(values, xmax: int | None = None) -> float:
    """Discrete MLE of the exponent with ``xmin = 1``.

    ``xmax`` bounds the support when the data come from a finite-support law.
    """
    x = _check_observations(values)
    if xmax is not None and x.max() > xmax:
        raise ValidationError(f"observation {x.max():.0f} exceeds xmax={xmax}")
    alpha, _ = _fit_alpha(float(np.log(x).sum()), float(x.sum()), len(x), 0.0, xmax)
    return alpha


def fit_truncated_power_law(values, xmax: int | None = None) -> tuple[float, float]:
    """Joint MLE of (alpha, cutoff) by profiling the likelihood over the cutoff rate.

    Returns ``cutoff = inf`` when the plain power law is the best fit.
    """
    x = _check_observations(values)
    sum_log, sum_x, n = float(np.log(x).sum()), float(x.sum()), len(x)

    def profile(log_lam):
        return _fit_alpha(sum_log, sum_x, n, math.exp(log_lam), xmax)[1]

    res = minimize_scalar(profile, bounds=(-16.0, 2.0), method="bounded", options={"xatol": 1e-4})
    lam = math.exp(float(res.x))
    alpha_cut, nll_cut = _fit_alpha(sum_log, sum_x, n, lam, xmax)
    alpha0, nll0 = _fit_alpha(sum_log, sum_x, n, 0.0, xmax)
    if nll0 <= nll_cut:
        return alpha0, math.inf
    return alpha_cut, 1.0 / lam


def ks_distance(values, pmf: np.ndarray) -> float:
    """Kolmogorov-Smirnov distance between integer samples on ``1..len(pmf)`` and ``pmf``."""
    x = np.asarray(values, dtype=np.int64)
    if x.size == 0:
        raise ValidationError("no samples")
    if x.min() < 1 or x.max() > len(pmf):
        raise ValidationError("samples outside the pmf support")
    emp = np.cumsum(np.bincount(x - 1, minlength=len(pmf))) / x.size
    return float(np.max(np.abs(emp - np.cumsum(pmf))))

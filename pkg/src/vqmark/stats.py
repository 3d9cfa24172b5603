"""Detection statistics and image-quality metrics.

The right-tailed binomial p-value is computed along two independent routes
(exact log-space summation for small T, regularized incomplete beta via a
continued fraction for large T); the routes agree to 1e-9 relative on an
overlap band, which the tests pin down.
"""

from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np
from scipy.ndimage import uniform_filter

from .core import DetectionReport

__all__ = [
    "EXACT_SUMMATION_LIMIT",
    "binom_p_right",
    "zscore",
    "detection_report",
    "tpr_at_fpr",
    "RocSummary",
    "summarize_scores",
    "psnr",
    "ssim",
    "PSNR_CAP_DB",
]

# largest T handled by direct summation; beyond it the beta route takes over
EXACT_SUMMATION_LIMIT = 10_000

PSNR_CAP_DB = 99.0

_BETA_TOL = 1e-12
_BETA_MAX_ITER = 500
_TINY = 1e-300


def _log_sum_exp(values) -> float:
    m = max(values)
    if m == -math.inf:
        return -math.inf
    return m + math.log(sum(math.exp(v - m) for v in values))


def _binom_p_sum(trials: int, k: int, gamma: float) -> float:
    """Pr(X >= k) by log-space summation of binomial pmf terms."""
    lg = math.log(gamma)
    lq = math.log1p(-gamma)
    lgn = math.lgamma(trials + 1)
    logs = []
    for i in range(k, trials + 1):
        logs.append(lgn - math.lgamma(i + 1) - math.lgamma(trials - i + 1)
                    + i * lg + (trials - i) * lq)
    return min(1.0, math.exp(_log_sum_exp(logs)))


def _betacf(a: float, b: float, x: float) -> float:
    # Lentz's continued fraction for the incomplete beta, as in the usual
    # numerical-recipes formulation; converges fast for x < (a+1)/(a+b+2).
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _TINY:
        d = _TINY
    d = 1.0 / d
    h = d
    for m in range(1, _BETA_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _BETA_TOL:
            return h
    raise RuntimeError("incomplete beta continued fraction did not converge")


def _betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b), tolerance 1e-12."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def binom_p_right(trials: int, n_green: int, gamma: float) -> float:
    """Exact right-tailed binomial p-value Pr(X >= n_green), X ~ Bin(trials, gamma).

    Parameters
    ----------
    trials : int
        Number of scored positions, >= 1.
    n_green : int
        Observed hit count, in [0, trials].
    gamma : float
        Null hit probability, strictly inside (0, 1).

    Up to ``EXACT_SUMMATION_LIMIT`` trials the tail is summed directly in log
    space; above that it is evaluated as the regularized incomplete beta
    I_gamma(n_green, trials - n_green + 1). n_green == 0 returns exactly 1.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if not 0 <= n_green <= trials:
        raise ValueError("n_green must lie in [0, trials]")
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must be in (0, 1)")
    if n_green == 0:
        return 1.0
    if trials <= EXACT_SUMMATION_LIMIT:
        return _binom_p_sum(trials, n_green, gamma)
    return min(1.0, _betainc_reg(float(n_green), float(trials - n_green + 1), gamma))


def zscore(trials: int, n_green: int, gamma: float) -> float:
    """Normal approximation score (n_green - T*gamma) / sqrt(T*gamma*(1-gamma)).

    No continuity correction; decisions come from binom_p_right, this is a
    reporting convenience.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must be in (0, 1)")
    return (n_green - trials * gamma) / math.sqrt(trials * gamma * (1.0 - gamma))


def detection_report(trials: int, n_green: int, gamma: float,
                     fpr_levels=(0.01,), per_scale=()) -> DetectionReport:
    """Assemble a DetectionReport from a hit count."""
    p = binom_p_right(trials, n_green, gamma)
    z = zscore(trials, n_green, gamma)
    detected = {level: p < level for level in fpr_levels}
    return DetectionReport(trials=trials, n_green=n_green, gamma=gamma,
                           z=z, p=p, detected_at=detected,
                           per_scale=tuple(per_scale))


def tpr_at_fpr(positive_p, level: float, negative_p=None) -> float:
    """True-positive rate at a target false-positive rate.

    Analytic mode (negative_p is None): the null calibration is trusted and
    the TPR is the fraction of positives with p < level. Empirical mode:
    the threshold is the level-quantile of the negative p-values and the TPR
    is the fraction of positives strictly below it; use this for detectors
    whose null is invented rather than exact.
    """
    pos = np.asarray(positive_p, dtype=np.float64)
    if pos.size == 0:
        raise ValueError("no positive scores given")
    if not 0.0 < level < 1.0:
        raise ValueError("level must be in (0, 1)")
    if negative_p is None:
        return float(np.mean(pos < level))
    neg = np.asarray(negative_p, dtype=np.float64)
    if neg.size == 0:
        raise ValueError("empirical mode needs negative scores")
    thresh = np.quantile(neg, level)
    return float(np.mean(pos < thresh))


@dataclass(frozen=True)
class RocSummary:
    """TPR at the requested FPR levels plus the median positive p-value."""

    levels: tuple
    tpr: tuple
    median_p: float
    n_positive: int
    n_negative: int


def summarize_scores(positive_p, negative_p=None, levels=(0.01,)) -> RocSummary:
    pos = np.asarray(positive_p, dtype=np.float64)
    tprs = tuple(tpr_at_fpr(pos, lv, negative_p) for lv in levels)
    n_neg = 0 if negative_p is None else len(negative_p)
    return RocSummary(levels=tuple(levels), tpr=tprs,
                      median_p=float(np.median(pos)), n_positive=pos.size,
                      n_negative=n_neg)


# ---------------------------------------------------------------------------
# Image quality


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for unit-range images, capped at 99."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("psnr needs equal shapes")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, -10.0 * math.log10(mse))


_SSIM_WINDOW = 7
_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity with a uniform 7x7 window, data range 1.

    Constants K1=0.01, K2=0.03. Channels are scored independently and
    averaged. Serves as the perceptual stand-in metric; negatives appear when
    local structure anti-correlates (e.g. an image against its negation).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("ssim needs equal shapes")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    size = (_SSIM_WINDOW, _SSIM_WINDOW, 1)
    mu_a = uniform_filter(a, size=size)
    mu_b = uniform_filter(b, size=size)
    var_a = uniform_filter(a * a, size=size) - mu_a ** 2
    var_b = uniform_filter(b * b, size=size) - mu_b ** 2
    cov = uniform_filter(a * b, size=size) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + _SSIM_C1) * (2.0 * cov + _SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + _SSIM_C1) * (var_a + var_b + _SSIM_C2)
    return float(np.mean(num / den))

"""Nonparametric variance estimators and Wald intervals for arm contrasts.

Everything here is on the sqrt(n) scale: ``sigma2`` estimates the asymptotic
variance of ``sqrt(n) * (tau_hat_b - tau_hat_c)``, so a confidence interval
divides by the target sample size ``n``.

Two variance forms are provided. ``plugin`` assumes the plugged coefficients
estimate the target projection coefficients (target lasso, transfer). The
``debiased`` form adds a cross term that stays valid for arbitrary fixed
coefficients (source-only fits). Population denominators are used throughout.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np

from .errors import ConfigError, DegenerateDesignError
from .estimators import FittedCoefficients
from .trial_data import StrataIndex, StratumArmStats, TrialDataset, build_index, compute_stats

MODES = ("plugin", "debiased")
DEFAULT_MODE = {"ben": "plugin", "lasso": "plugin", "tl": "plugin", "so": "debiased"}


def default_mode(estimator: str) -> str:
    return DEFAULT_MODE[estimator]


def resolve_mode(estimator: str, requested=None) -> str:
    """Pick the variance form for an estimator; overriding the default warns."""
    mode = default_mode(estimator)
    if requested is None or requested == "auto":
        return mode
    if requested not in MODES:
        raise ConfigError(f"variance_mode must be one of {MODES} or 'auto', got {requested!r}")
    if requested != mode and estimator != "ben":
        warnings.warn(f"using {requested} variance for {estimator}; the default is {mode}", stacklevel=2)
    return requested


def transformed_residuals(d: TrialDataset, idx: StrataIndex, coeffs: FittedCoefficients) -> np.ndarray:
    """r_i = Y_i - X_i' beta(k_i, a_i), not centered."""
    b = coeffs.coef[d.stratum - 1, d.arm]
    return d.y - np.einsum("ij,ij->i", d.x, b)


def _cell_ok(idx, k, a, need=2):
    n = idx.n_ka[k - 1, a]
    if n < need:
        raise DegenerateDesignError(f"cell (stratum={k}, arm={a}) has {n} units; need {need}", cell=(k, a))


def sigma2_r(d: TrialDataset, idx: StrataIndex, residuals, a: int) -> float:
    """sum_k p_n[k] * n[k] / n[k]a * var_{(k,a)}(r), population variance per cell."""
    r = np.asarray(residuals, dtype=float)
    total = 0.0
    for k in range(1, d.n_strata + 1):
        _cell_ok(idx, k, a)
        rk = r[idx.rows(k, a)]
        nka, nk = rk.size, idx.n_k[k - 1]
        var = np.mean((rk - rk.mean()) ** 2)
        total += (nk / d.n) * (nk / nka) * var
    return float(total)


def sigma2_hy(stats: StratumArmStats, b: int, c: int) -> float:
    """Between-strata variation of the unadjusted contrast."""
    diff = stats.ybar[:, b] - stats.ybar[:, c]
    dev = diff - stats.p_n @ diff
    return float(stats.p_n @ dev**2)


def stratum_xx(d: TrialDataset, idx: StrataIndex, k: int) -> np.ndarray:
    """(1/n[k]) sum over stratum k of (X - Xbar[k])(X - Xbar[k])'."""
    rows = idx.stratum_rows(k)
    if rows.size < 2:
        raise DegenerateDesignError(f"stratum {k} has {rows.size} units; need 2", cell=(k, None))
    xc = d.x[rows] - d.x[rows].mean(axis=0)
    return xc.T @ xc / rows.size


def stratum_xy(d: TrialDataset, idx: StrataIndex, k: int, a: int) -> np.ndarray:
    """(1/n[k]a) sum over cell (k,a) of (X - Xbar[k]a)(Y - Ybar[k]a)."""
    _cell_ok(idx, k, a)
    rows = idx.rows(k, a)
    xc = d.x[rows] - d.x[rows].mean(axis=0)
    yc = d.y[rows] - d.y[rows].mean()
    return xc.T @ yc / rows.size


@dataclass(frozen=True)
class ContrastVariance:
    """Variance of the (b, c) contrast and its parts.

    ``raw`` is the signed sum of the components; ``sigma2`` is ``raw`` clipped
    at 0 (``clipped`` says whether that happened, debiased mode only).
    """

    b: int
    c: int
    mode: str
    sigma2: float
    r_b: float
    r_c: float
    hy: float
    quadratic: float
    cross: float
    raw: float
    clipped: bool = False

    @property
    def components(self) -> dict:
        return {"r_b": self.r_b, "r_c": self.r_c, "hy": self.hy,
                "quadratic": self.quadratic, "cross": self.cross}

    def to_dict(self) -> dict:
        return {"b": self.b, "c": self.c, "mode": self.mode, "sigma2": self.sigma2,
                "components": self.components, "raw": self.raw, "clipped": self.clipped}


def combine(r_b, r_c, hy, quad, cross, mode) -> float:
    if mode == "plugin":
        return r_b + r_c + hy + quad
    return r_b + r_c + hy - quad + 2.0 * cross


def variance_contrast(d: TrialDataset, coeffs: FittedCoefficients, b: int, c: int, mode: str = "plugin",
                      idx: StrataIndex = None, stats: StratumArmStats = None) -> ContrastVariance:
    """Estimate the asymptotic variance of the (b, c) contrast."""
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    if b == c or not (0 <= b <= d.n_arms and 0 <= c <= d.n_arms):
        raise ConfigError(f"invalid contrast ({b}, {c}) for A={d.n_arms}")
    idx = build_index(d) if idx is None else idx
    stats = compute_stats(d, idx) if stats is None else stats
    res = transformed_residuals(d, idx, coeffs)
    r_b = sigma2_r(d, idx, res, b)
    r_c = sigma2_r(d, idx, res, c)
    hy = sigma2_hy(stats, b, c)
    quad = cross = 0.0
    for k in range(1, d.n_strata + 1):
        dbeta = coeffs.cell(k, b) - coeffs.cell(k, c)
        if not np.any(dbeta):
            continue
        w = stats.p_n[k - 1]
        quad += w * float(dbeta @ stratum_xx(d, idx, k) @ dbeta)
        if mode == "debiased":
            cross += w * float(dbeta @ (stratum_xy(d, idx, k, b) - stratum_xy(d, idx, k, c)))
    raw = combine(r_b, r_c, hy, quad, cross, mode)
    clipped = raw < 0
    return ContrastVariance(b, c, mode, max(raw, 0.0), r_b, r_c, hy, quad, cross, raw, bool(clipped))


def z_quantile(alpha: float) -> float:
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    return NormalDist().inv_cdf(1.0 - alpha / 2.0)


@dataclass(frozen=True)
class ConfidenceInterval:
    point: float
    lower: float
    upper: float
    alpha: float

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def covers(self, value: float) -> bool:
        return self.lower <= value <= self.upper


def confidence_interval(tau_hat: float, cv, n: int, alpha: float = 0.05) -> ConfidenceInterval:
    """tau_hat +/- z * sqrt(sigma2 / n); ``cv`` is a ContrastVariance or a number."""
    z = z_quantile(alpha)
    if n < 1:
        raise ConfigError("n must be positive")
    s2 = cv.sigma2 if isinstance(cv, ContrastVariance) else float(cv)
    if not s2 >= 0:
        raise ConfigError(f"variance must be non-negative, got {s2}")
    half = z * math.sqrt(s2 / n)
    return ConfidenceInterval(float(tau_hat), float(tau_hat) - half, float(tau_hat) + half, alpha)


@dataclass(frozen=True)
class ContrastResult:
    estimator: str
    b: int
    c: int
    tau_hat: float
    variance: ContrastVariance
    ci: ConfidenceInterval

    @property
    def label(self) -> str:
        return f"{self.b}-{self.c}"

    def to_dict(self) -> dict:
        out = {"b": self.b, "c": self.c, "tau_hat": self.tau_hat, "sigma2": self.variance.sigma2,
               "components": self.variance.components, "ci_lower": self.ci.lower,
               "ci_upper": self.ci.upper, "mode": self.variance.mode}
        if self.variance.clipped:
            out["clipped"] = True
            out["raw_sigma2"] = self.variance.raw
        return out


def infer_contrasts(d: TrialDataset, estimate, estimator: str, alpha: float = 0.05, mode=None,
                    contrasts=None, idx=None, stats=None):
    """Variance and CI for each contrast (default: every treatment vs control)."""
    idx = build_index(d) if idx is None else idx
    stats = compute_stats(d, idx) if stats is None else stats
    m = resolve_mode(estimator, mode)
    if contrasts is None:
        contrasts = [(a, 0) for a in range(1, d.n_arms + 1)]
    out = []
    for b, c in contrasts:
        cv = variance_contrast(d, estimate.coeffs, b, c, m, idx, stats)
        tau = float(estimate.mu[b] - estimate.mu[c])
        out.append(ContrastResult(estimator, b, c, tau, cv, confidence_interval(tau, cv, d.n, alpha)))
    return out

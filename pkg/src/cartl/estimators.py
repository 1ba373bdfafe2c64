"""Regression-adjusted treatment effect estimators.

All four estimators share one plug-in form: for arm ``a``

    mu_a = sum_k p_n[k] * (Ybar[k,a] - (Xbar[k,a] - Xbar[k])' beta[k,a])

and ``tau_a = mu_a - mu_0``. They differ only in the coefficients plugged in:

* ``ben``   all zero (stratified difference in means)
* ``lasso`` per-cell lasso on the target trial
* ``so``    per-cell lasso on the source trial, used as is
* ``tl``    source lasso plus a lasso-fitted target correction
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _rng
from . import lasso_core as lc
from .errors import AlignmentError, ConfigError, DegenerateDesignError
from .trial_data import StratumArmStats, TrialDataset, build_index, compute_stats

ESTIMATORS = ("ben", "lasso", "so", "tl")
NEEDS_SOURCE = ("so", "tl")
PROVENANCE = ("zero", "target-lasso", "source-lasso", "transfer")


@dataclass(frozen=True)
class EstimatorConfig:
    """Tuning for the per-cell fits.

    ``lam`` applies to every step; ``lam_source`` and ``lam_bias`` override it
    for the source fit and the target bias fit. Each is ``"cv"``, ``"max"``
    (the null-model threshold of the cell) or a non-negative number.
    """

    lam: object = "cv"
    lam_source: object = None
    lam_bias: object = None
    cv_folds: int = lc.DEFAULT_FOLDS
    grid_size: int = lc.DEFAULT_GRID
    ratio_min: float = lc.DEFAULT_RATIO_MIN
    min_cell: int = 2
    tol: float = lc.DEFAULT_TOL
    kkt_tol: float = lc.DEFAULT_KKT_TOL
    max_iter: int = lc.DEFAULT_MAX_ITER
    seed: int = 0

    def __post_init__(self):
        for name in ("lam", "lam_source", "lam_bias"):
            v = getattr(self, name)
            if v is None or v in ("cv", "max"):
                continue
            if isinstance(v, str) or float(v) < 0:
                raise ConfigError(f"{name} must be 'cv', 'max' or a non-negative number, got {v!r}")
        if self.cv_folds < 2:
            raise ConfigError("cv_folds must be at least 2")
        if self.grid_size < 2:
            raise ConfigError("grid_size must be at least 2")

    def policy(self, step: str):
        v = {"target": self.lam, "source": self.lam_source, "bias": self.lam_bias}[step]
        return self.lam if v is None else v

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "lambda_source": self.lam_source, "lambda_bias": self.lam_bias,
                "cv_folds": self.cv_folds, "grid_size": self.grid_size, "ratio_min": self.ratio_min,
                "min_cell": self.min_cell, "tol": self.tol, "kkt_tol": self.kkt_tol,
                "max_iter": self.max_iter, "seed": self.seed}


@dataclass(frozen=True, eq=False)
class FittedCoefficients:
    """Coefficients ``coef[k-1, a]`` (shape K x (A+1) x p) plus per-cell diagnostics."""

    coef: np.ndarray
    provenance: str
    lam: np.ndarray = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.provenance not in PROVENANCE:
            raise ConfigError(f"unknown provenance {self.provenance!r}")
        if self.coef.ndim != 3:
            raise ConfigError("coef must have shape (K, A+1, p)")

    def cell(self, k: int, a: int) -> np.ndarray:
        return self.coef[k - 1, a]

    @classmethod
    def zeros(cls, K, A, p) -> "FittedCoefficients":
        return cls(np.zeros((K, A + 1, p)), "zero", np.zeros((K, A + 1)))

    def diagnostics_summary(self) -> dict:
        out = {"provenance": self.provenance}
        if self.lam is not None:
            out["lambda"] = self.lam.tolist()
        if self.diagnostics:
            out["cells"] = {f"{k},{a}": v for (k, a), v in sorted(self.diagnostics.items())}
        return out


@dataclass(frozen=True, eq=False)
class TauEstimate:
    tau: np.ndarray
    mu: np.ndarray
    coeffs: FittedCoefficients


def plugin_estimate(stats: StratumArmStats, coeffs: FittedCoefficients) -> TauEstimate:
    """Evaluate the shared plug-in estimator."""
    if coeffs.coef.shape != stats.xbar_cell.shape:
        raise ConfigError(
            f"coefficient shape {coeffs.coef.shape} does not match design {stats.xbar_cell.shape}")
    shift = stats.xbar_cell - stats.xbar[:, None, :]
    adj = np.einsum("kap,kap->ka", shift, coeffs.coef)
    mu = stats.p_n @ (stats.ybar - adj)
    return TauEstimate(tau=mu[1:] - mu[0], mu=mu, coeffs=coeffs)


def _cell_seed(cfg, step, k, a):
    return _rng.substream(cfg.seed, "fit", step, k, a)


def _check_cells(d: TrialDataset, idx, cfg, label):
    need = max(2, cfg.min_cell)
    small = np.argwhere(idx.n_ka < need)
    if small.size:
        k, a = small[0]
        raise DegenerateDesignError(
            f"{label} cell (stratum={k + 1}, arm={a}) has {idx.n_ka[k, a]} units; need {need}",
            cell=(int(k) + 1, int(a)))


def _fit_all(d, idx, cfg, step, provenance, offsets=None):
    K, A, p = d.n_strata, d.n_arms, d.p
    coef = np.zeros((K, A + 1, p))
    lam = np.zeros((K, A + 1))
    diags = {}
    for k in range(1, K + 1):
        for a in range(A + 1):
            cd = lc.center_cell(d, idx, k, a)
            off = None if offsets is None else offsets[k - 1, a]
            fit, diag = lc.fit_cell(cd, cfg.policy(step), offset=off, folds=cfg.cv_folds,
                                    grid_size=cfg.grid_size, ratio_min=cfg.ratio_min,
                                    seed=_cell_seed(cfg, step, k, a), tol=cfg.tol,
                                    max_iter=cfg.max_iter, kkt_tol=cfg.kkt_tol)
            coef[k - 1, a] = fit.coef
            lam[k - 1, a] = fit.lam
            diag.update(iterations=fit.iterations, kkt_violation=fit.kkt_violation, n=cd.N)
            diags[(k, a)] = diag
    return FittedCoefficients(coef, provenance, lam, diags)


def fit_target_lasso(d: TrialDataset, cfg: EstimatorConfig = EstimatorConfig(), idx=None) -> FittedCoefficients:
    """Per-cell lasso on the target trial."""
    idx = build_index(d) if idx is None else idx
    _check_cells(d, idx, cfg, "target")
    return _fit_all(d, idx, cfg, "target", "target-lasso")


def check_alignment(target: TrialDataset, source: TrialDataset) -> None:
    if target.p != source.p:
        raise AlignmentError(f"target has p={target.p} covariates, source has p={source.p}")
    if target.n_strata != source.n_strata:
        raise AlignmentError(f"target has K={target.n_strata} strata, source has K={source.n_strata}")
    if target.n_arms != source.n_arms:
        raise AlignmentError(f"target has A={target.n_arms} arms, source has A={source.n_arms}")


@dataclass(frozen=True, eq=False)
class TransferFit:
    source: FittedCoefficients
    bias: FittedCoefficients
    combined: FittedCoefficients


def fit_source(source: TrialDataset, cfg: EstimatorConfig = EstimatorConfig(), idx=None) -> FittedCoefficients:
    """Per-cell lasso on the source trial."""
    idx = build_index(source) if idx is None else idx
    _check_cells(source, idx, cfg, "source")
    return _fit_all(source, idx, cfg, "source", "source-lasso")


def fit_transfer(target: TrialDataset, source: TrialDataset, cfg: EstimatorConfig = EstimatorConfig(),
                 target_idx=None, source_fit: FittedCoefficients = None) -> TransferFit:
    """Source lasso, then a target lasso on the bias with the source fit as offset.

    ``combined`` holds ``source + bias`` per cell; ``source`` can be reused as
    the source-only estimator.
    """
    check_alignment(target, source)
    tidx = build_index(target) if target_idx is None else target_idx
    _check_cells(target, tidx, cfg, "target")
    if source_fit is None:
        source_fit = fit_source(source, cfg)
    bias = _fit_all(target, tidx, cfg, "bias", "transfer", offsets=source_fit.coef)
    combined = FittedCoefficients(source_fit.coef + bias.coef, "transfer", bias.lam, bias.diagnostics)
    return TransferFit(source=source_fit, bias=bias, combined=combined)


def estimate_all(target: TrialDataset, source: TrialDataset = None,
                 cfg: EstimatorConfig = EstimatorConfig(), estimators=None):
    """Run the requested estimators (default: all that the inputs allow).

    Returns ``(estimates, stats, fits)`` where ``estimates`` maps estimator
    name to ``TauEstimate`` and ``fits`` holds the intermediate coefficient
    sets (``target``, ``source``, ``bias``) that were computed.
    """
    if estimators is None:
        estimators = ESTIMATORS if source is not None else ("ben", "lasso")
    estimators = tuple(estimators)
    unknown = set(estimators) - set(ESTIMATORS)
    if unknown:
        raise ConfigError(f"unknown estimators {sorted(unknown)}")
    if source is None and set(estimators) & set(NEEDS_SOURCE):
        raise ConfigError(f"estimators {sorted(set(estimators) & set(NEEDS_SOURCE))} need a source trial")
    if source is not None:
        check_alignment(target, source)
    idx = build_index(target)
    stats = compute_stats(target, idx)
    K, A, p = target.n_strata, target.n_arms, target.p
    out, fits = {}, {}
    if "ben" in estimators:
        out["ben"] = plugin_estimate(stats, FittedCoefficients.zeros(K, A, p))
    if "lasso" in estimators:
        fits["target"] = fit_target_lasso(target, cfg, idx)
        out["lasso"] = plugin_estimate(stats, fits["target"])
    if source is not None and set(estimators) & set(NEEDS_SOURCE):
        fits["source"] = fit_source(source, cfg)
        if "so" in estimators:
            out["so"] = plugin_estimate(stats, fits["source"])
        if "tl" in estimators:
            tf = fit_transfer(target, source, cfg, idx, source_fit=fits["source"])
            fits["bias"] = tf.bias
            out["tl"] = plugin_estimate(stats, tf.combined)
    return {name: out[name] for name in ESTIMATORS if name in out}, stats, fits

"""Monte Carlo engine for the simulated designs.

Replicate ``r`` of a study with base seed ``S`` draws its data from the seed
path ``(S, "rep", r, "data")`` and its cross-validation folds from
``(S, "rep", r, "fit")``, so results do not depend on the number of workers
or on the order in which replicates run.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import __version__, _rng, dgp
from . import estimators as est
from . import inference as inf
from .errors import CartlError, ConfigError, ConvergenceError, DegenerateDesignError

FAILURE_LIMIT = 0.01
METRICS = ("relative_bias", "sd", "coverage")


@dataclass(frozen=True)
class SimConfig:
    """Everything that determines a study's output."""

    case: dgp.CaseSpec = field(default_factory=dgp.CaseSpec)
    fit: est.EstimatorConfig = field(default_factory=est.EstimatorConfig)
    estimators: tuple = est.ESTIMATORS
    alpha: float = 0.05
    variance_mode: object = None
    replicates: int = 100
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "estimators", tuple(self.estimators))
        bad = set(self.estimators) - set(est.ESTIMATORS)
        if bad or not self.estimators:
            raise ConfigError(f"estimators must be a nonempty subset of {est.ESTIMATORS}")
        if self.case.n_src == 0 and set(self.estimators) & set(est.NEEDS_SOURCE):
            raise ConfigError("estimators 'so' and 'tl' need a source trial (n_src > 0)")
        if self.replicates < 1:
            raise ConfigError("replicates must be at least 1")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        inf.z_quantile(self.alpha)
        if self.variance_mode not in (None, "auto") + inf.MODES:
            raise ConfigError(f"variance_mode must be 'auto', 'plugin' or 'debiased'")

    @property
    def contrasts(self):
        return [(a, 0) for a in range(1, dgp.N_ARMS + 1)]

    def to_dict(self) -> dict:
        fit = self.fit.to_dict()
        fit.pop("seed")
        return {"case": self.case.to_dict(), "fit": fit, "estimators": list(self.estimators),
                "alpha": self.alpha, "variance_mode": self.variance_mode or "auto",
                "replicates": self.replicates, "seed": self.seed}


@dataclass(frozen=True)
class ReplicateRecord:
    """One replicate. ``rows[estimator]`` lists per-contrast dicts with keys
    ``contrast, tau_hat, sigma2, ci_lo, ci_hi, hit`` (and ``clipped``)."""

    rep: int
    rows: dict
    error: str = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.error is None


def replicate_seeds(base_seed: int, rep: int):
    """Data seed sequence and integer fit seed for replicate ``rep``.

    The fit seed is a plain integer so a dumped replicate can be re-analyzed
    with exactly the same cross-validation folds.
    """
    fit = _rng.substream(base_seed, "rep", rep, "fit").generate_state(1, np.uint64)[0]
    return _rng.substream(base_seed, "rep", rep, "data"), int(fit >> np.uint64(1))


def _solver_summary(fits) -> dict:
    out = {}
    for role, fc in fits.items():
        it = [v.get("iterations", 0) for v in fc.diagnostics.values()]
        kk = [v.get("kkt_violation", 0.0) for v in fc.diagnostics.values()]
        out[role] = {"max_iterations": int(max(it, default=0)), "max_kkt": float(max(kk, default=0.0))}
    return out


def analyze_replicate(cfg: SimConfig, target, source, tau, fit_seed, rep=0) -> ReplicateRecord:
    fcfg = replace(cfg.fit, seed=fit_seed)
    estimates, stats, fits = est.estimate_all(target, source, fcfg, cfg.estimators)
    idx = stats.index
    rows = {}
    for name, e in estimates.items():
        res = inf.infer_contrasts(target, e, name, cfg.alpha, cfg.variance_mode, cfg.contrasts, idx, stats)
        rows[name] = [
            {"contrast": r.label, "tau_hat": r.tau_hat, "sigma2": float(r.variance.sigma2),
             "ci_lo": r.ci.lower, "ci_hi": r.ci.upper, "hit": int(r.ci.covers(tau[r.b - 1])),
             "clipped": r.variance.clipped}
            for r in res]
    return ReplicateRecord(rep, rows, None, _solver_summary(fits))


def run_replicate(cfg: SimConfig, rep: int) -> ReplicateRecord:
    """Generate and analyze replicate ``rep``; numerical failures are recorded."""
    data_seed, fit_seed = replicate_seeds(cfg.seed, rep)
    target, source, tau = dgp.make_case(cfg.case, data_seed)
    try:
        return analyze_replicate(cfg, target, source, tau, fit_seed, rep)
    except (ConvergenceError, DegenerateDesignError) as exc:
        return ReplicateRecord(rep, {}, f"{type(exc).__name__}: {exc}")


def _run_chunk(args):
    cfg, reps = args
    return [run_replicate(cfg, r) for r in reps]


def run_records(cfg: SimConfig, workers: int = 1):
    """All replicate records in replicate order."""
    reps = list(range(cfg.replicates))
    if workers is None or workers <= 1 or len(reps) <= 1:
        return [run_replicate(cfg, r) for r in reps]
    n_chunks = min(len(reps), 4 * workers)
    chunks = [reps[i::n_chunks] for i in range(n_chunks)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        done = list(pool.map(_run_chunk, [(cfg, c) for c in chunks]))
    out = [rec for chunk in done for rec in chunk]
    return sorted(out, key=lambda rec: rec.rep)


@dataclass(frozen=True)
class SimReport:
    config: dict
    tau: list
    metrics: dict
    n_replicates: int
    n_failed: int
    failures: list = field(default_factory=list)

    @property
    def failure_rate(self) -> float:
        return self.n_failed / self.n_replicates

    @property
    def failed(self) -> bool:
        return self.failure_rate > FAILURE_LIMIT

    def metric(self, estimator, contrast, name):
        return self.metrics[estimator][contrast][name]

    def to_dict(self) -> dict:
        return {"version": __version__, "config": self.config, "tau": self.tau,
                "n_replicates": self.n_replicates, "n_failed": self.n_failed,
                "failure_rate": self.failure_rate, "study_failed": self.failed,
                "failures": self.failures, "metrics": self.metrics}

    def to_json(self) -> str:
        return json.dumps(_clean(self.to_dict()), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def contrast_metrics(tau_hat, sigma2, hits, tau) -> dict:
    """Relative bias, SD, coverage and mean variance for one estimator/contrast.

    Both the error mean and the SD are taken on the same scale, so the
    sqrt(n) factors cancel: ``relative_bias = mean(tau_hat - tau) / sd``.
    ``sd`` is the across-replicate standard deviation of ``tau_hat``
    (denominator R - 1); with a single replicate it and the relative bias are
    None.
    """
    t = np.asarray(tau_hat, dtype=float)
    R = t.size
    if R == 0:
        raise ConfigError("no successful replicates to summarize")
    bias = float(np.mean(t - tau))
    sd = float(np.std(t, ddof=1)) if R > 1 else None
    if sd is None:
        rb = None
    elif sd > 0:
        rb = bias / sd
    else:
        rb = 0.0 if bias == 0 else None
    return {"relative_bias": rb, "sd": sd, "coverage": float(np.mean(hits)), "bias": bias,
            "mean_sigma2": float(np.mean(sigma2)), "n": R}


def summarize(records, tau, config: dict = None, estimators=None) -> SimReport:
    """Reduce records (in replicate order) to per-estimator per-contrast metrics."""
    records = sorted(records, key=lambda r: r.rep)
    good = [r for r in records if r.ok]
    if not good:
        raise ConfigError("no successful replicates to summarize")
    tau = [float(t) for t in tau]
    names = estimators or [n for n in est.ESTIMATORS if n in good[0].rows]
    metrics = {}
    for name in names:
        metrics[name] = {}
        for j, row0 in enumerate(good[0].rows[name]):
            rows = [r.rows[name][j] for r in good]
            b = int(row0["contrast"].split("-")[0])
            c = int(row0["contrast"].split("-")[1])
            truth = tau[b - 1] - (tau[c - 1] if c > 0 else 0.0)
            m = contrast_metrics([x["tau_hat"] for x in rows], [x["sigma2"] for x in rows],
                                 [x["hit"] for x in rows], truth)
            m["n_clipped"] = int(sum(bool(x.get("clipped")) for x in rows))
            metrics[name][row0["contrast"]] = m
    failures = [{"rep": r.rep, "error": r.error} for r in records if not r.ok]
    return SimReport(config or {}, tau, metrics, len(records), len(failures), failures)


def run_simulation(cfg: SimConfig, workers: int = 1, return_records: bool = False):
    records = run_records(cfg, workers)
    tau = dgp.true_tau(cfg.case.target_model().model, cfg.case.mu, cfg.case.target_model().beta,
                       cfg.case.s)
    report = summarize(records, tau, cfg.to_dict(), list(cfg.estimators))
    return (report, records) if return_records else report


RECORD_COLUMNS = ("rep", "estimator", "contrast", "tau_hat", "sigma2", "ci_lo", "ci_hi", "hit")


def record_lines(records):
    """CSV body rows (no header) for ``records.csv``; failed replicates are omitted."""
    for rec in records:
        for name in est.ESTIMATORS:
            for row in rec.rows.get(name, ()):
                yield ",".join([str(rec.rep), name, row["contrast"], repr(row["tau_hat"]),
                                repr(row["sigma2"]), repr(row["ci_lo"]), repr(row["ci_hi"]),
                                str(row["hit"])])

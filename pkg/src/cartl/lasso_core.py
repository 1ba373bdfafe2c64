"""Per-cell lasso on a centered design.

Each (stratum, arm) cell is fitted with

    min_d  (1/N) || yc - Xc (w + d) ||^2 + lam * ||d||_1

where ``w`` is a fixed offset (zero for the plain lasso, the source
coefficients for the bias-correction step). The stationarity condition is
``|(2/N) Xc_j' resid| <= lam`` with equality and matching sign on active
coordinates, so the soft threshold uses ``lam / 2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _cd, _rng
from .errors import ConfigError, ConvergenceError, DegenerateDesignError
from .trial_data import StrataIndex, TrialDataset, build_index

DEFAULT_TOL = 1e-7
DEFAULT_KKT_TOL = 1e-6
DEFAULT_MAX_ITER = 100_000
DEFAULT_FOLDS = 5
DEFAULT_GRID = 50
DEFAULT_RATIO_MIN = 1e-3
# cold starts below this fraction of lambda_max first follow a short warm path
WARM_START_RATIO = 0.05
WARM_POINTS_PER_DECADE = 20


@dataclass(frozen=True, eq=False)
class CenteredDesign:
    """Cell covariates and outcomes centered by their own cell means.

    ``free[j]`` is False for columns that are constant in the cell; those
    columns are stored as exact zeros and their coefficients stay at 0.
    """

    xc: np.ndarray
    yc: np.ndarray
    m: np.ndarray
    free: np.ndarray
    cell: tuple = None

    @property
    def N(self) -> int:
        return self.yc.size

    @property
    def p(self) -> int:
        return self.xc.shape[1]

    def gram(self):
        return (self.xc.T @ self.xc) / self.N, (self.xc.T @ self.yc) / self.N

    def shifted(self, offset) -> "CenteredDesign":
        """Same design with response ``yc - Xc @ offset``."""
        offset = np.asarray(offset, dtype=float)
        return CenteredDesign(self.xc, self.yc - self.xc @ offset, self.m, self.free, self.cell)


@dataclass(frozen=True)
class LassoFit:
    coef: np.ndarray
    lam: float
    iterations: int
    kkt_violation: float
    objective: float
    converged: bool = True


def center_arrays(x, y, cell=None) -> CenteredDesign:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if y.size < 2:
        raise DegenerateDesignError(f"cell {cell} has {y.size} units; need at least 2", cell=cell)
    free = np.ptp(x, axis=0) > 0 if x.shape[1] else np.zeros(0, dtype=bool)
    xc = x - x.mean(axis=0)
    xc[:, ~free] = 0.0
    yc = y - y.mean()
    m = (xc ** 2).mean(axis=0)
    return CenteredDesign(np.ascontiguousarray(xc), yc, m, free, cell)


def center_cell(d: TrialDataset, idx: StrataIndex, k: int, a: int) -> CenteredDesign:
    """Centered design for the units in stratum ``k`` and arm ``a``."""
    if idx is None:
        idx = build_index(d)
    rows = idx.rows(k, a)
    return center_arrays(d.x[rows], d.y[rows], cell=(k, a))


def objective(cd: CenteredDesign, coef, lam, offset=None) -> float:
    total = coef if offset is None else np.asarray(offset) + coef
    r = cd.yc - cd.xc @ total
    return float(r @ r / cd.N + lam * np.abs(coef).sum())


def kkt_check(cd: CenteredDesign, fit, lam: float = None, tol: float = None, offset=None) -> float:
    """Largest subgradient violation, computed from the data matrices directly.

    ``fit`` may be a ``LassoFit`` or a coefficient vector. Frozen columns are
    skipped. ``tol`` is accepted for interface symmetry; the raw violation is
    returned and the caller compares.
    """
    coef = fit.coef if isinstance(fit, LassoFit) else np.asarray(fit, dtype=float)
    if lam is None:
        lam = fit.lam
    if coef.size != cd.p:
        raise ConfigError(f"coefficient length {coef.size} != p={cd.p}")
    if cd.p == 0:
        return 0.0
    total = coef if offset is None else np.asarray(offset) + coef
    grad = 2.0 * cd.xc.T @ (cd.yc - cd.xc @ total) / cd.N
    viol = np.where(coef > 0, np.abs(grad - lam),
                    np.where(coef < 0, np.abs(grad + lam), np.abs(grad) - lam))
    viol = viol[cd.free]
    return float(max(viol.max(initial=0.0), 0.0))


def lambda_max(cd: CenteredDesign, offset=None) -> float:
    """Smallest lambda at which the zero vector is optimal."""
    if cd.p == 0:
        return 0.0
    y = cd.yc if offset is None else cd.yc - cd.xc @ np.asarray(offset)
    c = cd.xc[:, cd.free].T @ y / cd.N
    return float(2.0 * np.abs(c).max(initial=0.0))


def lambda_grid(cd: CenteredDesign, n_grid: int = DEFAULT_GRID, ratio_min: float = DEFAULT_RATIO_MIN,
                offset=None) -> np.ndarray:
    """Descending log-spaced grid from ``lambda_max`` down to ``ratio_min * lambda_max``."""
    if n_grid < 2:
        raise ConfigError("n_grid must be at least 2")
    if not 0 < ratio_min < 1:
        raise ConfigError("ratio_min must lie in (0, 1)")
    lmax = lambda_max(cd, offset)
    if lmax <= 0:
        return np.zeros(1)
    return np.geomspace(lmax, ratio_min * lmax, n_grid)


def _c_vector(cd, offset):
    G, c = cd.gram()
    if offset is not None:
        c = c - G @ np.asarray(offset, dtype=float)
    return np.ascontiguousarray(G), np.ascontiguousarray(c)


def _warm_start(G, c, lam, free, tol, max_iter, kkt_tol):
    """Zero, or the end of a warm-started path from ``lambda_max`` towards a small ``lam``.

    Cold coordinate descent at small penalties with ``p >> N`` can need many
    thousands of sweeps; stepping down a grid keeps each solve to a few.
    """
    p = c.size
    lmax = 2.0 * float(np.abs(c[free]).max(initial=0.0))
    if lam <= 0 or lmax <= 0 or lam >= WARM_START_RATIO * lmax:
        return np.zeros(p)
    n = int(np.ceil(WARM_POINTS_PER_DECADE * np.log10(lmax / lam))) + 1
    lams = np.geomspace(lmax, lam, n)[:-1]
    coefs, _, _, _ = _cd.path_gram(G, c, lams, free, float(tol), float(kkt_tol), int(max_iter))
    return coefs[-1].copy()


def lasso_cd(cd: CenteredDesign, lam: float, offset=None, tol: float = DEFAULT_TOL,
             max_iter: int = DEFAULT_MAX_ITER, kkt_tol: float = DEFAULT_KKT_TOL, init=None,
             trace: bool = False, raise_on_failure: bool = True):
    """Minimize the offset lasso objective by coordinate descent.

    Returns a ``LassoFit`` whose ``coef`` is the increment ``d`` over
    ``offset``. With ``trace=True`` returns ``(fit, objective_per_sweep)``.
    """
    lam = float(lam)
    if lam < 0:
        raise ConfigError("lambda must be non-negative")
    if offset is not None and np.asarray(offset).size != cd.p:
        raise ConfigError(f"offset length {np.asarray(offset).size} != p={cd.p}")
    if cd.p == 0:
        fit = LassoFit(np.zeros(0), lam, 0, 0.0, objective(cd, np.zeros(0), lam))
        return (fit, np.zeros(1)) if trace else fit
    G, c = _c_vector(cd, offset)
    if init is None:
        beta = _warm_start(G, c, lam, cd.free, tol, max_iter, kkt_tol)
    else:
        beta = np.array(init, dtype=float)
    beta[~cd.free] = 0.0
    buf = np.zeros(max_iter + 1) if trace else np.zeros(0)
    it, viol, ok = _cd.cd_gram(G, c, lam, beta, cd.free, float(tol), float(kkt_tol), int(max_iter), buf)
    fit = LassoFit(beta, lam, int(it), float(viol), objective(cd, beta, lam, offset), bool(ok))
    if not ok and raise_on_failure:
        raise ConvergenceError(
            f"coordinate descent did not converge in {max_iter} sweeps (cell {cd.cell}, "
            f"lambda={lam:.3g}, KKT violation {viol:.3g})",
            coef=beta, violation=float(viol), cell=cd.cell)
    if not trace:
        return fit
    resp = cd.yc if offset is None else cd.yc - cd.xc @ np.asarray(offset, dtype=float)
    # the solver tracks the objective without the constant ||resp||^2 / N
    return fit, buf[: it + 1] + resp @ resp / cd.N


def lasso_path(cd: CenteredDesign, lams, offset=None, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER,
               kkt_tol=DEFAULT_KKT_TOL):
    """Warm-started fits along a descending grid; returns a list of ``LassoFit``."""
    lams = np.asarray(lams, dtype=float)
    if cd.p == 0:
        return [lasso_cd(cd, l) for l in lams]
    G, c = _c_vector(cd, offset)
    coefs, sweeps, viols, conv = _cd.path_gram(G, c, lams, cd.free, float(tol), float(kkt_tol),
                                               int(max_iter))
    return [LassoFit(coefs[i], float(lams[i]), int(sweeps[i]), float(viols[i]),
                     objective(cd, coefs[i], lams[i], offset), bool(conv[i]))
            for i in range(lams.size)]


def fold_assignment(N: int, folds: int, rng: np.random.Generator) -> np.ndarray:
    """Random partition of ``range(N)`` into ``folds`` groups of near-equal size."""
    if folds < 2:
        raise ConfigError("need at least 2 folds")
    if N < folds:
        raise ConfigError(f"cannot split {N} units into {folds} folds")
    fold_id = np.empty(N, dtype=np.int64)
    for f, part in enumerate(np.array_split(rng.permutation(N), folds)):
        fold_id[part] = f
    return fold_id


@dataclass(frozen=True)
class CVResult:
    lam: float
    grid: np.ndarray
    cv_error: np.ndarray
    converged: bool
    max_violation: float


def cross_validate(cd: CenteredDesign, folds: int, grid, rng, offset=None, tol=DEFAULT_TOL,
                   max_iter=DEFAULT_MAX_ITER, kkt_tol=DEFAULT_KKT_TOL) -> CVResult:
    """K-fold CV; picks the minimum pooled held-out error, ties toward larger lambda."""
    grid = np.asarray(grid, dtype=float)
    fold_id = fold_assignment(cd.N, folds, rng)
    if grid.size == 1 or cd.p == 0:
        return CVResult(float(grid[0]), grid, np.zeros(grid.size), True, 0.0)
    work = cd if offset is None else cd.shifted(offset)
    err, ok, worst = _cd.cv_errors(work.xc, work.yc, fold_id, folds, grid, float(tol), float(kkt_tol),
                                   int(max_iter))
    best = err.min()
    pick = int(np.flatnonzero(err <= best + 1e-12 * max(abs(best), 1e-300))[0])
    return CVResult(float(grid[pick]), grid, err, bool(ok), float(worst))


def cv_lambda(cd: CenteredDesign, folds: int, grid, rng, offset=None, **kw) -> float:
    """Lambda chosen by K-fold cross-validation on the cell."""
    return cross_validate(cd, folds, grid, rng, offset=offset, **kw).lam


def resolve_lambda(cd: CenteredDesign, policy, offset=None, folds=DEFAULT_FOLDS, grid_size=DEFAULT_GRID,
                   ratio_min=DEFAULT_RATIO_MIN, seed=0, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER,
                   kkt_tol=DEFAULT_KKT_TOL):
    """Turn a lambda policy (``"cv"``, ``"max"`` or a number) into a value plus diagnostics."""
    if isinstance(policy, str):
        if policy == "max":
            return lambda_max(cd, offset), {"policy": "max"}
        if policy != "cv":
            raise ConfigError(f"unknown lambda policy {policy!r}")
        grid = lambda_grid(cd, grid_size, ratio_min, offset=offset)
        if grid.size == 1:
            return float(grid[0]), {"policy": "cv", "grid_size": 1}
        res = cross_validate(cd, folds, grid, _rng.generator(seed), offset=offset, tol=tol,
                             max_iter=max_iter, kkt_tol=kkt_tol)
        return res.lam, {"policy": "cv", "grid_index": int(np.flatnonzero(grid == res.lam)[0]),
                         "cv_converged": res.converged}
    lam = float(policy)
    if lam < 0:
        raise ConfigError("explicit lambda must be non-negative")
    return lam, {"policy": "fixed"}


def fit_cell(cd: CenteredDesign, policy, offset=None, folds=DEFAULT_FOLDS, grid_size=DEFAULT_GRID,
             ratio_min=DEFAULT_RATIO_MIN, seed=0, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER,
             kkt_tol=DEFAULT_KKT_TOL):
    """Choose lambda by ``policy`` then fit; with CV the final fit follows the grid path."""
    lam, diag = resolve_lambda(cd, policy, offset, folds, grid_size, ratio_min, seed, tol, max_iter,
                               kkt_tol)
    if diag["policy"] == "cv" and diag.get("grid_size") != 1:
        grid = lambda_grid(cd, grid_size, ratio_min, offset=offset)
        path = lasso_path(cd, grid[: diag["grid_index"] + 1], offset, tol, max_iter, kkt_tol)
        fit = path[-1]
        if not fit.converged:
            raise ConvergenceError(
                f"coordinate descent did not converge (cell {cd.cell}, lambda={lam:.3g})",
                coef=fit.coef, violation=fit.kkt_violation, cell=cd.cell)
    else:
        fit = lasso_cd(cd, lam, offset, tol, max_iter, kkt_tol)
    return fit, diag

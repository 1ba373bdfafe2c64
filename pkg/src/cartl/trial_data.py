"""In-memory trial datasets, strata indexing and cell summary statistics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DegenerateDesignError, InputError, ParseError, SchemaError

DEFAULT_MIN_CELL = 2


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TrialDataset:
    """One randomized trial.

    Arms are coded ``0..n_arms`` with 0 the control; strata are coded
    ``1..n_strata``. ``x`` is ``n x p`` and its column order defines the
    covariate index used by every coefficient vector.
    """

    y: np.ndarray
    arm: np.ndarray
    stratum: np.ndarray
    x: np.ndarray
    n_arms: int = None
    n_strata: int = None
    covariate_names: tuple = None

    def __post_init__(self):
        y = _frozen(self.y, np.float64).reshape(-1)
        arm = np.asarray(self.arm)
        stratum = np.asarray(self.stratum)
        for name, lab in (("arm", arm), ("stratum", stratum)):
            if lab.size and not np.all(np.mod(lab, 1) == 0):
                raise SchemaError(f"{name} labels must be integers")
        arm = _frozen(arm, np.int64).reshape(-1)
        stratum = _frozen(stratum, np.int64).reshape(-1)
        n = y.size
        if n < 1:
            raise InputError("a trial needs at least one unit")
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(n, -1)
        x = _frozen(x, np.float64)
        if arm.size != n or stratum.size != n or x.shape[0] != n:
            raise SchemaError(
                f"length mismatch: y={n}, arm={arm.size}, stratum={stratum.size}, x rows={x.shape[0]}"
            )
        if not np.all(np.isfinite(y)):
            raise SchemaError("non-finite outcome values")
        if not np.all(np.isfinite(x)):
            raise SchemaError("non-finite covariate values")
        if arm.min() < 0:
            raise SchemaError("arm labels must be >= 0")
        if stratum.min() < 1:
            raise SchemaError("stratum labels must be >= 1")

        n_arms = int(arm.max()) if self.n_arms is None else int(self.n_arms)
        n_strata = int(stratum.max()) if self.n_strata is None else int(self.n_strata)
        if n_arms < 1:
            raise SchemaError("need at least one treatment arm besides control")
        if arm.max() > n_arms:
            raise SchemaError(f"arm label {int(arm.max())} exceeds declared A={n_arms}")
        if stratum.max() > n_strata:
            raise SchemaError(f"stratum label {int(stratum.max())} exceeds declared K={n_strata}")

        names = self.covariate_names
        if names is None:
            names = tuple(f"x{j + 1}" for j in range(x.shape[1]))
        names = tuple(str(s) for s in names)
        if len(names) != x.shape[1]:
            raise SchemaError(f"{len(names)} covariate names for {x.shape[1]} columns")

        object.__setattr__(self, "y", y)
        object.__setattr__(self, "arm", arm)
        object.__setattr__(self, "stratum", stratum)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "n_arms", n_arms)
        object.__setattr__(self, "n_strata", n_strata)
        object.__setattr__(self, "covariate_names", names)

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def p(self) -> int:
        return self.x.shape[1]

    def equals(self, other: "TrialDataset") -> bool:
        return (
            self.n_arms == other.n_arms
            and self.n_strata == other.n_strata
            and self.covariate_names == other.covariate_names
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.arm, other.arm)
            and np.array_equal(self.stratum, other.stratum)
            and np.array_equal(self.x, other.x)
        )

    def with_outcomes(self, y) -> "TrialDataset":
        return TrialDataset(y, self.arm, self.stratum, self.x, self.n_arms,
                            self.n_strata, self.covariate_names)

    def with_covariates(self, x) -> "TrialDataset":
        return TrialDataset(self.y, self.arm, self.stratum, x, self.n_arms,
                            self.n_strata, self.covariate_names)

    def take(self, rows) -> "TrialDataset":
        rows = np.asarray(rows)
        return TrialDataset(self.y[rows], self.arm[rows], self.stratum[rows], self.x[rows],
                            self.n_arms, self.n_strata, self.covariate_names)


@dataclass(frozen=True, eq=False)
class StrataIndex:
    """Row indices for every (stratum, arm) cell.

    ``n_k[k-1]`` is the stratum size and ``n_ka[k-1, a]`` the cell size.
    """

    cells: dict
    n_k: np.ndarray
    n_ka: np.ndarray

    def rows(self, k: int, a: int) -> np.ndarray:
        return self.cells[(k, a)]

    def stratum_rows(self, k: int) -> np.ndarray:
        n_arms = self.n_ka.shape[1]
        return np.sort(np.concatenate([self.cells[(k, a)] for a in range(n_arms)]))


def build_index(d: TrialDataset) -> StrataIndex:
    K, A = d.n_strata, d.n_arms
    order = np.lexsort((d.arm, d.stratum))
    cells = {}
    n_ka = np.zeros((K, A + 1), dtype=np.int64)
    key = (d.stratum[order] - 1) * (A + 1) + d.arm[order]
    bounds = np.searchsorted(key, np.arange(K * (A + 1) + 1))
    for k in range(1, K + 1):
        for a in range(A + 1):
            c = (k - 1) * (A + 1) + a
            rows = np.sort(order[bounds[c]:bounds[c + 1]])
            rows.setflags(write=False)
            cells[(k, a)] = rows
            n_ka[k - 1, a] = rows.size
    return StrataIndex(cells=cells, n_k=n_ka.sum(axis=1), n_ka=n_ka)


@dataclass(frozen=True, eq=False)
class StratumArmStats:
    """Cell means and stratum proportions.

    Shapes: ``ybar (K, A+1)``, ``xbar_cell (K, A+1, p)``, ``xbar (K, p)``,
    ``p_n (K,)``.
    """

    index: StrataIndex
    ybar: np.ndarray
    xbar_cell: np.ndarray
    xbar: np.ndarray
    p_n: np.ndarray
    n: int

    @property
    def n_k(self):
        return self.index.n_k

    @property
    def n_ka(self):
        return self.index.n_ka

    @property
    def shape(self):
        K, A1, p = self.xbar_cell.shape
        return K, A1 - 1, p


def compute_stats(d: TrialDataset, idx: StrataIndex = None) -> StratumArmStats:
    """Exact per-cell sample means; every cell must be nonempty."""
    if idx is None:
        idx = build_index(d)
    K, A, p = d.n_strata, d.n_arms, d.p
    ybar = np.empty((K, A + 1))
    xbar_cell = np.empty((K, A + 1, p))
    xbar = np.empty((K, p))
    for k in range(1, K + 1):
        for a in range(A + 1):
            rows = idx.rows(k, a)
            if rows.size == 0:
                raise DegenerateDesignError(f"empty cell (stratum={k}, arm={a})", cell=(k, a))
            ybar[k - 1, a] = d.y[rows].mean()
            xbar_cell[k - 1, a] = d.x[rows].mean(axis=0)
        xbar[k - 1] = d.x[idx.stratum_rows(k)].mean(axis=0)
    p_n = idx.n_k / d.n
    return StratumArmStats(index=idx, ybar=ybar, xbar_cell=xbar_cell, xbar=xbar, p_n=p_n, n=d.n)


@dataclass
class ValidationReport:
    cell_counts: np.ndarray
    small_cells: list = field(default_factory=list)
    constant_columns: dict = field(default_factory=dict)
    min_cell: int = DEFAULT_MIN_CELL

    @property
    def ok(self) -> bool:
        return not self.small_cells and not self.constant_columns

    def to_dict(self) -> dict:
        return {
            "cell_counts": self.cell_counts.tolist(),
            "min_cell": self.min_cell,
            "small_cells": [list(c) for c in self.small_cells],
            "constant_columns": {str(k): v for k, v in self.constant_columns.items()},
        }


def validate(d: TrialDataset, min_cell: int = DEFAULT_MIN_CELL, idx: StrataIndex = None) -> ValidationReport:
    """Flag small cells and covariate columns that are constant within a stratum."""
    if idx is None:
        idx = build_index(d)
    small = [
        (k, a)
        for k in range(1, d.n_strata + 1)
        for a in range(d.n_arms + 1)
        if idx.n_ka[k - 1, a] < min_cell
    ]
    constant = {}
    for k in range(1, d.n_strata + 1):
        rows = idx.stratum_rows(k)
        if rows.size == 0 or d.p == 0:
            continue
        flat = np.flatnonzero(np.ptp(d.x[rows], axis=0) == 0)
        if flat.size:
            constant[k] = flat.tolist()
    return ValidationReport(cell_counts=idx.n_ka.copy(), small_cells=small,
                            constant_columns=constant, min_cell=min_cell)


# --------------------------------------------------------------------------
# CSV I/O
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ColumnSpec:
    """Column names for CSV ingestion.

    ``covariates=None`` takes every remaining column, in file order.
    """

    outcome: str = "y"
    arm: str = "arm"
    stratum: str = "stratum"
    covariates: Sequence[str] = None
    n_arms: int = None
    n_strata: int = None


SIDECAR_KEYS = {"A", "K", "covariates", "config", "version", "role", "replicate", "fit_seed"}


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def _read_sidecar(path: Path) -> dict:
    side = sidecar_path(path)
    if not side.exists():
        return {}
    with open(side, encoding="utf-8") as fh:
        meta = json.load(fh)
    unknown = set(meta) - SIDECAR_KEYS
    if unknown:
        raise SchemaError(f"unknown sidecar keys: {sorted(unknown)}")
    return meta


def _reconcile(name, declared, sidecar):
    if declared is not None and sidecar is not None and int(declared) != int(sidecar):
        raise SchemaError(f"{name} declared as {declared} but sidecar says {sidecar}")
    return declared if declared is not None else sidecar


def _data_lines(fh):
    for line in fh:
        if line.startswith("#"):
            continue
        yield line


def load_trial_csv(path, schema: ColumnSpec = ColumnSpec()) -> TrialDataset:
    """Read a trial from ``y,arm,stratum,x1,...,xp`` CSV (``#`` lines are comments)."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(_data_lines(fh))
        header = next(reader, None)
        if header is None or not any(h.strip() for h in header):
            raise InputError(f"{path} is empty")
        header = [h.strip() for h in header]
        rows = list(reader)
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise InputError(f"{path} has a header but no data rows")

    pos = {h: i for i, h in enumerate(header)}
    for col in (schema.outcome, schema.arm, schema.stratum):
        if col not in pos:
            raise SchemaError(f"missing column {col!r} in {path}")
    if schema.covariates is None:
        reserved = {schema.outcome, schema.arm, schema.stratum}
        cov_names = [h for h in header if h not in reserved]
    else:
        cov_names = list(schema.covariates)
        missing = [c for c in cov_names if c not in pos]
        if missing:
            raise SchemaError(f"missing covariate columns {missing} in {path}")

    def num(r, i, col, integer=False):
        # header is line 1 of the data section
        try:
            cell = r[pos[col]].strip()
        except IndexError:
            raise ParseError(f"row {i + 2}: missing value for {col!r}", row=i + 2, column=col)
        try:
            if integer:
                return int(cell, 10)
            v = float(cell)
        except ValueError:
            raise ParseError(f"row {i + 2}, column {col!r}: cannot parse {cell!r}",
                             row=i + 2, column=col)
        if not math.isfinite(v):
            raise ParseError(f"row {i + 2}, column {col!r}: non-finite value", row=i + 2, column=col)
        return v

    y = np.array([num(r, i, schema.outcome) for i, r in enumerate(rows)])
    arm = np.array([num(r, i, schema.arm, True) for i, r in enumerate(rows)], dtype=np.int64)
    stratum = np.array([num(r, i, schema.stratum, True) for i, r in enumerate(rows)], dtype=np.int64)
    x = np.array([[num(r, i, c) for c in cov_names] for i, r in enumerate(rows)],
                 dtype=np.float64).reshape(len(rows), len(cov_names))

    meta = _read_sidecar(path)
    side_names = meta.get("covariates")
    if side_names is not None and list(side_names) != cov_names:
        raise SchemaError(f"sidecar covariate names {side_names} differ from CSV columns {cov_names}")
    n_arms = _reconcile("A", schema.n_arms, meta.get("A"))
    n_strata = _reconcile("K", schema.n_strata, meta.get("K"))
    return TrialDataset(y, arm, stratum, x, n_arms=n_arms, n_strata=n_strata,
                        covariate_names=tuple(cov_names))


def write_trial_csv(d: TrialDataset, path, header_comments: Sequence[str] = (), sidecar: bool = True,
                    extra_meta: dict = None) -> None:
    """Write ``d`` so that ``load_trial_csv`` reproduces it exactly (floats via repr)."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for line in header_comments:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["y", "arm", "stratum", *d.covariate_names])
        for i in range(d.n):
            w.writerow([repr(float(d.y[i])), int(d.arm[i]), int(d.stratum[i]),
                        *(repr(float(v)) for v in d.x[i])])
    if sidecar:
        meta = {"A": d.n_arms, "K": d.n_strata, "covariates": list(d.covariate_names)}
        if extra_meta:
            meta.update(extra_meta)
        with open(sidecar_path(path), "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2)

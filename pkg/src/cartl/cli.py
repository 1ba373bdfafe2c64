"""Command-line interface: ``simulate``, ``sweep``, ``analyze`` and ``randomize``.

Configuration files are JSON objects; unknown keys are rejected. Exit codes:
0 success, 2 configuration or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__, dgp
from . import estimators as est
from . import inference as inf
from . import simharness as sim
from .errors import CartlError, ConfigError, ConvergenceError, InputError
from .randomizer import AllocationSpec, allocation_report, assign
from .trial_data import (ColumnSpec, build_index, compute_stats, load_trial_csv, validate,
                         write_trial_csv)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

CASE_KEYS = {"case", "n", "n_src", "p", "r", "s", "h", "mu", "noise_sd", "allocation",
             "source_allocation"}
FIT_KEYS = {"lambda": "lam", "lambda_source": "lam_source", "lambda_bias": "lam_bias",
            "cv_folds": "cv_folds", "grid_size": "grid_size", "ratio_min": "ratio_min",
            "min_cell": "min_cell", "tol": "tol", "kkt_tol": "kkt_tol", "max_iter": "max_iter"}
STUDY_KEYS = {"estimators", "alpha", "variance_mode", "replicates", "seed"}
SIM_KEYS = CASE_KEYS | set(FIT_KEYS) | STUDY_KEYS
SWEEP_KEYS = SIM_KEYS
ANALYZE_KEYS = set(FIT_KEYS) | {"estimators", "alpha", "variance_mode", "seed", "contrasts",
                                "columns", "n_arms", "n_strata", "name_check"}
COLUMN_KEYS = {"outcome", "arm", "stratum", "covariates"}


class UsageError(CartlError):
    pass


def _load_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise InputError(f"no such file: {path}")
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})")
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top-level value must be an object")
    return cfg


def _check_keys(cfg: dict, allowed, where="config"):
    unknown = sorted(set(cfg) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown {where} keys: {unknown}")


def fit_config(cfg: dict, seed=0) -> est.EstimatorConfig:
    kw = {FIT_KEYS[k]: v for k, v in cfg.items() if k in FIT_KEYS}
    return est.EstimatorConfig(seed=seed, **kw)


def case_spec(cfg: dict) -> dgp.CaseSpec:
    if "case" not in cfg:
        raise ConfigError("missing required config key 'case'")
    kw = {k: cfg[k] for k in ("case", "n", "n_src", "p", "r", "s", "h", "noise_sd") if k in cfg}
    if "mu" in cfg:
        kw["mu"] = tuple(cfg["mu"])
    for key in ("allocation", "source_allocation"):
        if key in cfg:
            if not isinstance(cfg[key], dict):
                raise ConfigError(f"{key} must be an object")
            kw[key] = AllocationSpec.from_dict(cfg[key], n_strata=2)
    try:
        return dgp.CaseSpec(**kw)
    except TypeError as exc:
        raise ConfigError(str(exc))


def sim_config(cfg: dict) -> sim.SimConfig:
    _check_keys(cfg, SIM_KEYS)
    kw = {k: cfg[k] for k in ("estimators", "alpha", "variance_mode", "replicates", "seed") if k in cfg}
    if "estimators" not in kw and cfg.get("n_src", 1) == 0:
        kw["estimators"] = ("ben", "lasso")
    return sim.SimConfig(case=case_spec(cfg), fit=fit_config(cfg), **kw)


def _comment_lines(config: dict):
    return [f"version {__version__}", "config " + json.dumps(config, sort_keys=True)]


def _write_csv(path, header, rows, comments):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(row + "\n")


def _parse_reps(text, R):
    if text is None:
        return list(range(R))
    reps = sorted({int(t) for t in text.split(",") if t.strip()})
    bad = [r for r in reps if not 0 <= r < R]
    if bad:
        raise ConfigError(f"--dump-reps out of range 0..{R - 1}: {bad}")
    return reps


def dump_replicate(cfg: sim.SimConfig, rep: int, directory: Path):
    """Write the target (and source) trial of replicate ``rep`` as CSV + sidecar."""
    data_seed, fit_seed = sim.replicate_seeds(cfg.seed, rep)
    target, source, _ = dgp.make_case(cfg.case, data_seed)
    meta = {"config": cfg.to_dict(), "version": __version__, "replicate": rep, "fit_seed": fit_seed}
    for role, d in (("target", target), ("source", source)):
        if d is None:
            continue
        write_trial_csv(d, directory / f"rep{rep:05d}_{role}.csv",
                        header_comments=[f"version {__version__}", f"replicate {rep} {role}"],
                        extra_meta={**meta, "role": role})


def cmd_simulate(args) -> int:
    cfg_dict = _load_json(args.config)
    if args.seed is not None:
        cfg_dict["seed"] = args.seed
    cfg = sim_config(cfg_dict)
    dump_reps = _parse_reps(args.dump_reps, cfg.replicates) if args.dump_dir else []
    report, records = sim.run_simulation(cfg, workers=args.workers, return_records=True)
    Path(args.out).write_text(report.to_json(), encoding="utf-8")
    if args.records:
        _write_csv(args.records, sim.RECORD_COLUMNS, sim.record_lines(records),
                   _comment_lines(cfg.to_dict()))
    if args.dump_dir:
        out = Path(args.dump_dir)
        out.mkdir(parents=True, exist_ok=True)
        for rep in dump_reps:
            dump_replicate(cfg, rep, out)
    if report.failed:
        print(f"error: {report.n_failed}/{report.n_replicates} replicates failed "
              f"(limit {sim.FAILURE_LIMIT:.0%})", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _as_list(v):
    return list(v) if isinstance(v, (list, tuple)) else [v]


def sweep_cells(cfg: dict):
    """Expand list-valued ``case``, ``r`` and ``h`` into distinct grid cells."""
    if "case" not in cfg:
        raise ConfigError("missing required config key 'case'")
    cases, rs, hs = _as_list(cfg["case"]), _as_list(cfg.get("r", 0.1)), _as_list(cfg.get("h", 0.2))
    if not (cases and rs and hs):
        raise ConfigError("sweep grids over case, r and h must be nonempty")
    seen, cells = set(), []
    for c, r, h in itertools.product(cases, rs, hs):
        key = (int(c), float(r), float(h))
        if key in seen:
            warnings.warn(f"duplicate sweep cell case={c} r={r} h={h} ignored", stacklevel=2)
            continue
        seen.add(key)
        cells.append(key)
    return cells


SWEEP_COLUMNS = ("case", "r", "h", "estimator", "contrast", "metric", "value")


def run_sweep(cfg_dict: dict, workers=1):
    """Returns (rows, notes, any_failed) for the long-format sweep table."""
    _check_keys(cfg_dict, SWEEP_KEYS)
    cells = sweep_cells(cfg_dict)
    configs = []
    for c, r, h in cells:
        one = {k: v for k, v in cfg_dict.items() if k not in ("s",)}
        one.update(case=c, r=r, h=h)
        configs.append(sim_config(one))
    rows, notes, failed = [], [], False
    for (c, r, h), cfg in zip(cells, configs):
        try:
            report = sim.run_simulation(cfg, workers=workers)
        except ConfigError as exc:
            notes.append(f"cell case={c} r={r!r} h={h!r} not produced: {exc}")
            failed = True
            continue
        notes.append(f"cell case={c} r={r!r} h={h!r} s={cfg.case.s} failed={report.n_failed}/"
                     f"{report.n_replicates}")
        failed |= report.failed
        for name in cfg.estimators:
            for contrast, m in report.metrics[name].items():
                for metric in sim.METRICS:
                    v = m[metric]
                    rows.append(",".join([str(c), repr(r), repr(h), name, contrast, metric,
                                          "" if v is None else repr(float(v))]))
    return rows, notes, failed


def cmd_sweep(args) -> int:
    cfg_dict = _load_json(args.config)
    if args.seed is not None:
        cfg_dict["seed"] = args.seed
    rows, notes, failed = run_sweep(cfg_dict, args.workers)
    _write_csv(args.out, SWEEP_COLUMNS, rows, _comment_lines(cfg_dict) + notes)
    if failed:
        print("error: at least one sweep cell failed", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _column_spec(cfg: dict) -> ColumnSpec:
    cols = cfg.get("columns", {})
    if not isinstance(cols, dict):
        raise ConfigError("columns must be an object")
    _check_keys(cols, COLUMN_KEYS, "columns")
    return ColumnSpec(n_arms=cfg.get("n_arms"), n_strata=cfg.get("n_strata"), **cols)


def analyze(target, source, cfg: dict) -> dict:
    """Estimates, variances and intervals for user data, as a JSON-ready dict."""
    _check_keys(cfg, ANALYZE_KEYS)
    names = tuple(cfg.get("estimators", est.ESTIMATORS if source is not None else ("ben", "lasso")))
    bad = set(names) - set(est.ESTIMATORS)
    if bad:
        raise ConfigError(f"unknown estimators {sorted(bad)}")
    if source is None and set(names) & set(est.NEEDS_SOURCE):
        raise ConfigError(f"estimators {sorted(set(names) & set(est.NEEDS_SOURCE))} need --source")
    if source is not None and cfg.get("name_check", True):
        est.check_alignment(target, source)
        if target.covariate_names != source.covariate_names:
            raise est.AlignmentError("target and source covariate names differ "
                                     "(set name_check=false to align by position only)")
    alpha = cfg.get("alpha", 0.05)
    inf.z_quantile(alpha)
    contrasts = cfg.get("contrasts")
    if contrasts is not None:
        contrasts = [tuple(int(v) for v in pair) for pair in contrasts]
    fcfg = fit_config(cfg, seed=cfg.get("seed", 0))
    estimates, stats, fits = est.estimate_all(target, source, fcfg, names)
    out = {}
    for name, e in estimates.items():
        res = inf.infer_contrasts(target, e, name, alpha, cfg.get("variance_mode"), contrasts,
                                  stats.index, stats)
        out[name] = {"tau_hat": e.tau.tolist(), "mu_hat": e.mu.tolist(),
                     "contrasts": [r.to_dict() for r in res],
                     "coefficients": e.coeffs.diagnostics_summary()}
    if "bias" in fits:
        out["tl"]["bias_fit"] = fits["bias"].diagnostics_summary()
    return {"version": __version__, "config": cfg, "alpha": alpha,
            "target": {"n": target.n, "p": target.p, "K": target.n_strata, "A": target.n_arms,
                       "validation": validate(target, fcfg.min_cell).to_dict()},
            "source": None if source is None else {"n": source.n, "p": source.p},
            "estimates": out}


def cmd_analyze(args) -> int:
    cfg = _load_json(args.config) if args.config else {}
    if args.seed is not None:
        cfg["seed"] = args.seed
    _check_keys(cfg, ANALYZE_KEYS)
    schema = _column_spec(cfg)
    target = load_trial_csv(args.target, schema)
    source = load_trial_csv(args.source, schema) if args.source else None
    report = analyze(target, source, cfg)
    text = json.dumps(sim._clean(report), sort_keys=True, indent=2, allow_nan=False) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _read_strata(path):
    path = Path(path)
    if not path.exists():
        raise InputError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(line for line in fh if not line.startswith("#")) if r]
    if not rows:
        raise InputError(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    if "stratum" not in header:
        raise ConfigError(f"{path} needs a 'stratum' column")
    j = header.index("stratum")
    try:
        return np.array([int(r[j]) for r in rows[1:]], dtype=np.int64)
    except (ValueError, IndexError) as exc:
        raise ConfigError(f"{path}: bad stratum label ({exc})")


def cmd_randomize(args) -> int:
    strata = _read_strata(args.strata)
    spec_dict = _load_json(args.spec)
    spec = AllocationSpec.from_dict(spec_dict, n_strata=int(strata.max()) if strata.size else 1)
    arms = assign(strata, spec, args.seed)
    dev = allocation_report(arms, strata, spec)
    resolved = {"spec": spec.to_dict(), "seed": args.seed}
    comments = _comment_lines(resolved) + [
        f"max deviation stratum {k + 1}: {float(dev[k].max()):.6g}" for k in range(dev.shape[0])]
    _write_csv(args.out, ("unit", "stratum", "arm"),
               (f"{i + 1},{s},{a}" for i, (s, a) in enumerate(zip(strata, arms))), comments)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cartl", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run a Monte Carlo study")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="report JSON")
    s.add_argument("--records", help="per-replicate CSV")
    s.add_argument("--seed", type=int)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--dump-dir", help="write each replicate's trials as CSV here")
    s.add_argument("--dump-reps", help="comma-separated replicates to dump (default all)")
    s.set_defaults(func=cmd_simulate)

    w = sub.add_parser("sweep", help="run a grid of studies over case, r and h")
    w.add_argument("--config", required=True)
    w.add_argument("--out", required=True, help="long-format CSV")
    w.add_argument("--seed", type=int)
    w.add_argument("--workers", type=int, default=1)
    w.set_defaults(func=cmd_sweep)

    a = sub.add_parser("analyze", help="estimate effects for trial CSV data")
    a.add_argument("--target", required=True)
    a.add_argument("--source")
    a.add_argument("--config")
    a.add_argument("--out")
    a.add_argument("--seed", type=int)
    a.set_defaults(func=cmd_analyze)

    r = sub.add_parser("randomize", help="assign arms to a list of strata")
    r.add_argument("--strata", required=True)
    r.add_argument("--spec", required=True)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_randomize)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "workers", 1) is not None and getattr(args, "workers", 1) < 1:
        print("error: --workers must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CartlError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

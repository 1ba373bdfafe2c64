import json
import warnings

import numpy as np
import pytest

from cartl import __version__
from cartl import cli
from cartl.trial_data import load_trial_csv, write_trial_csv
from cartl import dgp

SMALL = {"case": 1, "n": 90, "n_src": 180, "p": 6, "replicates": 3, "seed": 11}


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def read_records(path):
    lines = [l for l in open(path) if not l.startswith("#")]
    header = lines[0].strip().split(",")
    return header, [dict(zip(header, l.strip().split(","))) for l in lines[1:]]


def test_simulate_writes_report_and_records(tmp_path):
    cfg = write_json(tmp_path / "sim.json", SMALL)
    rc = cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "r.json"),
                   "--records", str(tmp_path / "rec.csv")])
    assert rc == 0
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["version"] == __version__ and report["config"]["case"]["n"] == 90
    header, rows = read_records(tmp_path / "rec.csv")
    assert header == ["rep", "estimator", "contrast", "tau_hat", "sigma2", "ci_lo", "ci_hi", "hit"]
    assert len(rows) == 3 * 4 * 2
    comments = [l for l in open(tmp_path / "rec.csv") if l.startswith("#")]
    assert any(__version__ in l for l in comments) and any('"n": 90' in l for l in comments)


def test_simulate_missing_case(tmp_path, capsys):
    cfg = write_json(tmp_path / "sim.json", {k: v for k, v in SMALL.items() if k != "case"})
    assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "r.json")]) == 2
    assert "case" in capsys.readouterr().err


def test_unknown_key_is_an_error(tmp_path, capsys):
    cfg = write_json(tmp_path / "sim.json", {**SMALL, "lamda": 0.1})
    assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "r.json")]) == 2
    assert "lamda" in capsys.readouterr().err


def test_simulate_workers_byte_identical(tmp_path):
    cfg = write_json(tmp_path / "sim.json", SMALL)
    for w in (1, 2):
        assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / f"r{w}.json"),
                         "--workers", str(w)]) == 0
    assert (tmp_path / "r1.json").read_bytes() == (tmp_path / "r2.json").read_bytes()


def test_failure_rate_exit_code(tmp_path, monkeypatch):
    from cartl.errors import ConvergenceError

    def boom(*a, **k):
        raise ConvergenceError("no")
    monkeypatch.setattr(cli.sim.est, "estimate_all", boom)
    cfg = write_json(tmp_path / "sim.json", SMALL)
    # every replicate fails, so there is nothing to summarize
    assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "r.json")]) == 2


def test_partial_failures_exit_3(tmp_path, monkeypatch):
    from cartl.errors import ConvergenceError
    real = cli.sim.est.estimate_all
    calls = {"n": 0}

    def flaky(*a, **k):
        calls["n"] += 1
        if calls["n"] == 2:
            raise ConvergenceError("no")
        return real(*a, **k)
    monkeypatch.setattr(cli.sim.est, "estimate_all", flaky)
    cfg = write_json(tmp_path / "sim.json", SMALL)
    assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "r.json")]) == 3
    assert json.loads((tmp_path / "r.json").read_text())["n_failed"] == 1


def test_analyze_roundtrip_matches_records(tmp_path):
    cfg = write_json(tmp_path / "sim.json", SMALL)
    dump = tmp_path / "dump"
    assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "r.json"),
                     "--records", str(tmp_path / "rec.csv"), "--dump-dir", str(dump),
                     "--dump-reps", "2"]) == 0
    meta = json.loads((dump / "rep00002_target.json").read_text())
    acfg = write_json(tmp_path / "an.json", {"seed": meta["fit_seed"]})
    out = tmp_path / "an_out.json"
    assert cli.main(["analyze", "--target", str(dump / "rep00002_target.csv"),
                     "--source", str(dump / "rep00002_source.csv"), "--config", acfg,
                     "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    _, rows = read_records(tmp_path / "rec.csv")
    for r in rows:
        if r["rep"] != "2":
            continue
        b = int(r["contrast"].split("-")[0])
        got = report["estimates"][r["estimator"]]["tau_hat"][b - 1]
        assert abs(got - float(r["tau_hat"])) <= 1e-12
        contrast = report["estimates"][r["estimator"]]["contrasts"][b - 1]
        assert abs(contrast["sigma2"] - float(r["sigma2"])) <= 1e-12


def test_dumped_trial_loads_back_identically(tmp_path):
    cfg = write_json(tmp_path / "sim.json", SMALL)
    dump = tmp_path / "dump"
    cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "r.json"), "--dump-dir", str(dump),
              "--dump-reps", "0"])
    from cartl import simharness as S
    sc = cli.sim_config(SMALL)
    data_seed, _ = S.replicate_seeds(sc.seed, 0)
    target, source, _ = dgp.make_case(sc.case, data_seed)
    assert load_trial_csv(dump / "rep00000_target.csv").equals(target)
    assert load_trial_csv(dump / "rep00000_source.csv").equals(source)


def _trial_files(tmp_path, seed=0):
    t, s, _ = dgp.make_case(dgp.CaseSpec(n=90, n_src=180, p=6), seed=seed)
    write_trial_csv(t, tmp_path / "t.csv")
    write_trial_csv(s, tmp_path / "s.csv")
    return str(tmp_path / "t.csv"), str(tmp_path / "s.csv")


def test_analyze_target_only(tmp_path):
    t, _ = _trial_files(tmp_path)
    out = tmp_path / "a.json"
    assert cli.main(["analyze", "--target", t, "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert set(report["estimates"]) == {"ben", "lasso"}
    c = report["estimates"]["lasso"]["contrasts"][0]
    assert set(c) >= {"b", "c", "tau_hat", "sigma2", "components", "ci_lower", "ci_upper", "mode"}
    assert "lambda" in report["estimates"]["lasso"]["coefficients"]
    assert report["version"] == __version__


def test_analyze_transfer_needs_source(tmp_path, capsys):
    t, _ = _trial_files(tmp_path)
    cfg = write_json(tmp_path / "c.json", {"estimators": ["tl"]})
    assert cli.main(["analyze", "--target", t, "--config", cfg]) == 2
    assert "source" in capsys.readouterr().err


def test_analyze_alignment_error(tmp_path):
    t, _ = _trial_files(tmp_path)
    d = load_trial_csv(t)
    from cartl.trial_data import TrialDataset
    narrow = TrialDataset(d.y, d.arm, d.stratum, d.x[:, :3], covariate_names=d.covariate_names[:3])
    write_trial_csv(narrow, tmp_path / "n.csv")
    assert cli.main(["analyze", "--target", t, "--source", str(tmp_path / "n.csv")]) == 2


def test_analyze_custom_contrasts_and_mode(tmp_path):
    t, s = _trial_files(tmp_path)
    cfg = write_json(tmp_path / "c.json", {"contrasts": [[2, 1]], "estimators": ["so"], "lambda": 0.2})
    out = tmp_path / "a.json"
    assert cli.main(["analyze", "--target", t, "--source", s, "--config", cfg, "--out", str(out)]) == 0
    c = json.loads(out.read_text())["estimates"]["so"]["contrasts"]
    assert len(c) == 1 and (c[0]["b"], c[0]["c"], c[0]["mode"]) == (2, 1, "debiased")


def test_randomize(tmp_path):
    strata = tmp_path / "strata.csv"
    strata.write_text("id,stratum\n" + "".join(f"{i},{1 + i % 2}\n" for i in range(24)))
    spec = write_json(tmp_path / "spec.json", {"procedure": "stratified-block", "ratios": [[1, 1, 1], [1, 1, 1]],
                                             "block_size": 6})
    out = tmp_path / "arms.csv"
    assert cli.main(["randomize", "--strata", str(strata), "--spec", spec, "--seed", "4", "--out", str(out)]) == 0
    lines = [l.strip().split(",") for l in open(out) if not l.startswith("#")]
    assert lines[0] == ["unit", "stratum", "arm"]
    arms = np.array([int(r[2]) for r in lines[1:]])
    st_ = np.array([int(r[1]) for r in lines[1:]])
    for k in (1, 2):
        assert np.bincount(arms[st_ == k]).tolist() == [4, 4, 4]
    bad = write_json(tmp_path / "bad.json", {"ratios": [[1, 1, 1]], "block_size": 4})
    assert cli.main(["randomize", "--strata", str(strata), "--spec", bad, "--out", str(out)]) == 2


def test_sweep_row_count_and_dedup(tmp_path):
    cfg = write_json(tmp_path / "sw.json", {**SMALL, "replicates": 2, "r": [0.0, 0.3, 0.0], "h": [0.2]})
    out = tmp_path / "sweep.csv"
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        assert cli.main(["sweep", "--config", cfg, "--out", str(out)]) == 0
    assert any("duplicate" in str(w.message) for w in caught)
    header, rows = read_records(out)
    assert header == ["case", "r", "h", "estimator", "contrast", "metric", "value"]
    assert len(rows) == 2 * 4 * 2 * 3
    assert {r["metric"] for r in rows} == {"relative_bias", "sd", "coverage"}


def test_missing_file_exit_2(tmp_path):
    assert cli.main(["analyze", "--target", str(tmp_path / "nope.csv")]) == 2
    assert cli.main(["simulate", "--config", str(tmp_path / "nope.json"), "--out", "x"]) == 2

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cartl import dgp
from cartl.errors import DegenerateDesignError, InputError, ParseError, SchemaError
from cartl.trial_data import (ColumnSpec, TrialDataset, build_index, compute_stats, load_trial_csv,
                              validate, write_trial_csv)

from conftest import random_trial


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_load_small_file(tmp_path):
    f = _write(tmp_path / "t.csv", "y,arm,stratum,x1,x2\n1.0,0,1,0.5,1\n2.0,1,1,0.1,2\n3,0,1,0,3\n4,1,1,1,4\n")
    d = load_trial_csv(f)
    assert (d.n, d.n_arms, d.n_strata, d.p) == (4, 1, 1, 2)
    assert d.covariate_names == ("x1", "x2")
    assert np.array_equal(d.x[:, 1], [1, 2, 3, 4])


def test_covariate_order_follows_file(tmp_path):
    f = _write(tmp_path / "t.csv", "zeta,y,alpha,arm,stratum\n1,0,2,0,1\n3,1,4,1,1\n")
    d = load_trial_csv(f)
    assert d.covariate_names == ("zeta", "alpha")
    assert np.array_equal(d.x, [[1, 2], [3, 4]])


def test_arm_above_declared_range(tmp_path):
    f = _write(tmp_path / "t.csv", "y,arm,stratum\n1,0,1\n2,3,1\n")
    with pytest.raises(SchemaError):
        load_trial_csv(f, ColumnSpec(n_arms=2))


def test_missing_column(tmp_path):
    f = _write(tmp_path / "t.csv", "y,treatment,stratum\n1,0,1\n")
    with pytest.raises(SchemaError, match="arm"):
        load_trial_csv(f)


def test_parse_error_reports_location(tmp_path):
    f = _write(tmp_path / "t.csv", "y,arm,stratum,x1\n1,0,1,0.5\n2,1,1,abc\n")
    with pytest.raises(ParseError) as info:
        load_trial_csv(f)
    assert info.value.row == 3 and info.value.column == "x1"


def test_empty_file(tmp_path):
    with pytest.raises(InputError):
        load_trial_csv(_write(tmp_path / "e.csv", ""))
    with pytest.raises(InputError):
        load_trial_csv(_write(tmp_path / "h.csv", "y,arm,stratum\n"))


def test_sidecar_mismatch_is_an_error(tmp_path):
    f = _write(tmp_path / "t.csv", "y,arm,stratum\n1,0,1\n2,1,1\n")
    (tmp_path / "t.json").write_text('{"A": 2, "K": 1}')
    assert load_trial_csv(f).n_arms == 2
    with pytest.raises(SchemaError):
        load_trial_csv(f, ColumnSpec(n_arms=3))


def test_roundtrip_of_generated_trial(tmp_path):
    target, _, _ = dgp.make_case(dgp.CaseSpec(n=60, n_src=0, p=5), seed=3)
    path = tmp_path / "d.csv"
    write_trial_csv(target, path, header_comments=["generated"])
    back = load_trial_csv(path)
    assert back.equals(target)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e300, 1e300, allow_nan=False), min_size=2, max_size=20))
def test_roundtrip_is_exact_for_doubles(tmp_path_factory, ys):
    n = len(ys)
    d = TrialDataset(ys, [i % 2 for i in range(n)], [1] * n, np.array(ys[::-1]).reshape(n, 1))
    path = tmp_path_factory.mktemp("rt") / "d.csv"
    write_trial_csv(d, path)
    assert load_trial_csv(path).equals(d)


def test_validate_flags_empty_cell_and_constant_column():
    x = np.column_stack([np.ones(6), np.arange(6.0)])
    d = TrialDataset(np.arange(6.0), [0, 1, 0, 1, 0, 0], [1, 1, 1, 2, 2, 2], x, n_arms=1)
    rep = validate(d, min_cell=2)
    assert (1, 1) in rep.small_cells and (2, 1) in rep.small_cells
    assert rep.constant_columns == {1: [0], 2: [0]}
    assert not rep.ok


def test_validate_generated_case_has_no_small_cells():
    target, _, _ = dgp.make_case(dgp.CaseSpec(), seed=11)
    rep = validate(target, min_cell=2)
    assert rep.small_cells == []
    assert rep.cell_counts.min() >= 30
    # the stratifying covariate is constant within each stratum by construction
    assert rep.constant_columns == {1: [0], 2: [0]}


def test_compute_stats_two_units():
    d = TrialDataset([3.0, 5.0], [0, 1], [1, 1], np.zeros((2, 1)))
    s = compute_stats(d)
    assert s.ybar[0, 0] == 3 and s.ybar[0, 1] == 5 and s.p_n[0] == 1


def test_constant_outcomes(rng):
    d = random_trial(rng).with_outcomes(np.full(60, 7.25))
    assert np.all(compute_stats(d).ybar == 7.25)


def test_empty_cell_raises():
    d = TrialDataset([1.0, 2.0, 3.0], [0, 1, 0], [1, 1, 2], np.zeros((3, 1)))
    with pytest.raises(DegenerateDesignError) as info:
        compute_stats(d)
    assert info.value.cell == (2, 1)


def test_means_match_streaming_oracle(rng):
    d = random_trial(rng, n=20, p=4)
    s = compute_stats(d)
    for k in (1, 2):
        for a in (0, 1, 2):
            cnt, mean, xmean = 0, 0.0, np.zeros(4)
            for i in range(d.n):
                if d.stratum[i] == k and d.arm[i] == a:
                    cnt += 1
                    mean += (d.y[i] - mean) / cnt
                    xmean += (d.x[i] - xmean) / cnt
            assert s.ybar[k - 1, a] == pytest.approx(mean, abs=1e-12)
            np.testing.assert_allclose(s.xbar_cell[k - 1, a], xmean, atol=1e-12)


def test_index_partitions_rows(rng):
    d = random_trial(rng, n=50)
    idx = build_index(d)
    allrows = np.concatenate([idx.rows(k, a) for k in (1, 2) for a in (0, 1, 2)])
    assert np.array_equal(np.sort(allrows), np.arange(50))
    assert idx.n_k.sum() == 50
    assert np.array_equal(idx.n_ka.sum(axis=1), idx.n_k)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(9, 80))
def test_stats_invariants(seed, n):
    rng = np.random.default_rng(seed)
    d = random_trial(rng, n=max(n, 12), p=3)
    s = compute_stats(d)
    assert np.all((s.p_n > 0) & (s.p_n <= 1))
    assert s.p_n.sum() == pytest.approx(1.0, abs=1e-15)
    weighted = np.einsum("ka,kap->kp", s.n_ka, s.xbar_cell) / s.n_k[:, None]
    np.testing.assert_allclose(weighted, s.xbar, rtol=1e-10, atol=1e-12)
    perm = rng.permutation(d.n)
    s2 = compute_stats(d.take(perm))
    np.testing.assert_allclose(s2.ybar, s.ybar, rtol=0, atol=1e-12)
    np.testing.assert_allclose(s2.xbar_cell, s.xbar_cell, rtol=0, atol=1e-12)
    np.testing.assert_allclose(s2.xbar, s.xbar, rtol=0, atol=1e-12)


def test_dataset_rejects_bad_input():
    with pytest.raises(SchemaError):
        TrialDataset([1.0, np.nan], [0, 1], [1, 1], np.zeros((2, 1)))
    with pytest.raises(SchemaError):
        TrialDataset([1.0, 2.0], [0, 1, 1], [1, 1], np.zeros((2, 1)))
    with pytest.raises(SchemaError):
        TrialDataset([1.0, 2.0], [0, 1], [0, 1], np.zeros((2, 1)))


def test_dataset_is_immutable(rng):
    d = random_trial(rng)
    with pytest.raises(ValueError):
        d.y[0] = 1.0

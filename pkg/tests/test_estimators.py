import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cartl import dgp
from cartl import estimators as E
from cartl import lasso_core as lc
from cartl.errors import AlignmentError, ConfigError, DegenerateDesignError
from cartl.trial_data import TrialDataset, build_index, compute_stats

from conftest import random_trial


def weighted_dim(d):
    """Stratified difference in means, computed from raw rows."""
    out = []
    for a in range(1, d.n_arms + 1):
        tot = 0.0
        for k in range(1, d.n_strata + 1):
            s = d.stratum == k
            tot += s.mean() * (d.y[s & (d.arm == a)].mean() - d.y[s & (d.arm == 0)].mean())
        out.append(tot)
    return np.array(out)


def test_zero_coefficients_single_stratum_is_difference_in_means(rng):
    d = random_trial(rng, n=40, K=1, A=2)
    est = E.plugin_estimate(compute_stats(d), E.FittedCoefficients.zeros(1, 2, d.p))
    for a in (1, 2):
        assert est.tau[a - 1] == pytest.approx(d.y[d.arm == a].mean() - d.y[d.arm == 0].mean(), abs=1e-12)


def test_zero_coefficients_two_strata(rng):
    d = random_trial(rng, n=80)
    est = E.plugin_estimate(compute_stats(d), E.FittedCoefficients.zeros(2, 2, d.p))
    np.testing.assert_allclose(est.tau, weighted_dim(d), atol=1e-12)
    np.testing.assert_array_equal(est.tau, est.mu[1:] - est.mu[0])


def test_balanced_covariates_make_adjustment_vanish():
    # every cell has the same covariate rows, so cell means equal stratum means
    base = np.array([[0.0, 1.0], [2.0, -1.0]])
    x = np.vstack([base] * 6)
    arm = np.repeat([0, 1, 2], 2).tolist() * 2
    stratum = [1] * 6 + [2] * 6
    y = np.random.default_rng(0).normal(size=12)
    d = TrialDataset(y, arm, stratum, x)
    coef = E.FittedCoefficients(np.random.default_rng(1).normal(size=(2, 3, 2)), "target-lasso")
    s = compute_stats(d)
    np.testing.assert_allclose(E.plugin_estimate(s, coef).tau,
                               E.plugin_estimate(s, E.FittedCoefficients.zeros(2, 2, 2)).tau, atol=1e-14)


def test_shape_mismatch(rng):
    d = random_trial(rng)
    with pytest.raises(ConfigError):
        E.plugin_estimate(compute_stats(d), E.FittedCoefficients.zeros(2, 2, d.p + 1))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_decomposition_and_translation(seed):
    rng = np.random.default_rng(seed)
    d = random_trial(rng, n=50, p=4)
    s = compute_stats(d)
    coef = E.FittedCoefficients(rng.normal(size=(2, 3, 4)), "target-lasso")
    zero = E.plugin_estimate(s, E.FittedCoefficients.zeros(2, 2, 4)).tau
    got = E.plugin_estimate(s, coef).tau
    shift = np.einsum("kap,kap->ka", s.xbar_cell - s.xbar[:, None], coef.coef)
    want = -(s.p_n @ (shift[:, 1:] - shift[:, [0]]))
    np.testing.assert_allclose(got - zero, want, atol=1e-10)
    moved = d.with_covariates(d.x + rng.normal(size=4) * 10)
    np.testing.assert_allclose(E.plugin_estimate(compute_stats(moved), coef).tau, got, atol=1e-10)


def test_huge_lambda_gives_benchmark():
    target, _, _ = dgp.make_case(dgp.CaseSpec(n=150, n_src=0, p=20), seed=1)
    cfg = E.EstimatorConfig(lam=1e8)
    fc = E.fit_target_lasso(target, cfg)
    assert np.all(fc.coef == 0) and fc.provenance == "target-lasso"
    est, _, _ = E.estimate_all(target, None, cfg)
    np.testing.assert_allclose(est["lasso"].tau, est["ben"].tau, atol=1e-14)


def test_lambda_zero_is_per_cell_ols():
    target, _, _ = dgp.make_case(dgp.CaseSpec(n=3000, n_src=0, p=3, s=2), seed=2)
    fc = E.fit_target_lasso(target, E.EstimatorConfig(lam=0.0))
    idx = build_index(target)
    for k in (1, 2):
        for a in (0, 1, 2):
            rows = idx.rows(k, a)
            xc = target.x[rows, 1:] - target.x[rows, 1:].mean(axis=0)
            yc = target.y[rows] - target.y[rows].mean()
            ols = np.linalg.solve(xc.T @ xc, xc.T @ yc)
            np.testing.assert_allclose(fc.cell(k, a)[1:], ols, atol=1e-6)
            assert fc.cell(k, a)[0] == 0  # column 1 is constant within the stratum


def test_one_fit_per_cell():
    target, _, _ = dgp.make_case(dgp.CaseSpec(n=120, n_src=0, p=5), seed=3)
    fc = E.fit_target_lasso(target, E.EstimatorConfig(lam="cv"))
    assert sorted(fc.diagnostics) == [(k, a) for k in (1, 2) for a in (0, 1, 2)]
    assert fc.coef.shape == (2, 3, 5)


def test_small_cell_rejected(rng):
    d = random_trial(rng, n=30, min_per_cell=2)
    with pytest.raises(DegenerateDesignError):
        E.fit_target_lasso(d, E.EstimatorConfig(min_cell=10, lam=0.1))


def test_transfer_on_identical_data_at_lambda_max():
    spec = dgp.CaseSpec(n=200, n_src=200, p=10, h=0.0)
    target, _, _ = dgp.make_case(spec, seed=4)
    tf = E.fit_transfer(target, target, E.EstimatorConfig(lam=0.05, lam_bias="max"))
    assert np.all(tf.bias.coef == 0)
    np.testing.assert_array_equal(tf.combined.coef, tf.source.coef)


def test_transfer_with_zero_source_equals_target_lasso():
    target, source, _ = dgp.make_case(dgp.CaseSpec(n=150, n_src=300, p=15), seed=5)
    cfg = E.EstimatorConfig(lam=0.08, lam_source=1e9)
    tf = E.fit_transfer(target, source, cfg)
    assert np.all(tf.source.coef == 0)
    np.testing.assert_allclose(tf.combined.coef, E.fit_target_lasso(target, cfg).coef, atol=1e-12)


def test_transfer_additivity_and_offset_optimality():
    target, source, _ = dgp.make_case(dgp.CaseSpec(n=150, n_src=300, p=15), seed=6)
    tf = E.fit_transfer(target, source, E.EstimatorConfig(seed=2))
    assert np.array_equal(tf.combined.coef, tf.source.coef + tf.bias.coef)
    # subtracting back is exact up to the rounding of that one addition
    gap = np.abs(tf.combined.coef - tf.source.coef - tf.bias.coef)
    assert np.all(gap <= 2 * np.finfo(float).eps * np.abs(tf.combined.coef))
    idx = build_index(target)
    for k in (1, 2):
        for a in (0, 1, 2):
            cd = lc.center_cell(target, idx, k, a)
            v = lc.kkt_check(cd, tf.bias.cell(k, a), lam=tf.bias.lam[k - 1, a], offset=tf.source.cell(k, a))
            assert v <= 1e-6


def test_alignment_errors():
    t, s, _ = dgp.make_case(dgp.CaseSpec(n=60, n_src=60, p=5), seed=0)
    narrow = TrialDataset(s.y, s.arm, s.stratum, s.x[:, :4])
    with pytest.raises(AlignmentError):
        E.fit_transfer(t, narrow)
    one_stratum = TrialDataset(s.y, s.arm, np.ones(s.n, int), s.x)
    with pytest.raises(AlignmentError):
        E.estimate_all(t, one_stratum)


def test_estimate_all_sets():
    t, s, _ = dgp.make_case(dgp.CaseSpec(n=120, n_src=240, p=8), seed=7)
    cfg = E.EstimatorConfig(seed=1)
    alone, _, _ = E.estimate_all(t, None, cfg)
    assert list(alone) == ["ben", "lasso"]
    both, _, fits = E.estimate_all(t, s, cfg)
    assert list(both) == ["ben", "lasso", "so", "tl"]
    assert both["so"].coeffs is fits["source"]
    assert both["so"].coeffs.provenance == "source-lasso" and both["tl"].coeffs.provenance == "transfer"
    np.testing.assert_array_equal(both["tl"].coeffs.coef, fits["source"].coef + fits["bias"].coef)
    with pytest.raises(ConfigError):
        E.estimate_all(t, None, cfg, estimators=("tl",))


def test_outcome_shift_leaves_estimates_unchanged():
    t, s, _ = dgp.make_case(dgp.CaseSpec(n=120, n_src=240, p=8), seed=8)
    cfg = E.EstimatorConfig(seed=4)
    base, _, _ = E.estimate_all(t, s, cfg)
    moved, _, _ = E.estimate_all(t.with_outcomes(t.y + 37.5), s.with_outcomes(s.y + 37.5), cfg)
    for name in base:
        np.testing.assert_allclose(moved[name].tau, base[name].tau, atol=1e-10)


def test_estimates_are_deterministic():
    t, s, _ = dgp.make_case(dgp.CaseSpec(n=120, n_src=240, p=8), seed=9)
    a, _, _ = E.estimate_all(t, s, E.EstimatorConfig(seed=5))
    b, _, _ = E.estimate_all(t, s, E.EstimatorConfig(seed=5))
    for name in a:
        assert np.array_equal(a[name].tau, b[name].tau)


def test_transfer_beats_target_lasso_in_l1_error():
    spec = dgp.CaseSpec(case=1, n=300, n_src=1200, p=100, s=3, h=0.0)
    truth = np.zeros(100)
    wins = 0
    for rep in range(100):
        t, s, _ = dgp.make_case(spec, seed=1000 + rep)
        cfg = E.EstimatorConfig(seed=rep)
        lasso = E.fit_target_lasso(t, cfg)
        tl = E.fit_transfer(t, s, cfg).combined
        err_l = err_t = 0.0
        for k in (1, 2):
            x1 = float(k)  # stratum k has X1 = k
            truth[1:3] = 2.0 * x1  # within a stratum the slope on Xj is b_j * X1
            for a in (0, 1, 2):
                err_l += np.abs(lasso.cell(k, a) - truth).sum()
                err_t += np.abs(tl.cell(k, a) - truth).sum()
        wins += err_t < err_l
    assert wins >= 80


def test_config_validation():
    with pytest.raises(ConfigError):
        E.EstimatorConfig(lam=-1)
    with pytest.raises(ConfigError):
        E.EstimatorConfig(lam="bic")
    with pytest.raises(ConfigError):
        E.EstimatorConfig(cv_folds=1)
    assert E.EstimatorConfig(lam=0.1, lam_bias="max").policy("bias") == "max"
    assert E.EstimatorConfig(lam=0.1).policy("source") == 0.1

import numpy as np
import pytest
import scipy.stats

import ope_lab as ol
from ope_lab import simlab
from ope_lab.estimators import REPORT_CSV_HEADER, FirstStageError

from conftest import make_d1
from oracles import brute_exact_estimator_variance


def const_fn(c):
    return lambda x, a: np.full(np.broadcast(np.asarray(x), np.asarray(a)).shape, float(c))


def d1_tables():
    probs = [0.5, 0.5]
    lam = [1.0, 1.0]
    pi = [[0.8, 0.2], [0.4, 0.6]]
    g = [[-1.0, 1.0], [-1.0, 1.0]]
    mu = [[1.0, 2.0], [0.0, 3.0]]
    return probs, lam, pi, g, mu


# ---------------------------------------------------------------------------
# IPW
# ---------------------------------------------------------------------------


def test_ipw_zero_weight():
    inst = ol.ProblemInstance.from_tables(
        states=[0.0, 1.0],
        probs=[0.5, 0.5],
        actions=[0.0, 1.0],
        propensity_table=[[0.8, 0.2], [0.4, 0.6]],
        weight_table=[[0.0, 0.0], [0.0, 0.0]],
        outcome_mean_table=[[1.0, 2.0], [0.0, 3.0]],
        outcome_sd_table=[[0.0, 0.0], [0.0, 0.0]],
    )
    data = ol.sample_dataset(inst, 20, seed=1)
    assert ol.ipw_estimate(data, inst).tau_hat == 0.0


def test_ipw_hand_value(d1):
    data = ol.Dataset(
        x=np.array([0.0, 1.0]), a=np.array([1.0, 0.0]), y=np.array([2.0, 0.0]),
        seed=0, instance_id="d1",
    )
    assert abs(ol.ipw_estimate(data, d1).tau_hat - 5.0) < 1e-12


def test_ipw_unbiased_over_seeds(d1):
    n, reps = 10**5 // 200, 200  # 200 replications of n = 500
    taus = np.array(
        [ol.ipw_estimate(ol.sample_dataset(d1, n, seed=s), d1).tau_hat for s in range(reps)]
    )
    se = taus.std(ddof=1) / np.sqrt(reps)
    assert abs(taus.mean() - 2.0) < 3 * se


def test_ipw_rejects_foreign_action(d1):
    data = ol.Dataset(
        x=np.array([0.0]), a=np.array([2.0]), y=np.array([1.0]), seed=0, instance_id="d1"
    )
    with pytest.raises(ValueError):
        ol.ipw_estimate(data, d1)


# ---------------------------------------------------------------------------
# generic estimator
# ---------------------------------------------------------------------------


def test_generic_at_zero_equals_ipw(d1_noisy):
    data = ol.sample_dataset(d1_noisy, 64, seed=5)
    ipw = ol.ipw_estimate(data, d1_noisy).tau_hat
    gen = ol.generic_estimate(data, d1_noisy, const_fn(0.0)).tau_hat
    assert abs(ipw - gen) < 1e-12


def test_generic_at_ideal_auxiliary_noiseless(d1):
    data = ol.sample_dataset(d1, 50, seed=6)
    fstar = ol.optimal_auxiliary(d1)
    report = ol.generic_estimate(data, d1, fstar)
    # every summand collapses to the per-state action contrast
    inner = {0.0: 1.0, 1.0: 3.0}
    want = np.mean([inner[x] for x in data.x])
    assert abs(report.tau_hat - want) < 1e-12


def test_generic_unbiased_and_matches_exact_variance(d1_noisy):
    probs, lam, pi, g, mu = d1_tables()
    sd = [[1.0, 1.0], [1.0, 1.0]]
    # fixed zero-conditional-mean auxiliary: centered version of x + 3a
    raw = [[0.0, 1.0], [1.0, 2.0]]
    f_table = [
        [
            raw[i][k] - sum(lam[j] * pi[i][j] * raw[i][j] for j in range(2))
            for k in range(2)
        ]
        for i in range(2)
    ]
    f = lambda x, a: np.asarray(f_table)[np.asarray(x, dtype=int), np.asarray(a, dtype=int)]
    exact = brute_exact_estimator_variance(probs, lam, pi, g, mu, sd, f_table)
    n, reps = 32, 4000
    taus = np.array(
        [
            ol.generic_estimate(ol.sample_dataset(d1_noisy, n, seed=s), d1_noisy, f).tau_hat
            for s in range(reps)
        ]
    )
    se = taus.std(ddof=1) / np.sqrt(reps)
    assert abs(taus.mean() - 2.0) < 4 * se
    mc_var = n * taus.var(ddof=1)
    assert abs(mc_var - exact) / exact < 0.10  # 4000 reps; the tight 5% check runs at 1e5 reps


# ---------------------------------------------------------------------------
# oracle estimator
# ---------------------------------------------------------------------------


def test_oracle_noiseless_identity(d1):
    data = ol.sample_dataset(d1, 40, seed=8)
    inner = {0.0: 1.0, 1.0: 3.0}
    want = np.mean([inner[x] for x in data.x])
    assert abs(ol.oracle_estimate(data, d1).tau_hat - want) < 1e-12


def test_oracle_equals_generic_at_ideal(d1_noisy):
    data = ol.sample_dataset(d1_noisy, 100, seed=9)
    fstar = ol.optimal_auxiliary(d1_noisy)
    a = ol.oracle_estimate(data, d1_noisy).tau_hat
    b = ol.generic_estimate(data, d1_noisy, fstar).tau_hat
    assert abs(a - b) < 1e-12


def test_oracle_variance_matches_floor_on_tent():
    inst = simlab.build_builtin_instance("pi2", gamma=1.0, sigma0=1.0)
    v_star = ol.efficient_variance(inst)
    n, reps = 4000, 500
    tau_star = 0.25
    sq = np.array(
        [
            (ol.oracle_estimate(ol.sample_dataset(inst, n, seed=s), inst).tau_hat - tau_star) ** 2
            for s in range(reps)
        ]
    )
    nmse = n * sq.mean()
    se = n * sq.std(ddof=1) / np.sqrt(reps)
    assert abs(nmse - v_star) < 3 * se


# ---------------------------------------------------------------------------
# two-stage estimator
# ---------------------------------------------------------------------------


def test_two_stage_exact_features_recovers_oracle(d1):
    # outcome mean lies in the bilinear span, so the noiseless fit is exact
    data = ol.sample_dataset(d1, 60, seed=10)
    spec = ol.FirstStageSpec(
        regressor_id="weighted-linear", feature_map="bilinear-xa"
    )
    report = ol.two_stage_estimate(data, d1, spec, seed=0)
    oracle = ol.oracle_estimate(data, d1)
    assert abs(report.tau_hat - oracle.tau_hat) < 1e-8
    assert report.fit_distance < 1e-6


def test_two_stage_zero_weight_gives_zero():
    inst = ol.ProblemInstance.from_tables(
        states=[0.0, 1.0],
        probs=[0.5, 0.5],
        actions=[0.0, 1.0],
        propensity_table=[[0.8, 0.2], [0.4, 0.6]],
        weight_table=[[0.0, 0.0], [0.0, 0.0]],
        outcome_mean_table=[[1.0, 2.0], [0.0, 3.0]],
        outcome_sd_table=[[1.0, 1.0], [1.0, 1.0]],
    )
    data = ol.sample_dataset(inst, 40, seed=11)
    spec = ol.FirstStageSpec(regressor_id="weighted-linear", feature_map="bilinear-xa", ridge=1e-6)
    assert ol.two_stage_estimate(data, inst, spec, seed=1).tau_hat == 0.0


def test_two_stage_needs_enough_data(d1):
    data = ol.sample_dataset(d1, 8, seed=12)
    with pytest.raises(ValueError):
        ol.two_stage_estimate(data, d1, ol.FirstStageSpec(regressor_id="weighted-krr"), seed=0)


def test_two_stage_fold_failure_identity():
    inst = simlab.build_builtin_instance("pi1", gamma=0.0, sigma0=0.0)
    data = ol.sample_dataset(inst, 40, seed=13)
    spec = ol.FirstStageSpec(
        regressor_id="l1-constrained", feature_map="state-linear", radius=None
    )
    with pytest.raises(FirstStageError) as err:
        ol.two_stage_estimate(data, inst, spec, seed=0)
    assert err.value.fold == 1


def test_two_stage_permutation_invariance_within_halves():
    inst = simlab.build_builtin_instance("pi1", gamma=0.0, sigma0=0.5)
    data = ol.sample_dataset(inst, 400, seed=14)
    spec = ol.FirstStageSpec(regressor_id="weighted-krr", lambda_grid=(1.0,))
    base = ol.two_stage_estimate(data, inst, spec, seed=0).tau_hat
    rng = np.random.default_rng(0)
    n1 = (len(data) + 1) // 2
    perm = np.concatenate([rng.permutation(n1), n1 + rng.permutation(len(data) - n1)])
    shuffled = ol.Dataset(
        x=data.x[perm], a=data.a[perm], y=data.y[perm], seed=data.seed,
        instance_id=data.instance_id,
    )
    assert abs(ol.two_stage_estimate(shuffled, inst, spec, seed=0).tau_hat - base) < 1e-12


def test_two_stage_decomposition_frozen_first_stage(d1):
    # deviation tau_hat - tau_star splits into an oracle empirical-average
    # piece minus two cross-fitted correction sums; with a frozen first stage
    # all three have exact enumerable second moments
    c = 0.5
    frozen = const_fn(c)
    spec = ol.FirstStageSpec(regressor_id="frozen", frozen_fn=frozen)
    fstar = ol.optimal_auxiliary(d1)
    aux_frozen_table = {}  # f for frozen mu: g*c/pi - <g, c> with <g, c> = 0 for the contrast weight
    tau_star = 2.0
    v_star = ol.efficient_variance(d1)
    v_excess = ol.excess_variance(d1, frozen).value

    n, reps = 40, 4000
    n1 = (n + 1) // 2
    t_star_sq = np.empty(reps)
    t1_sq = np.empty(reps)
    t2_sq = np.empty(reps)
    identity_err = 0.0
    for s in range(reps):
        data = ol.sample_dataset(d1, n, seed=s)
        report = ol.two_stage_estimate(data, d1, spec, seed=0)
        ratio = d1.weight_fn(data.x, data.a) / d1.propensity_at(data.x, data.a)
        fhat = (
            d1.weight_fn(data.x, data.a) * frozen(data.x, data.a)
            / d1.propensity_at(data.x, data.a)
            - d1.lam_inner(lambda xs, aa: d1.weight_fn(xs, aa) * frozen(xs, aa), data.x)
        )
        fs = fstar(data.x, data.a)
        t_star = np.mean(ratio * data.y - tau_star - fs)
        t1 = np.sum((fhat - fs)[:n1]) / n
        t2 = np.sum((fhat - fs)[n1:]) / n
        identity_err = max(
            identity_err, abs(report.tau_hat - tau_star - (t_star - t1 - t2))
        )
        t_star_sq[s], t1_sq[s], t2_sq[s] = t_star**2, t1**2, t2**2
    assert identity_err < 1e-10
    for observed, exact in (
        (t_star_sq, v_star / n),
        (t1_sq, v_excess / (2 * n) * (2 * n1 / n)),
        (t2_sq, v_excess / (2 * n) * (2 * (n - n1) / n)),
    ):
        se = observed.std(ddof=1) / np.sqrt(reps)
        assert abs(observed.mean() - exact) < 4 * se


def test_two_stage_isotonic_first_stage_runs():
    inst = simlab.build_builtin_instance("pi2", gamma=1.0, sigma0=0.3)
    data = ol.sample_dataset(inst, 300, seed=21)
    spec = ol.FirstStageSpec(regressor_id="weighted-isotonic", feature_map="state")
    report = ol.two_stage_estimate(data, inst, spec, seed=2)
    assert np.isfinite(report.tau_hat)
    # tent is not monotone, so the fit cannot match the oracle, but the
    # estimate should still land in a sane neighborhood of the target
    assert abs(report.tau_hat - 0.25) < 0.5


def test_two_stage_normal_approximation():
    inst = simlab.build_builtin_instance("pi2", gamma=1.0, sigma0=1.0)
    spec = ol.FirstStageSpec(regressor_id="weighted-krr")
    n = 20000
    tau_star = 0.25
    # large-n first-stage limit proxy: one weighted fit at the full n
    big = ol.sample_dataset(inst, n, seed=777)
    ratio = inst.weight_fn(big.x, big.a) / inst.propensity_at(big.x, big.a)
    from ope_lab.regression import cross_validate_lambda, fit_weighted_krr

    lam = cross_validate_lambda(big.x, big.y, ratio**2, folds=5, seed=0)
    limit_fit = fit_weighted_krr(big.x, big.y, ratio**2, lam)
    mubar = lambda x, a: np.asarray(a, dtype=float) * limit_fit.predict(
        np.asarray(x, dtype=float) * np.ones_like(np.asarray(a, dtype=float))
    )
    v2 = ol.excess_variance(inst, mubar, tol=1e-6).value
    v_star = ol.efficient_variance(inst)

    reps = 500
    draws = np.empty(reps)
    for s in range(reps):
        data = ol.sample_dataset(inst, n, seed=10_000 + s)
        report = ol.two_stage_estimate(data, inst, spec, seed=s)
        draws[s] = np.sqrt(n) * (report.tau_hat - tau_star)
    standardized = draws / np.sqrt(v_star + v2)
    ks = scipy.stats.kstest(standardized, "norm").statistic
    assert ks < 0.08


# ---------------------------------------------------------------------------
# plug-in asymptotic variance
# ---------------------------------------------------------------------------


def test_plugin_variance_noiseless_truth(d1):
    data = ol.sample_dataset(d1, 200, seed=15)
    v = ol.asymptotic_variance_estimate(data, d1.outcome_mean, d1)
    inner = np.array([{0.0: 1.0, 1.0: 3.0}[x] for x in data.x])
    assert abs(v - inner.var(ddof=1)) < 1e-12


def test_plugin_variance_truth_matches_floor(d1_noisy):
    data = ol.sample_dataset(d1_noisy, 10**5, seed=16)
    v = ol.asymptotic_variance_estimate(data, d1_noisy.outcome_mean, d1_noisy)
    assert abs(v - 6.208333333333333) / 6.208333333333333 < 0.05


def test_plugin_variance_zero_fit_adds_excess(d1_noisy):
    data = ol.sample_dataset(d1_noisy, 10**5, seed=17)
    v = ol.asymptotic_variance_estimate(data, const_fn(0.0), d1_noisy)
    want = ol.efficient_variance(d1_noisy) + ol.excess_variance(d1_noisy, const_fn(0.0)).value
    assert abs(v - want) / want < 0.05


def test_report_csv_row(d1):
    data = ol.sample_dataset(d1, 10, seed=18)
    report = ol.ipw_estimate(data, d1)
    row = report.csv_row()
    assert REPORT_CSV_HEADER == "estimator_id,n,seed,tau_hat,plugin_variance"
    assert row.startswith("ipw,10,18,")

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ope_lab import regression
from ope_lab.regression import (
    RegressionError,
    cross_validate_lambda,
    fit_l1_constrained,
    fit_unweighted_krr,
    fit_weighted_isotonic,
    fit_weighted_krr,
    fit_weighted_linear,
    project_l1_ball,
)

from oracles import brute_isotonic_grid


# ---------------------------------------------------------------------------
# kernel ridge
# ---------------------------------------------------------------------------


def test_krr_single_point_closed_form():
    model = fit_weighted_krr(np.array([0.5]), np.array([1.0]), np.array([1.0]), 1.0)
    assert abs(model.predict(0.5) - 1.0 / 3.0) < 1e-12


def test_krr_interpolates_at_tiny_ridge():
    x = np.array([0.15, 0.4, 0.55, 0.8, 0.95])
    y = np.array([1.0, -0.5, 2.0, 0.3, -1.2])
    model = fit_weighted_krr(x, y, np.ones(5), 1e-10)
    assert np.max(np.abs(model.predict(x) - y)) < 1e-6


def test_krr_heavy_weight_dominates():
    model = fit_weighted_krr(
        np.array([0.5, 0.5]), np.array([0.0, 10.0]), np.array([1.0, 1e6]), 1.0
    )
    assert abs(model.predict(0.5) - 10.0) < 1e-3


def test_unweighted_equals_unit_weights():
    rng = np.random.default_rng(1)
    x = rng.random(40)
    y = rng.normal(size=40)
    a = fit_unweighted_krr(x, y, 0.7)
    b = fit_weighted_krr(x, y, np.ones(40), 0.7)
    q = rng.random(100)
    assert np.max(np.abs(a.predict(q) - b.predict(q))) < 1e-12


def test_krr_vanishes_at_origin():
    rng = np.random.default_rng(2)
    x = rng.random(30)
    model = fit_weighted_krr(x, rng.normal(size=30) + 5, np.ones(30), 0.5)
    assert model.predict(0.0) == 0.0


def test_krr_constant_data_shrinks_to_constant():
    rng = np.random.default_rng(3)
    x = np.sort(rng.random(400)) * 0.9 + 0.05
    y = np.full(400, 2.0)
    model = fit_unweighted_krr(x, y, 1e-4)
    grid = np.linspace(0.1, 0.9, 50)
    assert np.max(np.abs(model.predict(grid) - 2.0)) < 1e-3


def test_krr_solvers_agree():
    rng = np.random.default_rng(4)
    x = np.concatenate([rng.random(60), [0.0, 0.25, 0.25, 0.25]])
    y = rng.normal(size=64)
    w = np.concatenate([rng.random(60) * 3, [1.0, 0.2, 2.0, 0.0]])
    q = rng.random(200)
    for lam in (1e-6, 1e-2, 1.0, 1e3):
        auto = fit_weighted_krr(x, y, w, lam, solver="auto")
        dense = fit_weighted_krr(x, y, w, lam, solver="dense")
        scale = max(1.0, np.max(np.abs(dense.predict(q))))
        assert np.max(np.abs(auto.predict(q) - dense.predict(q))) < 1e-8 * scale


def test_krr_input_validation():
    x, y, w = np.array([0.5]), np.array([1.0]), np.array([1.0])
    with pytest.raises(ValueError):
        fit_weighted_krr(x, y, np.array([-1.0]), 1.0)
    with pytest.raises(ValueError):
        fit_weighted_krr(x, y, np.array([0.0]), 1.0)
    with pytest.raises(ValueError):
        fit_weighted_krr(x, y, w, 0.0)
    with pytest.raises(ValueError):
        fit_weighted_krr(np.array([1.5]), y, w, 1.0)
    with pytest.raises(ValueError):
        fit_weighted_krr(x, y, w, 1.0, kernel_id="rbf")


# ---------------------------------------------------------------------------
# weighted linear
# ---------------------------------------------------------------------------


def test_linear_exact_recovery():
    rng = np.random.default_rng(5)
    phi = rng.normal(size=(30, 4))
    theta = np.array([1.0, -2.0, 0.5, 3.0])
    model = fit_weighted_linear(phi, phi @ theta, np.ones(30), ridge=0.0)
    assert np.max(np.abs(model.theta - theta)) < 1e-8


def test_linear_weighted_mean():
    phi = np.array([[1.0], [1.0]])
    model = fit_weighted_linear(phi, np.array([0.0, 2.0]), np.array([1.0, 3.0]))
    assert abs(model.theta[0] - 1.5) < 1e-12


def test_linear_huge_ridge_shrinks_to_zero():
    rng = np.random.default_rng(6)
    phi = rng.normal(size=(20, 3))
    model = fit_weighted_linear(phi, rng.normal(size=20), np.ones(20), ridge=1e12)
    assert np.max(np.abs(model.theta)) < 1e-9


def test_linear_rank_deficiency_error():
    phi = np.array([[1.0, 1.0], [2.0, 2.0]])
    with pytest.raises(RegressionError):
        fit_weighted_linear(phi, np.array([1.0, 2.0]), np.ones(2), ridge=0.0)


def test_linear_norm_cap_rescales():
    phi = np.eye(2)
    model = fit_weighted_linear(phi, np.array([3.0, 4.0]), np.ones(2), max_norm=1.0)
    assert abs(np.linalg.norm(model.theta) - 1.0) < 1e-12
    assert np.allclose(model.theta, np.array([0.6, 0.8]))


# ---------------------------------------------------------------------------
# l1-constrained
# ---------------------------------------------------------------------------


def test_l1_projection_cases():
    v = np.array([3.0, 1.0])
    assert np.allclose(project_l1_ball(v, 2.0), [2.0, 0.0])
    assert np.allclose(project_l1_ball(v, 10.0), v)
    assert np.allclose(project_l1_ball(v, 0.0), [0.0, 0.0])


@settings(max_examples=50, deadline=None)
@given(
    vals=st.lists(st.floats(-10, 10), min_size=1, max_size=6),
    radius=st.floats(0.01, 8.0),
)
def test_l1_projection_optimality(vals, radius):
    v = np.array(vals)
    p = project_l1_ball(v, radius)
    assert np.abs(p).sum() <= radius + 1e-9
    rng = np.random.default_rng(0)
    base = np.linalg.norm(p - v)
    for _ in range(20):
        q = project_l1_ball(p + rng.normal(scale=0.1, size=v.size), radius)
        assert np.linalg.norm(q - v) >= base - 1e-9


def test_l1_unconstrained_interior_matches_linear():
    rng = np.random.default_rng(8)
    phi = rng.normal(size=(50, 3))
    theta = np.array([0.3, -0.2, 0.1])
    y = phi @ theta + rng.normal(scale=0.01, size=50)
    w = rng.random(50) + 0.5
    free = fit_weighted_linear(phi, y, w, ridge=0.0)
    capped = fit_l1_constrained(phi, y, w, radius=5.0)
    assert np.max(np.abs(free.theta - capped.theta)) < 1e-6


def test_l1_two_feature_example_matches_grid_search():
    phi = np.eye(2)
    y = np.array([3.0, 1.0])
    model = fit_l1_constrained(phi, y, np.ones(2), radius=2.0)
    assert np.max(np.abs(model.theta - np.array([2.0, 0.0]))) < 1e-6
    # brute force over the l1 ball on a 1e-3 grid
    t1 = np.arange(-2.0, 2.0 + 1e-9, 1e-3)
    best, best_obj = None, np.inf
    for v1 in t1:
        rem = 2.0 - abs(v1)
        for v2 in (-rem, 0.0, min(rem, 1.0), rem):
            obj = (3.0 - v1) ** 2 + (1.0 - v2) ** 2
            if obj < best_obj:
                best_obj, best = obj, (v1, v2)
    assert abs(model.theta[0] - best[0]) < 1e-3
    assert abs(model.theta[1] - best[1]) < 1e-3


def test_l1_zero_radius():
    model = fit_l1_constrained(np.eye(3), np.ones(3), np.ones(3), radius=0.0)
    assert np.all(model.theta == 0.0)


def test_l1_kkt_residual_small():
    rng = np.random.default_rng(9)
    phi = rng.normal(size=(40, 4))
    y = rng.normal(size=40)
    w = rng.random(40) + 0.2
    model = fit_l1_constrained(phi, y, w, radius=0.7)
    assert model.converged
    assert model.kkt_residual < 1e-6


# ---------------------------------------------------------------------------
# isotonic
# ---------------------------------------------------------------------------


def test_pava_pools_violation():
    model = fit_weighted_isotonic(
        np.array([0.0, 1.0, 2.0]), np.array([3.0, 1.0, 2.0]), np.ones(3)
    )
    assert np.allclose(model.levels, [2.0, 2.0, 2.0])


def test_pava_keeps_monotone_input():
    y = np.array([-1.0, 0.0, 0.5, 2.0])
    model = fit_weighted_isotonic(np.arange(4.0), y, np.ones(4))
    assert np.allclose(model.levels, y)


def test_pava_heavy_weight_no_pooling():
    model = fit_weighted_isotonic(
        np.array([0.0, 1.0]), np.array([0.0, 10.0]), np.array([1e6, 1.0])
    )
    assert np.allclose(model.levels, [0.0, 10.0])


def test_pava_tie_pre_pooling():
    model = fit_weighted_isotonic(
        np.array([0.0, 0.0, 1.0]), np.array([0.0, 2.0, 5.0]), np.array([1.0, 3.0, 1.0])
    )
    assert np.allclose(model.levels, [1.5, 5.0])


def test_pava_step_function_is_right_continuous():
    model = fit_weighted_isotonic(
        np.array([0.0, 1.0]), np.array([0.0, 1.0]), np.ones(2)
    )
    assert model.predict(np.array([0.0]))[0] == 0.0
    assert model.predict(np.array([0.999]))[0] == 0.0
    assert model.predict(np.array([1.0]))[0] == 1.0
    assert model.predict(np.array([-5.0]))[0] == 0.0
    assert model.predict(np.array([5.0]))[0] == 1.0


def test_pava_clamp_flag():
    model = fit_weighted_isotonic(
        np.array([0.0, 1.0]), np.array([-1.0, 2.0]), np.ones(2), clamp_unit=True
    )
    assert np.allclose(model.levels, [0.0, 1.0])


def test_pava_matches_grid_dp():
    rng = np.random.default_rng(10)
    for _ in range(10):
        n = int(rng.integers(1, 7))
        t = np.sort(rng.random(n)) + np.arange(n) * 1e-3  # distinct
        y = np.round(rng.normal(size=n), 3)
        w = np.round(rng.random(n) + 0.5, 3)
        model = fit_weighted_isotonic(t, y, w)
        dp = brute_isotonic_grid(t.tolist(), y.tolist(), w.tolist(), step=1e-3)
        assert np.max(np.abs(model.levels - np.asarray(dp))) < 2e-3


# ---------------------------------------------------------------------------
# weight semantics and convexity probes
# ---------------------------------------------------------------------------


def test_duplicating_point_equals_doubling_weight():
    rng = np.random.default_rng(12)
    x = rng.random(20)
    y = rng.normal(size=20)
    w = rng.random(20) + 0.2
    dup_x = np.concatenate([x, x[:1]])
    dup_y = np.concatenate([y, y[:1]])
    dup_w = np.concatenate([w, w[:1]])
    doubled = w.copy()
    doubled[0] *= 2
    q = rng.random(50)

    k1 = fit_weighted_krr(dup_x, dup_y, dup_w, 0.3)
    k2 = fit_weighted_krr(x, y, doubled, 0.3)
    assert np.max(np.abs(k1.predict(q) - k2.predict(q))) < 1e-8

    phi = np.stack([np.ones(20), x], axis=1)
    phi_dup = np.vstack([phi, phi[:1]])
    l1 = fit_weighted_linear(phi_dup, dup_y, dup_w)
    l2 = fit_weighted_linear(phi, y, doubled)
    assert np.max(np.abs(l1.theta - l2.theta)) < 1e-8

    s1 = fit_l1_constrained(phi_dup, dup_y, dup_w, radius=1.0)
    s2 = fit_l1_constrained(phi, y, doubled, radius=1.0)
    assert np.max(np.abs(s1.theta - s2.theta)) < 1e-6

    i1 = fit_weighted_isotonic(dup_x, dup_y, dup_w)
    i2 = fit_weighted_isotonic(x, y, doubled)
    assert np.max(np.abs(i1.predict(q) - i2.predict(q))) < 1e-8


def _weighted_objective(model, x, y, w):
    return model.objective(x, y, w)


def test_fits_beat_random_perturbations():
    rng = np.random.default_rng(13)
    x = rng.random(25)
    y = rng.normal(size=25)
    w = rng.random(25) + 0.1

    lam = 0.4
    krr = fit_weighted_krr(x, y, w, lam)
    base = krr.objective(x, y, w)
    gram = np.minimum.outer(x, x)
    for _ in range(100):
        alpha = krr.alpha + rng.normal(scale=0.05, size=25)
        resid = y - gram @ alpha
        perturbed = float(np.sum(w * resid**2) + lam * alpha @ gram @ alpha)
        assert perturbed >= base - 1e-9

    phi = np.stack([np.ones(25), x, x**2], axis=1)
    lin = fit_weighted_linear(phi, y, w)
    base_lin = float(np.sum(w * (y - phi @ lin.theta) ** 2))
    for _ in range(100):
        theta = lin.theta + rng.normal(scale=0.05, size=3)
        assert float(np.sum(w * (y - phi @ theta) ** 2)) >= base_lin - 1e-9

    iso = fit_weighted_isotonic(x, y, w)
    xs = np.sort(x)
    base_iso = float(np.sum(w * (y - iso.predict(x)) ** 2))
    for _ in range(100):
        bump = np.cumsum(np.abs(rng.normal(scale=0.02, size=xs.size)))
        levels = iso.predict(xs) + bump - bump.mean()
        levels = np.maximum.accumulate(levels)
        fitted = levels[np.searchsorted(xs, x)]
        assert float(np.sum(w * (y - fitted) ** 2)) >= base_iso - 1e-9


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------


def test_cv_single_value_grid():
    x = np.array([0.1, 0.5, 0.9])
    assert cross_validate_lambda(x, x, np.ones(3), grid=[7.0], folds=2) == 7.0


def test_cv_noiseless_in_span_picks_least_shrinkage():
    rng = np.random.default_rng(14)
    x = rng.random(60)
    y = x.copy()  # identity has unit roughness norm, inside the space
    lam = cross_validate_lambda(x, y, np.ones(60), grid=[0.1, 1.0, 10.0, 100.0], folds=5, seed=1)
    assert lam == 0.1


def test_cv_ties_prefer_larger():
    x = np.linspace(0.1, 0.9, 10)
    y = np.zeros(10)  # every lambda fits exactly: all losses tie at zero
    lam = cross_validate_lambda(x, y, np.ones(10), grid=[0.1, 1.0, 10.0], folds=5)
    assert lam == 10.0


def test_cv_requires_enough_points():
    with pytest.raises(ValueError):
        cross_validate_lambda(
            np.array([0.1, 0.2]), np.zeros(2), np.ones(2), grid=[1.0, 2.0], folds=5
        )
    with pytest.raises(ValueError):
        cross_validate_lambda(
            np.array([0.1, 0.2, 0.3]), np.zeros(3), np.ones(3), grid=[], folds=2
        )


def test_models_serialize_to_text():
    import json

    krr = fit_weighted_krr(np.array([0.5]), np.array([1.0]), np.array([1.0]), 2.0)
    doc = json.loads(krr.to_text())
    assert doc["regressor_id"] == "weighted-krr" and doc["lambda"] == 2.0

    lin = fit_weighted_linear(np.eye(2), np.array([1.0, 2.0]), np.ones(2))
    doc = json.loads(lin.to_text())
    assert doc["regressor_id"] == "weighted-linear" and len(doc["theta"]) == 2

    iso = fit_weighted_isotonic(np.array([0.0, 1.0]), np.array([0.0, 1.0]), np.ones(2))
    doc = json.loads(iso.to_text())
    assert doc["levels"] == [0.0, 1.0]

"""Functional estimators: IPW, generic unbiased, oracle, and cross-fitted
two-stage.

All estimators consume a dataset together with the known parts of the
instance (propensity, weight function, base measure).  Only the oracle
estimator touches the true outcome mean.  The two-stage estimator splits the
data into a first half B1 of size ceil(n/2) and the remainder B2, fits a
first-stage outcome model on each half, converts each fit into an auxiliary
function via

    fhat(x, a) = g(x, a) * muhat(x, a) / pi(x, a) - <g(x, .), muhat(x, .)>,

and evaluates each half's observations against the auxiliary trained on the
other half, dividing by the full n:

    tauhat = (1/n) [ sum_{B1} (g/pi * y - fhat2) + sum_{B2} (g/pi * y - fhat1) ].

Cross-validation inside each half uses only that half's data.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from . import regression
from .core import Dataset, ProblemInstance, StateActionFunction
from .rng import mix_seed

REPORT_CSV_HEADER = "estimator_id,n,seed,tau_hat,plugin_variance"

FIRST_STAGE_IDS = (
    "weighted-krr",
    "unweighted-krr",
    "weighted-linear",
    "l1-constrained",
    "weighted-isotonic",
    "frozen",
)


class FirstStageError(RuntimeError):
    """First-stage fit failure, carrying the fold it happened in."""

    def __init__(self, message: str, fold: int):
        super().__init__(message)
        self.fold = fold


@dataclass(frozen=True)
class EstimateReport:
    """Point estimate with its data-driven variance proxy.

    ``plugin_variance`` is the sample variance of the per-observation
    influence terms (an n-rescaled variance: the estimator's variance is
    approximately plugin_variance / n).
    """

    estimator_id: str
    n: int
    seed: int
    tau_hat: float
    plugin_variance: float

    def __post_init__(self):
        if self.plugin_variance < 0:
            raise ValueError("plugin_variance must be non-negative")

    def csv_row(self) -> str:
        return (
            f"{self.estimator_id},{self.n},{self.seed},"
            f"{self.tau_hat:.10g},{self.plugin_variance:.10g}"
        )


@dataclass(frozen=True)
class FirstStageSpec:
    """Configuration of the first-stage regressor inside the two-stage
    estimator.

    ``feature_map`` is a registry id or callable (linear, l1, isotonic
    regressors); ``radius`` is the l1 or l2 cap where applicable;
    ``frozen_fn`` short-circuits fitting with a fixed outcome function
    (diagnostics only, not serializable).
    """

    regressor_id: str
    lambda_grid: tuple = regression.DEFAULT_LAMBDA_GRID
    folds: int = 5
    feature_map: Any = None
    radius: float | None = None
    ridge: float = 0.0
    kernel_id: str = "sobolev1"
    frozen_fn: Callable | None = None

    def __post_init__(self):
        if self.regressor_id not in FIRST_STAGE_IDS:
            raise ValueError(
                f"unknown regressor {self.regressor_id!r}; known: {FIRST_STAGE_IDS}"
            )
        if self.folds < 2:
            raise ValueError("folds must be at least 2")
        if len(self.lambda_grid) == 0 or any(g <= 0 for g in self.lambda_grid):
            raise ValueError("lambda grid must be non-empty and positive")
        if self.regressor_id == "frozen" and self.frozen_fn is None:
            raise ValueError("frozen first stage requires frozen_fn")


@dataclass(frozen=True)
class FittedOutcomeModel:
    """A first-stage fit adapted to the (x, a) signature."""

    regressor_id: str
    predict_xa: Callable[[np.ndarray, np.ndarray], np.ndarray]
    model: Any = None
    lambda_reg: float | None = None

    def __call__(self, x, a):
        return self.predict_xa(x, a)


@dataclass(frozen=True)
class TwoStageReport(EstimateReport):
    """Two-stage estimate plus its first-stage fits and a split diagnostic.

    ``fit_distance`` is the empirical weighted distance between the two
    half-sample fits: sqrt((1/n) sum_i (g/pi)^2 (mu1 - mu2)^2 at (x_i, a_i)).
    """

    first_stage_models: tuple = field(default=())
    fit_distance: float = 0.0
    lambdas: tuple = field(default=())


# ---------------------------------------------------------------------------
# Shared pieces
# ---------------------------------------------------------------------------


def _likelihood_ratio(instance: ProblemInstance, x, a) -> np.ndarray:
    """g/pi at observed pairs; zero propensity raises naming the pair."""
    instance.action_index(a)  # validates membership in the action space
    pi_vals = instance.propensity_at(x, a)
    if np.any(pi_vals <= 0):
        bad = int(np.argwhere(pi_vals <= 0)[0][0])
        raise ValueError(
            f"propensity is not positive at observed pair "
            f"(x={x[bad]!r}, a={a[bad]!r})"
        )
    g_vals = np.asarray(instance.weight_fn(x, a), dtype=float) * np.ones(len(x))
    return g_vals / pi_vals


def _sample_variance(values: np.ndarray) -> float:
    if values.size < 2:
        return 0.0
    return float(np.var(values, ddof=1))


def _influence_terms(data: Dataset, instance: ProblemInstance, mu_fn) -> np.ndarray:
    ratio = _likelihood_ratio(instance, data.x, data.a)
    mu_obs = np.asarray(mu_fn(data.x, data.a), dtype=float) * np.ones(len(data))
    g = instance.weight_fn
    ip = instance.lam_inner(
        lambda xs, a: np.asarray(g(xs, a)) * np.asarray(mu_fn(xs, a)), data.x
    )
    return ratio * (data.y - mu_obs) + ip


# ---------------------------------------------------------------------------
# Estimators
# ---------------------------------------------------------------------------


def ipw_estimate(data: Dataset, instance: ProblemInstance) -> EstimateReport:
    """Importance-reweighted plug-in estimate: mean of g/pi * y."""
    terms = _likelihood_ratio(instance, data.x, data.a) * data.y
    return EstimateReport(
        estimator_id="ipw",
        n=len(data),
        seed=data.seed,
        tau_hat=float(np.mean(terms)),
        plugin_variance=_sample_variance(terms),
    )


def generic_estimate(
    data: Dataset, instance: ProblemInstance, f
) -> EstimateReport:
    """Unbiased estimate for an arbitrary auxiliary f:

    mean of [ g/pi * y - f(x, a) + <f(x, .), pi(x, .)> ].
    """
    ratio = _likelihood_ratio(instance, data.x, data.a)
    f_obs = np.asarray(f(data.x, data.a), dtype=float) * np.ones(len(data))
    recenter = instance.conditional_mean(f, data.x)
    terms = ratio * data.y - f_obs + recenter
    return EstimateReport(
        estimator_id="generic",
        n=len(data),
        seed=data.seed,
        tau_hat=float(np.mean(terms)),
        plugin_variance=_sample_variance(terms),
    )


def oracle_estimate(data: Dataset, instance: ProblemInstance) -> EstimateReport:
    """Two-stage estimator with the true outcome mean substituted.

    Not computable from data alone; serves as the efficiency baseline.
    """
    terms = _influence_terms(data, instance, instance.outcome_mean)
    return EstimateReport(
        estimator_id="oracle",
        n=len(data),
        seed=data.seed,
        tau_hat=float(np.mean(terms)),
        plugin_variance=_sample_variance(terms),
    )


def asymptotic_variance_estimate(
    data: Dataset, mu_fn, instance: ProblemInstance
) -> float:
    """Sample variance of the influence terms g/pi (y - muhat) + <g, muhat>."""
    return _sample_variance(_influence_terms(data, instance, mu_fn))


# ---------------------------------------------------------------------------
# Two-stage estimator
# ---------------------------------------------------------------------------


def _fit_first_stage(
    spec: FirstStageSpec,
    instance: ProblemInstance,
    x: np.ndarray,
    a: np.ndarray,
    y: np.ndarray,
    seed: int,
) -> FittedOutcomeModel:
    """Fit one half-sample.  Regression weights are w_i = (g/pi)^2 at the
    observed pairs; rows the weight function annihilates enter with w = 0,
    which removes them from every weighted objective.
    """
    if spec.regressor_id == "frozen":
        return FittedOutcomeModel(regressor_id="frozen", predict_xa=spec.frozen_fn)

    ratio = _likelihood_ratio(instance, x, a)
    w = ratio**2

    if spec.regressor_id in ("weighted-krr", "unweighted-krr"):
        # kernel fits model the outcome as a function of the state alone;
        # rows with zero weight-function value never enter the objective
        w_train = w if spec.regressor_id == "weighted-krr" else (w > 0).astype(float)
        lam = regression.cross_validate_lambda(
            x, y, w_train, grid=spec.lambda_grid, folds=spec.folds,
            seed=seed, kernel_id=spec.kernel_id,
        )
        model = regression.fit_weighted_krr(x, y, w_train, lam, spec.kernel_id)

        def predict(xq, aq, _m=model):
            xq = np.asarray(xq, dtype=float)
            aq = np.asarray(aq, dtype=float)
            xb, _ = np.broadcast_arrays(xq, aq)
            return _m.predict(xb)

        return FittedOutcomeModel(
            regressor_id=spec.regressor_id, predict_xa=predict, model=model,
            lambda_reg=lam,
        )

    feature_map = regression.resolve_feature_map(spec.feature_map)
    if spec.regressor_id == "weighted-linear":
        model = regression.fit_weighted_linear(
            feature_map(x, a), y, w, ridge=spec.ridge, max_norm=spec.radius
        )
    elif spec.regressor_id == "l1-constrained":
        if spec.radius is None:
            raise ValueError("l1-constrained first stage requires a radius")
        model = regression.fit_l1_constrained(feature_map(x, a), y, w, spec.radius)
    elif spec.regressor_id == "weighted-isotonic":
        mask = w > 0
        model = regression.fit_weighted_isotonic(
            feature_map(x, a)[mask], y[mask], w[mask]
        )
    else:  # pragma: no cover - guarded by FirstStageSpec
        raise ValueError(spec.regressor_id)

    if spec.regressor_id == "weighted-isotonic":

        def predict(xq, aq, _m=model, _fm=feature_map):
            return _m.predict(_fm(xq, aq))

    else:

        def predict(xq, aq, _m=model, _fm=feature_map):
            return _m.predict_features(_fm(xq, aq))

    return FittedOutcomeModel(
        regressor_id=spec.regressor_id, predict_xa=predict, model=model
    )


def _auxiliary_from_fit(
    instance: ProblemInstance, mu_fn
) -> StateActionFunction:
    """Step-I auxiliary for a fitted outcome model, with the action inner
    product computed by exact enumeration."""
    g = instance.weight_fn

    def fn(x, a):
        x = np.asarray(x, dtype=float)
        a = np.asarray(a, dtype=float)
        xb, ab = np.broadcast_arrays(x, a)
        fx, fa = xb.ravel(), ab.ravel()
        lead = (
            np.asarray(g(fx, fa), dtype=float)
            * np.asarray(mu_fn(fx, fa), dtype=float)
            / instance.propensity_at(fx, fa)
        )
        ip = instance.lam_inner(
            lambda xs, aa: np.asarray(g(xs, aa)) * np.asarray(mu_fn(xs, aa)), fx
        )
        return (lead - ip).reshape(xb.shape)

    return StateActionFunction(fn=fn, zero_conditional_mean=True, name="fitted-auxiliary")


def two_stage_estimate(
    data: Dataset,
    instance: ProblemInstance,
    spec: FirstStageSpec,
    seed: int = 0,
) -> TwoStageReport:
    """Cross-fitted two-stage estimate.

    Only the known quantities (propensity, weight function, base measure) of
    ``instance`` are consulted; the outcome model fields are never evaluated.
    """
    n = len(data)
    if n < 2 * spec.folds:
        raise ValueError(f"need n >= {2 * spec.folds} samples for {spec.folds} folds")
    n1 = (n + 1) // 2
    idx1 = np.arange(n1)
    idx2 = np.arange(n1, n)

    fits = []
    for j, idx in ((1, idx1), (2, idx2)):
        try:
            fits.append(
                _fit_first_stage(
                    spec, instance, data.x[idx], data.a[idx], data.y[idx],
                    seed=mix_seed(seed, "first-stage", j),
                )
            )
        except Exception as exc:
            raise FirstStageError(
                f"first-stage fit failed on half {j}: {exc}", fold=j
            ) from exc
    fit1, fit2 = fits

    ratio = _likelihood_ratio(instance, data.x, data.a)
    aux1 = _auxiliary_from_fit(instance, fit1.predict_xa)
    aux2 = _auxiliary_from_fit(instance, fit2.predict_xa)
    s1 = ratio[idx1] * data.y[idx1] - aux2(data.x[idx1], data.a[idx1])
    s2 = ratio[idx2] * data.y[idx2] - aux1(data.x[idx2], data.a[idx2])
    tau_hat = (float(np.sum(s1)) + float(np.sum(s2))) / n

    # influence-style terms for the plug-in variance, cross-fitted
    infl = np.empty(n)
    g = instance.weight_fn
    for idx, fit in ((idx1, fit2), (idx2, fit1)):
        mu_obs = np.asarray(fit.predict_xa(data.x[idx], data.a[idx]), dtype=float)
        ip = instance.lam_inner(
            lambda xs, aa, _f=fit: np.asarray(g(xs, aa))
            * np.asarray(_f.predict_xa(xs, aa)),
            data.x[idx],
        )
        infl[idx] = ratio[idx] * (data.y[idx] - mu_obs) + ip

    mu1 = np.asarray(fit1.predict_xa(data.x, data.a), dtype=float)
    mu2 = np.asarray(fit2.predict_xa(data.x, data.a), dtype=float)
    fit_distance = float(np.sqrt(np.mean(ratio**2 * (mu1 - mu2) ** 2)))

    return TwoStageReport(
        estimator_id=f"two-stage-{spec.regressor_id}",
        n=n,
        seed=data.seed,
        tau_hat=tau_hat,
        plugin_variance=_sample_variance(infl),
        first_stage_models=(fit1, fit2),
        fit_distance=fit_distance,
        lambdas=(fit1.lambda_reg, fit2.lambda_reg),
    )

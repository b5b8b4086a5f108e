"""Experiment harness reproducing the missing-data simulation study.

The built-in instance family models a missing-data problem on [0, 1]:
binary action a in {0, 1} flags whether the outcome is observed, the weight
function is g(x, a) = a, the outcome mean is the tent function on the
observed arm, and the noise scale is sigma0 * pi(x, 1)^(gamma/2).  Two
propensity shapes are provided: "pi1" dips to pi_min at x = 1/2 where the
tent peaks (hard), "pi2" dips at x = 1 where the tent vanishes (easy).

``run_experiment`` runs a (estimator x sample size) grid of seeded Monte
Carlo cells and reports the n-rescaled mean squared error per cell.  Results
are byte-deterministic for a fixed master seed regardless of the thread
budget: replication r of a cell always uses the substream addressed by
(master_seed, estimator, n, r), and cells reduce over replications in index
order.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import core, estimators
from .core import Continuous1D, Dataset, ProblemInstance, sample_dataset
from .regression import DEFAULT_LAMBDA_GRID
from .rng import mix_seed

PI_MIN_DEFAULT = 0.005
SIGMA0_DEFAULT = 1.0
ESTIMATOR_IDS = ("ipw", "oracle", "two-stage-weighted-krr", "two-stage-unweighted-krr")
RESULTS_HEADER = "instance_id,estimator,n,reps,normalized_mse,mc_stderr,master_seed"


class CellError(RuntimeError):
    """A Monte Carlo cell failed; carries the (estimator, n) identity."""

    def __init__(self, message: str, estimator: str, n: int):
        super().__init__(message)
        self.estimator = estimator
        self.n = n


# ---------------------------------------------------------------------------
# Built-in instances
# ---------------------------------------------------------------------------


def _tent(x):
    x = np.asarray(x, dtype=float)
    return 0.5 - np.abs(x - 0.5)


def _propensity_curve(name: str, pi_min: float) -> Callable[[np.ndarray], np.ndarray]:
    if name == "pi1":
        return lambda x: 0.5 - (0.5 - pi_min) * np.sin(np.pi * np.asarray(x, dtype=float))
    if name == "pi2":
        return lambda x: 0.5 - (0.5 - pi_min) * np.sin(np.pi * np.asarray(x, dtype=float) / 2.0)
    raise ValueError(f"unknown propensity {name!r}; use 'pi1' or 'pi2'")


def build_builtin_instance(
    propensity: str = "pi1",
    gamma: float = 0.0,
    sigma0: float = SIGMA0_DEFAULT,
    pi_min: float = PI_MIN_DEFAULT,
) -> ProblemInstance:
    """Missing-data instance: uniform states, g(x, a) = a, tent outcome mean.

    The unobserved arm carries mean and noise 0; the weight function
    annihilates it everywhere it could matter.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    curve = _propensity_curve(propensity, pi_min)

    def prop_matrix(x):
        p1 = curve(np.atleast_1d(np.asarray(x, dtype=float)))
        return np.stack([1.0 - p1, p1], axis=-1)

    def outcome_mean(x, a):
        return np.asarray(a, dtype=float) * _tent(x)

    def outcome_sd(x, a):
        return np.asarray(a, dtype=float) * sigma0 * curve(np.asarray(x, dtype=float)) ** (gamma / 2.0)

    instance_id = f"missing-data-{propensity}-gamma{gamma:g}-sigma{sigma0:g}"
    return ProblemInstance(
        states=Continuous1D.uniform(),
        actions=core.ActionSpace.counting([0.0, 1.0]),
        propensity=prop_matrix,
        weight_fn=lambda x, a: np.asarray(a, dtype=float) * np.ones_like(np.asarray(x, dtype=float)),
        outcome_mean=outcome_mean,
        outcome_sd=outcome_sd,
        instance_id=instance_id,
        meta={
            "kind": "builtin",
            "name": "missing-data",
            "params": {
                "propensity": propensity,
                "gamma": gamma,
                "sigma0": sigma0,
                "pi_min": pi_min,
            },
        },
    )


def load_instance(path) -> ProblemInstance:
    """Load an instance description (finite tables or named builtin)."""
    with open(path) as fh:
        doc = json.load(fh)
    return instance_from_json(doc)


def instance_from_json(doc: dict) -> ProblemInstance:
    kind = doc.get("kind")
    if kind == "finite":
        return core.finite_instance_from_json(doc)
    if kind == "finite-custom":
        return load_instance(doc["path"])
    if kind == "builtin":
        if doc.get("name") != "missing-data":
            raise ValueError(f"unknown builtin {doc.get('name')!r}")
        return build_builtin_instance(**doc.get("params", {}))
    raise ValueError(f"unknown instance kind {kind!r}")


# ---------------------------------------------------------------------------
# Configuration and results
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    """Grid of (estimator, sample size) Monte Carlo cells on one instance."""

    instance: dict
    estimators: tuple = ("oracle",)
    n_grid: tuple = (500, 1000, 2000, 4000, 8000)
    reps: int = 200
    folds: int = 5
    lambda_grid: tuple = DEFAULT_LAMBDA_GRID
    master_seed: int = 0
    output: str | None = None
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "estimators", tuple(self.estimators))
        object.__setattr__(self, "n_grid", tuple(int(n) for n in self.n_grid))
        object.__setattr__(self, "lambda_grid", tuple(float(v) for v in self.lambda_grid))
        if self.reps < 1:
            raise ValueError("reps must be at least 1")
        if list(self.n_grid) != sorted(self.n_grid):
            raise ValueError("n_grid must be sorted ascending")
        for est in self.estimators:
            if est not in ESTIMATOR_IDS:
                raise ValueError(f"unknown estimator {est!r}; known: {ESTIMATOR_IDS}")
        if self.threads < 1:
            raise ValueError("threads must be at least 1")

    @classmethod
    def from_json(cls, doc: dict) -> "ExperimentConfig":
        return cls(
            instance=doc["instance"],
            estimators=tuple(doc.get("estimators", ("oracle",))),
            n_grid=tuple(doc.get("n_grid", (500, 1000, 2000, 4000, 8000))),
            reps=int(doc.get("reps", 200)),
            folds=int(doc.get("folds", 5)),
            lambda_grid=tuple(doc.get("lambda_grid", DEFAULT_LAMBDA_GRID)),
            master_seed=int(doc.get("master_seed", 0)),
            output=doc.get("output"),
            threads=int(doc.get("threads", 1)),
        )

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_json(json.load(fh))

    def with_overrides(self, **kwargs) -> "ExperimentConfig":
        return replace(self, **kwargs)


@dataclass(frozen=True)
class ResultRow:
    instance_id: str
    estimator: str
    n: int
    reps: int
    normalized_mse: float
    mc_stderr: float
    master_seed: int

    def __post_init__(self):
        if self.normalized_mse < 0 or self.mc_stderr < 0:
            raise ValueError("normalized_mse and mc_stderr must be non-negative")

    def csv_row(self) -> str:
        return (
            f"{self.instance_id},{self.estimator},{self.n},{self.reps},"
            f"{self.normalized_mse:.10g},{self.mc_stderr:.10g},{self.master_seed}"
        )


@dataclass
class ResultsTable:
    rows: list = field(default_factory=list)

    def sorted_rows(self) -> list:
        return sorted(self.rows, key=lambda r: (r.estimator, r.n))

    def to_csv(self) -> str:
        lines = [RESULTS_HEADER]
        lines.extend(row.csv_row() for row in self.sorted_rows())
        return "\n".join(lines) + "\n"

    def __eq__(self, other) -> bool:
        if not isinstance(other, ResultsTable):
            return NotImplemented
        return self.to_csv() == other.to_csv()


# ---------------------------------------------------------------------------
# Runner
# ---------------------------------------------------------------------------


def _first_stage_spec(estimator: str, config: ExperimentConfig) -> estimators.FirstStageSpec:
    regressor = {
        "two-stage-weighted-krr": "weighted-krr",
        "two-stage-unweighted-krr": "unweighted-krr",
    }[estimator]
    return estimators.FirstStageSpec(
        regressor_id=regressor,
        lambda_grid=config.lambda_grid,
        folds=config.folds,
    )


def _run_rep(
    estimator: str,
    instance: ProblemInstance,
    n: int,
    rep_seed: int,
    tau_star: float,
    spec,
) -> float:
    data: Dataset = sample_dataset(instance, n, seed=rep_seed)
    if estimator == "ipw":
        report = estimators.ipw_estimate(data, instance)
    elif estimator == "oracle":
        report = estimators.oracle_estimate(data, instance)
    else:
        report = estimators.two_stage_estimate(
            data, instance, spec, seed=mix_seed(rep_seed, "two-stage")
        )
    return (report.tau_hat - tau_star) ** 2


def run_experiment(config: ExperimentConfig) -> ResultsTable:
    """Run every (estimator, n) cell of the config.

    normalized_mse is n times the Monte Carlo mean of the squared error;
    mc_stderr is n times the standard deviation of the squared errors over
    sqrt(reps) (zero for a single replication).  A failed cell aborts the
    run, naming the cell.
    """
    instance = instance_from_json(config.instance)
    tau_star = core.true_functional(instance)
    table = ResultsTable()
    for estimator in config.estimators:
        spec = (
            _first_stage_spec(estimator, config)
            if estimator.startswith("two-stage")
            else None
        )
        for n in config.n_grid:
            seeds = [
                mix_seed(config.master_seed, estimator, n, rep)
                for rep in range(config.reps)
            ]
            try:
                if config.threads > 1:
                    with ThreadPoolExecutor(max_workers=config.threads) as pool:
                        sq_errors = list(
                            pool.map(
                                lambda sd: _run_rep(
                                    estimator, instance, n, sd, tau_star, spec
                                ),
                                seeds,
                            )
                        )
                else:
                    sq_errors = [
                        _run_rep(estimator, instance, n, sd, tau_star, spec)
                        for sd in seeds
                    ]
            except Exception as exc:
                raise CellError(
                    f"cell (estimator={estimator}, n={n}) failed: {exc}",
                    estimator=estimator,
                    n=n,
                ) from exc
            sq = np.asarray(sq_errors)
            mse = float(n * np.mean(sq))
            stderr = (
                float(n * np.std(sq, ddof=1) / np.sqrt(config.reps))
                if config.reps > 1
                else 0.0
            )
            table.rows.append(
                ResultRow(
                    instance_id=instance.instance_id,
                    estimator=estimator,
                    n=n,
                    reps=config.reps,
                    normalized_mse=mse,
                    mc_stderr=stderr,
                    master_seed=config.master_seed,
                )
            )
    return table


# ---------------------------------------------------------------------------
# Results I/O and summaries
# ---------------------------------------------------------------------------


def write_results_csv(table: ResultsTable, path) -> None:
    try:
        with open(path, "w", newline="\n") as fh:
            fh.write(table.to_csv())
    except OSError as exc:
        raise OSError(f"cannot write results to {path!r}: {exc}") from exc


def read_results_csv(path) -> ResultsTable:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or lines[0] != RESULTS_HEADER:
        raise ValueError(f"{path!r} does not carry the results header")
    table = ResultsTable()
    for ln in lines[1:]:
        parts = ln.split(",")
        table.rows.append(
            ResultRow(
                instance_id=parts[0],
                estimator=parts[1],
                n=int(parts[2]),
                reps=int(parts[3]),
                normalized_mse=float(parts[4]),
                mc_stderr=float(parts[5]),
                master_seed=int(parts[6]),
            )
        )
    return table


@dataclass(frozen=True)
class ElbowRow:
    estimator: str
    small_over_large: float
    over_oracle_at_largest: float
    decreasing_within_noise: bool


def elbow_report(table: ResultsTable) -> list:
    """Per-estimator convergence summary across the sample-size grid.

    Requires oracle rows and at least three distinct sample sizes.  For each
    estimator: the ratio of normalized MSE at the smallest versus largest n,
    the ratio to the oracle at the largest n, and whether the normalized MSE
    is non-increasing in n up to twice the combined MC standard errors.
    """
    by_est: dict[str, list[ResultRow]] = {}
    for row in table.sorted_rows():
        by_est.setdefault(row.estimator, []).append(row)
    if "oracle" not in by_est:
        raise ValueError("elbow report requires oracle rows for calibration")
    n_values = sorted({row.n for row in table.rows})
    if len(n_values) < 3:
        raise ValueError("elbow report requires at least three sample sizes")

    oracle_rows = {row.n: row for row in by_est["oracle"]}
    largest = n_values[-1]
    if largest not in oracle_rows:
        raise ValueError("oracle row missing at the largest sample size")
    out = []
    for estimator, rows in sorted(by_est.items()):
        rows = sorted(rows, key=lambda r: r.n)
        first, last = rows[0], rows[-1]
        monotone = True
        for prev, nxt in zip(rows, rows[1:]):
            slack = 2.0 * np.hypot(prev.mc_stderr, nxt.mc_stderr)
            if nxt.normalized_mse > prev.normalized_mse + slack:
                monotone = False
        out.append(
            ElbowRow(
                estimator=estimator,
                small_over_large=first.normalized_mse / last.normalized_mse,
                over_oracle_at_largest=last.normalized_mse
                / oracle_rows[largest].normalized_mse,
                decreasing_within_noise=monotone,
            )
        )
    return out

"""Problem instances, sampling, and exact functionals.

A problem instance bundles a state distribution, a finite action space with a
base measure, a known propensity, a known weight function g, and the outcome
model (conditional mean and Gaussian noise scale).  The target of estimation
is the linear functional

    tau = sum_a lambda(a) * E_X[ g(X, a) * mu(X, a) ],

and the central error metric is the weighted L2 norm

    ||h||_w^2 = sum_a lambda(a) * E_X[ g(X, a)^2 / pi(X, a) * h(X, a)^2 ].

All expectations are computed exactly: enumeration for finite state spaces,
adaptive Simpson quadrature for one-dimensional continuous states on [0, 1].

Evaluable fields (propensity, weight_fn, outcome_mean, outcome_sd) must be
vectorized over numpy arrays with standard broadcasting.  Action identifiers
are distinct real numbers; state values are real numbers as well, which keeps
datasets CSV-serializable.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from typing import Any, Callable, NamedTuple, Union

import numpy as np

from .quadrature import adaptive_simpson, DEFAULT_TOL
from .rng import make_generator

PROBE_GRID_SIZE = 64
NORMALIZATION_TOL = 1e-10
ZERO_MEAN_TOL = 1e-8


class PropensityError(ValueError):
    """Invalid propensity weights at a concrete state.

    Attributes:
        state: the offending state value.
    """

    def __init__(self, message: str, state: float):
        super().__init__(message)
        self.state = state


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ActionSpace:
    """Finite action set with a positive base measure lambda."""

    labels: np.ndarray
    base_weights: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=float)
        weights = np.asarray(self.base_weights, dtype=float)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "base_weights", weights)
        if labels.size == 0:
            raise ValueError("action space must be non-empty")
        if len(np.unique(labels)) != labels.size:
            raise ValueError("action identifiers must be distinct")
        if weights.shape != labels.shape:
            raise ValueError("base_weights must match labels in length")
        if np.any(weights <= 0):
            raise ValueError("all base weights must be positive")

    @classmethod
    def counting(cls, labels) -> "ActionSpace":
        labels = np.asarray(labels, dtype=float)
        return cls(labels=labels, base_weights=np.ones_like(labels))

    @property
    def n_actions(self) -> int:
        return int(self.labels.size)


@dataclass(frozen=True)
class FiniteStates:
    """Finite state distribution given by atoms and probabilities."""

    values: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        probs = np.asarray(self.probs, dtype=float)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "probs", probs)
        if values.size == 0:
            raise ValueError("finite state space must be non-empty")
        if len(np.unique(values)) != values.size:
            raise ValueError("state values must be distinct")
        if np.any(probs < 0):
            raise ValueError("state probabilities must be non-negative")
        if abs(float(probs.sum()) - 1.0) > 1e-12:
            raise ValueError(
                f"state probabilities sum to {probs.sum()!r}, not 1 within 1e-12"
            )


@dataclass(frozen=True)
class Continuous1D:
    """Continuous state distribution on [0, 1] with density and sampler.

    ``density`` is vectorized; ``sampler(rng, n)`` returns n draws.
    """

    density: Callable[[np.ndarray], np.ndarray]
    sampler: Callable[[np.random.Generator, int], np.ndarray]
    name: str = "custom"

    def __post_init__(self):
        grid = np.linspace(0.0, 1.0, PROBE_GRID_SIZE)
        dens = np.asarray(self.density(grid), dtype=float)
        if np.any(dens < 0):
            raise ValueError("density must be non-negative on [0, 1]")
        mass = adaptive_simpson(self.density, 0.0, 1.0, tol=DEFAULT_TOL)
        if abs(mass - 1.0) > 1e-8:
            raise ValueError(f"density integrates to {mass!r}, not 1 within 1e-8")

    @classmethod
    def uniform(cls) -> "Continuous1D":
        return cls(
            density=lambda x: np.ones_like(np.asarray(x, dtype=float)),
            sampler=lambda rng, n: rng.random(n),
            name="uniform",
        )


StateDistribution = Union[FiniteStates, Continuous1D]


@dataclass(frozen=True)
class ProblemInstance:
    """Sampling model plus known (propensity, weight) pair.

    ``propensity(x)`` maps a state vector of shape (n,) to an (n, K) array of
    conditional action densities with respect to the base measure; for every
    state, sum_a lambda(a) * pi(x, a) must equal 1.  ``weight_fn``,
    ``outcome_mean`` and ``outcome_sd`` map broadcastable (x, a) arrays to
    values.  Only Gaussian outcome noise is supported.
    """

    states: StateDistribution
    actions: ActionSpace
    propensity: Callable[[np.ndarray], np.ndarray]
    weight_fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    outcome_mean: Callable[[np.ndarray, np.ndarray], np.ndarray]
    outcome_sd: Callable[[np.ndarray, np.ndarray], np.ndarray]
    noise_family: str = "gaussian"
    instance_id: str = "custom"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.noise_family != "gaussian":
            raise ValueError("only gaussian outcome noise is supported")
        probe = self.probe_states()
        pmat = np.asarray(self.propensity(probe), dtype=float)
        if pmat.shape != (probe.size, self.actions.n_actions):
            raise ValueError(
                f"propensity(x) must return shape (n, {self.actions.n_actions})"
            )
        if np.any(pmat <= 0):
            bad = int(np.argwhere(pmat <= 0)[0][0])
            raise PropensityError(
                f"propensity not strictly positive at state {probe[bad]!r}",
                state=float(probe[bad]),
            )
        norms = pmat @ self.actions.base_weights
        worst = int(np.argmax(np.abs(norms - 1.0)))
        if abs(norms[worst] - 1.0) > NORMALIZATION_TOL:
            raise PropensityError(
                f"propensity at state {probe[worst]!r} has lambda-mass "
                f"{norms[worst]!r}, not 1 within {NORMALIZATION_TOL}",
                state=float(probe[worst]),
            )
        sd = self._pair_grid(self.outcome_sd, probe)
        if np.any(sd < 0):
            raise ValueError("outcome_sd must be non-negative")

    # -- evaluation helpers -------------------------------------------------

    def probe_states(self) -> np.ndarray:
        """All states (finite) or 64 equispaced points of [0, 1]."""
        if isinstance(self.states, FiniteStates):
            return self.states.values
        return np.linspace(0.0, 1.0, PROBE_GRID_SIZE)

    def _pair_grid(self, fn, x: np.ndarray) -> np.ndarray:
        """Evaluate fn on the (state grid) x (action) product, shape (n, K)."""
        x = np.asarray(x, dtype=float)
        return np.asarray(
            fn(x[:, None], self.actions.labels[None, :]), dtype=float
        ) * np.ones((x.size, self.actions.n_actions))

    def propensity_at(self, x: np.ndarray, a: np.ndarray) -> np.ndarray:
        """pi(x_i, a_i) for paired state and action vectors."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        idx = self.action_index(a)
        pmat = np.asarray(self.propensity(x), dtype=float)
        return pmat[np.arange(x.size), idx]

    def action_index(self, a: np.ndarray) -> np.ndarray:
        """Map action labels to their indices in the action space."""
        labels = self.actions.labels
        order = np.argsort(labels)
        a = np.atleast_1d(np.asarray(a, dtype=float))
        pos = np.searchsorted(labels[order], a)
        pos = np.clip(pos, 0, labels.size - 1)
        idx = order[pos]
        if np.any(labels[idx] != a):
            bad = a[labels[idx] != a][0]
            raise ValueError(f"action {bad!r} not in the instance action space")
        return idx

    def lam_inner(self, fn, x: np.ndarray) -> np.ndarray:
        """<fn(x, .), lambda> = sum_a lambda(a) fn(x, a), vectorized in x."""
        return self._pair_grid(fn, x) @ self.actions.base_weights

    def conditional_mean(self, fn, x: np.ndarray) -> np.ndarray:
        """<fn(x, .), pi(x, .)> = sum_a lambda(a) pi(x, a) fn(x, a)."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        pmat = np.asarray(self.propensity(x), dtype=float)
        vals = self._pair_grid(fn, x)
        return (pmat * vals) @ self.actions.base_weights

    def state_expectation(self, fn, tol: float = DEFAULT_TOL) -> float:
        """E_X[fn(X)] for a vectorized state function."""
        if isinstance(self.states, FiniteStates):
            vals = np.asarray(fn(self.states.values), dtype=float)
            return float(np.dot(self.states.probs, vals))
        dens = self.states.density
        return adaptive_simpson(
            lambda x: dens(x) * np.asarray(fn(x), dtype=float), 0.0, 1.0, tol=tol
        )

    def weighted_pair_expectation(self, fn, tol: float = DEFAULT_TOL) -> float:
        """sum_a lambda(a) E_X[fn(X, a)]."""
        return self.state_expectation(lambda x: self.lam_inner(fn, x), tol=tol)

    # -- construction from tables -------------------------------------------

    @classmethod
    def from_tables(
        cls,
        states,
        probs,
        actions,
        propensity_table,
        weight_table,
        outcome_mean_table,
        outcome_sd_table,
        base_weights=None,
        instance_id: str = "finite",
    ) -> "ProblemInstance":
        """Finite instance from per-(state, action) tables.

        Tables are (n_states, n_actions) arrays aligned with the given state
        values and action labels.
        """
        states = np.asarray(states, dtype=float)
        action_space = (
            ActionSpace.counting(actions)
            if base_weights is None
            else ActionSpace(np.asarray(actions, dtype=float), np.asarray(base_weights, dtype=float))
        )
        prop = _TablePropensity(states, np.asarray(propensity_table, dtype=float))
        return cls(
            states=FiniteStates(states, np.asarray(probs, dtype=float)),
            actions=action_space,
            propensity=prop,
            weight_fn=_TablePairFn(states, action_space.labels, weight_table),
            outcome_mean=_TablePairFn(states, action_space.labels, outcome_mean_table),
            outcome_sd=_TablePairFn(states, action_space.labels, outcome_sd_table),
            instance_id=instance_id,
            meta={
                "kind": "finite",
                "tables": {
                    "states": states.tolist(),
                    "probs": np.asarray(probs, dtype=float).tolist(),
                    "actions": action_space.labels.tolist(),
                    "base_weights": action_space.base_weights.tolist(),
                    "propensity": np.asarray(propensity_table, dtype=float).tolist(),
                    "weight": np.asarray(weight_table, dtype=float).tolist(),
                    "outcome_mean": np.asarray(outcome_mean_table, dtype=float).tolist(),
                    "outcome_sd": np.asarray(outcome_sd_table, dtype=float).tolist(),
                },
            },
        )


def _lookup_index(sorted_values: np.ndarray, queries: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(sorted_values, queries)
    idx = np.clip(idx, 0, sorted_values.size - 1)
    if np.any(sorted_values[idx] != queries):
        bad = np.asarray(queries)[sorted_values[idx] != queries].ravel()[0]
        raise KeyError(f"value {bad!r} not found in table")
    return idx


class _TablePairFn:
    """Broadcasting (x, a) -> table[x, a] lookup for finite instances."""

    def __init__(self, state_values, action_labels, table):
        order = np.argsort(np.asarray(state_values, dtype=float))
        self.state_values = np.asarray(state_values, dtype=float)[order]
        aorder = np.argsort(np.asarray(action_labels, dtype=float))
        self.action_labels = np.asarray(action_labels, dtype=float)[aorder]
        self.table = np.asarray(table, dtype=float)[np.ix_(order, aorder)]

    def __call__(self, x, a):
        x, a = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(a, dtype=float))
        si = _lookup_index(self.state_values, x.ravel()).reshape(x.shape)
        ai = _lookup_index(self.action_labels, a.ravel()).reshape(a.shape)
        return self.table[si, ai]


class _TablePropensity:
    """x -> full propensity row, preserving the action-space column order."""

    def __init__(self, state_values, table):
        order = np.argsort(np.asarray(state_values, dtype=float))
        self.state_values = np.asarray(state_values, dtype=float)[order]
        self.table = np.asarray(table, dtype=float)[order]

    def __call__(self, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return self.table[_lookup_index(self.state_values, x)]


@dataclass(frozen=True)
class StateActionFunction:
    """Evaluable h(x, a), optionally certified to have zero conditional mean.

    The flag asserts <h(x, .), pi(x, .)> = 0 for all x; it is verified on the
    probe grid whenever set through ``state_action_function``.
    """

    fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    zero_conditional_mean: bool = False
    name: str = ""

    def __call__(self, x, a):
        return self.fn(x, a)


def verify_zero_conditional_mean(
    instance: ProblemInstance, h, tol: float = ZERO_MEAN_TOL
) -> float:
    """Max |<h(x, .), pi(x, .)>| over the probe grid."""
    worst = float(np.max(np.abs(instance.conditional_mean(h, instance.probe_states()))))
    return worst


def state_action_function(
    fn, instance: ProblemInstance | None = None, zero_conditional_mean: bool = False, name: str = ""
) -> StateActionFunction:
    """Wrap a callable; verify the zero-mean flag against an instance if set."""
    if zero_conditional_mean:
        if instance is None:
            raise ValueError("zero-mean flag requires an instance to verify against")
        worst = verify_zero_conditional_mean(instance, fn)
        if worst > ZERO_MEAN_TOL:
            raise ValueError(
                f"conditional mean reaches {worst:.3e} on the probe grid, "
                f"exceeding {ZERO_MEAN_TOL}"
            )
    return StateActionFunction(fn=fn, zero_conditional_mean=zero_conditional_mean, name=name)


@dataclass(frozen=True)
class Dataset:
    """Observed (state, action, outcome) triples with provenance."""

    x: np.ndarray
    a: np.ndarray
    y: np.ndarray
    seed: int
    instance_id: str

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        a = np.asarray(self.a, dtype=float)
        y = np.asarray(self.y, dtype=float)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "y", y)
        if not (x.shape == a.shape == y.shape) or x.ndim != 1:
            raise ValueError("x, a, y must be equal-length vectors")
        if x.size < 1:
            raise ValueError("dataset must contain at least one triple")

    def __len__(self) -> int:
        return int(self.x.size)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def sample_dataset(instance: ProblemInstance, n: int, seed: int) -> Dataset:
    """Draw n i.i.d. triples: X from the state law, A from pi(X, .), then
    Y = mu(X, A) + sd(X, A) * Z with standard normal Z.

    Deterministic given (instance, n, seed).
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = make_generator(seed)
    if isinstance(instance.states, FiniteStates):
        idx = rng.choice(instance.states.values.size, size=n, p=instance.states.probs)
        x = instance.states.values[idx]
    else:
        x = np.asarray(instance.states.sampler(rng, n), dtype=float)

    pmat = np.asarray(instance.propensity(x), dtype=float)
    joint = pmat * instance.actions.base_weights
    if np.any(joint < 0):
        bad = int(np.argwhere(joint < 0)[0][0])
        raise PropensityError(
            f"negative action probability at sampled state {x[bad]!r}",
            state=float(x[bad]),
        )
    rowsum = joint.sum(axis=1)
    worst = int(np.argmax(np.abs(rowsum - 1.0)))
    if abs(rowsum[worst] - 1.0) > NORMALIZATION_TOL:
        raise PropensityError(
            f"propensity at sampled state {x[worst]!r} has mass {rowsum[worst]!r}",
            state=float(x[worst]),
        )
    u = rng.random(n)
    a_idx = np.clip(
        (np.cumsum(joint, axis=1) < u[:, None]).sum(axis=1),
        0,
        instance.actions.n_actions - 1,
    )
    a = instance.actions.labels[a_idx]
    mu = np.asarray(instance.outcome_mean(x, a), dtype=float) * np.ones(n)
    sd = np.asarray(instance.outcome_sd(x, a), dtype=float) * np.ones(n)
    y = mu + sd * rng.standard_normal(n)
    return Dataset(x=x, a=a, y=y, seed=int(seed), instance_id=instance.instance_id)


# ---------------------------------------------------------------------------
# Exact functionals
# ---------------------------------------------------------------------------


def true_functional(instance: ProblemInstance, tol: float = DEFAULT_TOL) -> float:
    """tau = sum_a lambda(a) E_X[g(X, a) mu(X, a)], computed exactly."""
    g, mu = instance.weight_fn, instance.outcome_mean
    return instance.weighted_pair_expectation(
        lambda x, a: np.asarray(g(x, a)) * np.asarray(mu(x, a)), tol=tol
    )


def weighted_norm(instance: ProblemInstance, h, tol: float = DEFAULT_TOL) -> float:
    """||h||_w = sqrt( sum_a lambda(a) E_X[g^2/pi * h^2] )."""

    def integrand(x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        pmat = np.asarray(instance.propensity(x), dtype=float)
        gvals = instance._pair_grid(instance.weight_fn, x)
        hvals = instance._pair_grid(h, x)
        return (gvals**2 / pmat * hvals**2) @ instance.actions.base_weights

    val = instance.state_expectation(integrand, tol=tol)
    return float(np.sqrt(max(val, 0.0)))


def _gmu_inner(instance: ProblemInstance):
    g, mu = instance.weight_fn, instance.outcome_mean
    return lambda x: instance.lam_inner(
        lambda xs, a: np.asarray(g(xs, a)) * np.asarray(mu(xs, a)), x
    )


def efficient_variance(instance: ProblemInstance, tol: float = DEFAULT_TOL) -> float:
    """Semiparametric variance floor: Var_X(<g, mu>) + ||sd||_w^2."""
    ip = _gmu_inner(instance)
    mean = instance.state_expectation(ip, tol=tol)
    second = instance.state_expectation(lambda x: ip(x) ** 2, tol=tol)
    between = max(second - mean**2, 0.0)
    return float(between + weighted_norm(instance, instance.outcome_sd, tol=tol) ** 2)


def optimal_auxiliary(instance: ProblemInstance) -> StateActionFunction:
    """Variance-minimizing auxiliary: g*mu/pi minus its action inner product.

    The result has zero conditional mean under the propensity by construction;
    the flag is verified on the probe grid.
    """
    g, mu = instance.weight_fn, instance.outcome_mean

    def fn(x, a):
        x = np.asarray(x, dtype=float)
        a = np.asarray(a, dtype=float)
        xb, ab = np.broadcast_arrays(x, a)
        flat_x = xb.ravel()
        flat_a = ab.ravel()
        pi_vals = instance.propensity_at(flat_x, flat_a)
        lead = (
            np.asarray(g(flat_x, flat_a), dtype=float)
            * np.asarray(mu(flat_x, flat_a), dtype=float)
            / pi_vals
        )
        ip = _gmu_inner(instance)(flat_x)
        return (lead - ip).reshape(xb.shape)

    return state_action_function(
        fn, instance=instance, zero_conditional_mean=True, name="optimal-auxiliary"
    )


class ExcessVariance(NamedTuple):
    value: float
    gap: float


def excess_variance(
    instance: ProblemInstance, mubar, tol: float = DEFAULT_TOL
) -> ExcessVariance:
    """Mean conditional variance of (g/pi)(mu - mubar) given the state.

    Returns the pair (value, gap) where gap = ||mubar - mu||_w^2 - value
    = E_X[ <g(X, .), (mu - mubar)(X, .)>^2 ], both computed exactly.
    """
    mu = instance.outcome_mean

    def diff(x, a):
        return np.asarray(mu(x, a), dtype=float) - np.asarray(mubar(x, a), dtype=float)

    norm_sq = weighted_norm(instance, diff, tol=tol) ** 2
    g = instance.weight_fn
    ip = lambda x: instance.lam_inner(
        lambda xs, a: np.asarray(g(xs, a)) * diff(xs, a), x
    )
    gap = instance.state_expectation(lambda x: ip(x) ** 2, tol=tol)
    gap = max(float(gap), 0.0)
    return ExcessVariance(value=max(norm_sq - gap, 0.0), gap=gap)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def instance_to_json(instance: ProblemInstance) -> dict:
    """Structured description: finite tables, or a named builtin with params."""
    meta = instance.meta or {}
    if meta.get("kind") == "finite":
        out: dict[str, Any] = {"kind": "finite", "instance_id": instance.instance_id}
        out.update(meta["tables"])
        return out
    if meta.get("kind") == "builtin":
        return {
            "kind": "builtin",
            "name": meta["name"],
            "params": dict(meta["params"]),
            "instance_id": instance.instance_id,
        }
    raise ValueError(
        "only table-backed finite instances and named builtins are serializable"
    )


def finite_instance_from_json(doc: dict) -> ProblemInstance:
    if doc.get("kind") != "finite":
        raise ValueError(f"expected kind 'finite', got {doc.get('kind')!r}")
    return ProblemInstance.from_tables(
        states=doc["states"],
        probs=doc["probs"],
        actions=doc["actions"],
        base_weights=doc.get("base_weights"),
        propensity_table=doc["propensity"],
        weight_table=doc["weight"],
        outcome_mean_table=doc["outcome_mean"],
        outcome_sd_table=doc["outcome_sd"],
        instance_id=doc.get("instance_id", "finite"),
    )


def write_dataset_csv(data: Dataset, path) -> None:
    """CSV with columns x,a,y and a header comment carrying provenance."""
    with open(path, "w", newline="\n") as fh:
        _write_dataset(data, fh)


def dataset_to_csv(data: Dataset) -> str:
    buf = io.StringIO()
    _write_dataset(data, buf)
    return buf.getvalue()


def _write_dataset(data: Dataset, fh) -> None:
    fh.write(f"# seed={data.seed} instance_id={data.instance_id}\n")
    fh.write("x,a,y\n")
    for xi, ai, yi in zip(data.x, data.a, data.y):
        fh.write(f"{float(xi)!r},{float(ai)!r},{float(yi)!r}\n")


def read_dataset_csv(path) -> Dataset:
    with open(path, "r") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    seed, instance_id = 0, "unknown"
    rows = []
    for ln in lines:
        if not ln:
            continue
        if ln.startswith("#"):
            for tok in ln[1:].split():
                if tok.startswith("seed="):
                    seed = int(tok[5:])
                elif tok.startswith("instance_id="):
                    instance_id = tok[len("instance_id="):]
            continue
        if ln.startswith("x,"):
            continue
        rows.append([float(v) for v in ln.split(",")])
    arr = np.asarray(rows, dtype=float)
    if arr.size == 0:
        raise ValueError(f"no data rows in {path}")
    return Dataset(
        x=arr[:, 0], a=arr[:, 1], y=arr[:, 2], seed=seed, instance_id=instance_id
    )


def save_instance(instance: ProblemInstance, path) -> None:
    with open(path, "w", newline="\n") as fh:
        json.dump(instance_to_json(instance), fh, indent=2)
        fh.write("\n")

import numpy as np
import pytest

from ope_lab import ProblemInstance

D1_TABLES = {
    "states": [0.0, 1.0],
    "probs": [0.5, 0.5],
    "actions": [0.0, 1.0],
    "propensity": [[0.8, 0.2], [0.4, 0.6]],
    "weight": [[-1.0, 1.0], [-1.0, 1.0]],  # g(x, a) = 2a - 1
    "outcome_mean": [[1.0, 2.0], [0.0, 3.0]],
}


def make_d1(sigma: float = 0.0) -> ProblemInstance:
    sd = [[sigma, sigma], [sigma, sigma]]
    return ProblemInstance.from_tables(
        states=D1_TABLES["states"],
        probs=D1_TABLES["probs"],
        actions=D1_TABLES["actions"],
        propensity_table=D1_TABLES["propensity"],
        weight_table=D1_TABLES["weight"],
        outcome_mean_table=D1_TABLES["outcome_mean"],
        outcome_sd_table=sd,
        instance_id=f"d1-sigma{sigma:g}",
    )


@pytest.fixture
def d1():
    return make_d1(0.0)


@pytest.fixture
def d1_noisy():
    return make_d1(1.0)


def random_finite_tables(rng: np.random.Generator, n_states: int, n_actions: int):
    """Random valid finite-instance tables (lambda-normalized propensity)."""
    probs = rng.random(n_states) + 0.1
    probs /= probs.sum()
    lam = rng.random(n_actions) + 0.5
    raw = rng.random((n_states, n_actions)) + 0.05
    pi = raw / (raw @ lam)[:, None]
    g = rng.normal(size=(n_states, n_actions))
    mu = rng.normal(size=(n_states, n_actions))
    sd = rng.random((n_states, n_actions))
    return {
        "states": np.arange(n_states, dtype=float),
        "probs": probs,
        "lam": lam,
        "pi": pi,
        "g": g,
        "mu": mu,
        "sd": sd,
    }


def instance_from_random_tables(tables, instance_id="random-finite") -> ProblemInstance:
    return ProblemInstance.from_tables(
        states=tables["states"],
        probs=tables["probs"],
        actions=np.arange(len(tables["lam"]), dtype=float),
        base_weights=tables["lam"],
        propensity_table=tables["pi"],
        weight_table=tables["g"],
        outcome_mean_table=tables["mu"],
        outcome_sd_table=tables["sd"],
        instance_id=instance_id,
    )

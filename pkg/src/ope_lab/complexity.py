"""Numerical theory diagnostics.

Monte Carlo estimates of the localized Rademacher complexities that govern
first-stage estimation error, bisection for their critical radii, a small-ball
probability estimator, and exact strong-shattering certificates for two
structured function classes (single-index models over a Hadamard basis, and
sparse linear models via a block packing).

Localized classes are restricted to families whose data-conditional supremum
has a closed form:

    linear-ellipsoid : {f_theta = <theta, phi> : theta' Sigma theta <= r^2},
                       sup over the class of <theta, v> equals
                       r * sqrt(v' Sigma^{-1} v);
    l1-ball          : {f_theta : ||theta||_1 <= R1}, sup = R1 * max_j |v_j|;
    singleton-zero   : {0}, sup = 0.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
import scipy.linalg

from .core import FiniteStates, ProblemInstance, weighted_norm
from .quadrature import adaptive_simpson
from .rng import make_generator, mix_seed, substream

BISECTION_TOL = 1e-4
DEFAULT_REPS = 10_000
VERIFY_TOL = 1e-10
EXHAUSTIVE_PATTERN_LIMIT = 16
RANDOM_PATTERN_COUNT = 10_000


class ComplexityEstimate(NamedTuple):
    value: float
    stderr: float
    reps: int


class MonotonicityError(RuntimeError):
    """Raised when an MC complexity profile is not monotone beyond MC error."""


@dataclass(frozen=True)
class LocalizedClassSpec:
    """A localized function class with closed-form data-conditional suprema.

    ``radius`` is the localization radius in the weighted norm.  For the
    linear ellipsoid, ``sigma_matrix`` must be the second-moment matrix of
    (g/pi) phi so that the ellipsoid equals the weighted-norm ball of the
    linear span.  ``center`` (optional) is the recentering function whose
    difference from the true outcome drives the squared multiplier
    complexity.
    """

    class_id: str
    radius: float
    feature_map: Callable | None = None
    sigma_matrix: np.ndarray | None = None
    l1_radius: float | None = None
    center: Callable | None = None

    def __post_init__(self):
        if self.class_id not in ("linear-ellipsoid", "l1-ball", "singleton-zero"):
            raise ValueError(f"unsupported class {self.class_id!r}")
        if self.radius < 0:
            raise ValueError("localization radius must be non-negative")
        if self.class_id == "linear-ellipsoid":
            if self.feature_map is None or self.sigma_matrix is None:
                raise ValueError("linear-ellipsoid needs feature_map and sigma_matrix")
            sig = np.asarray(self.sigma_matrix, dtype=float)
            if not np.allclose(sig, sig.T, atol=1e-10):
                raise ValueError("sigma_matrix must be symmetric")
            if np.min(scipy.linalg.eigvalsh(sig)) <= 0:
                raise ValueError("sigma_matrix must be positive definite")
            object.__setattr__(self, "sigma_matrix", sig)
        if self.class_id == "l1-ball":
            if self.feature_map is None or self.l1_radius is None:
                raise ValueError("l1-ball needs feature_map and l1_radius")

    def with_radius(self, radius: float) -> "LocalizedClassSpec":
        return LocalizedClassSpec(
            class_id=self.class_id,
            radius=radius,
            feature_map=self.feature_map,
            sigma_matrix=self.sigma_matrix,
            l1_radius=self.l1_radius,
            center=self.center,
        )


def moment_matrices(instance: ProblemInstance, feature_map) -> tuple[np.ndarray, np.ndarray]:
    """Second-moment matrices of the weighted features.

    Returns (Sigma, Gamma_sigma) with
    Sigma = E[(g/pi)^2 phi phi'] and Gamma_sigma = E[(g/pi)^4 sigma^2 phi phi'],
    both over the joint (state, action) law, computed by enumeration for
    finite states and quadrature otherwise.
    """
    labels = instance.actions.labels
    lam = instance.actions.base_weights

    def rows(x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        pmat = np.asarray(instance.propensity(x), dtype=float)
        out_s = None
        out_g = None
        for k, a in enumerate(labels):
            av = np.full(x.shape, a)
            phi = np.asarray(feature_map(x, av), dtype=float)
            if phi.ndim == 1:
                phi = phi[:, None]
            gv = np.asarray(instance.weight_fn(x, av), dtype=float) * np.ones(x.size)
            sd = np.asarray(instance.outcome_sd(x, av), dtype=float) * np.ones(x.size)
            ratio = gv / pmat[:, k]
            # joint density of the (x, a) pair is lam * pi
            wt = lam[k] * pmat[:, k]
            outer = phi[:, :, None] * phi[:, None, :]
            s_term = (wt * ratio**2)[:, None, None] * outer
            g_term = (wt * ratio**4 * sd**2)[:, None, None] * outer
            out_s = s_term if out_s is None else out_s + s_term
            out_g = g_term if out_g is None else out_g + g_term
        return out_s, out_g

    if isinstance(instance.states, FiniteStates):
        s_terms, g_terms = rows(instance.states.values)
        p = instance.states.probs
        sigma = np.tensordot(p, s_terms, axes=(0, 0))
        gamma = np.tensordot(p, g_terms, axes=(0, 0))
        return sigma, gamma

    probe = feature_map(np.zeros(1), np.full(1, labels[0]))
    d = 1 if np.asarray(probe).ndim == 1 else np.asarray(probe).shape[-1]
    dens = instance.states.density
    sigma = np.empty((d, d))
    gamma = np.empty((d, d))
    for i in range(d):
        for j in range(i + 1):
            sigma[i, j] = sigma[j, i] = adaptive_simpson(
                lambda x: dens(x) * rows(x)[0][:, i, j], 0.0, 1.0
            )
            gamma[i, j] = gamma[j, i] = adaptive_simpson(
                lambda x: dens(x) * rows(x)[1][:, i, j], 0.0, 1.0
            )
    return sigma, gamma


# ---------------------------------------------------------------------------
# Monte Carlo Rademacher complexities
# ---------------------------------------------------------------------------


def _sample_pairs(instance: ProblemInstance, m: int, rng) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(instance.states, FiniteStates):
        idx = rng.choice(instance.states.values.size, size=m, p=instance.states.probs)
        x = instance.states.values[idx]
    else:
        x = np.asarray(instance.states.sampler(rng, m), dtype=float)
    joint = np.asarray(instance.propensity(x), dtype=float) * instance.actions.base_weights
    u = rng.random(m)
    a_idx = np.clip(
        (np.cumsum(joint, axis=1) < u[:, None]).sum(axis=1),
        0,
        instance.actions.n_actions - 1,
    )
    return x, instance.actions.labels[a_idx]


def _score_sup(spec: LocalizedClassSpec, score: np.ndarray, chol) -> float:
    """Closed-form supremum of <theta, score> over the localized class."""
    if spec.class_id == "singleton-zero":
        return 0.0
    if spec.class_id == "linear-ellipsoid":
        z = scipy.linalg.solve_triangular(chol, score, lower=True)
        return spec.radius * float(np.linalg.norm(z))
    return float(spec.l1_radius) * float(np.max(np.abs(score))) if score.size else 0.0


def _prepare(spec: LocalizedClassSpec):
    chol = None
    if spec.class_id == "linear-ellipsoid":
        chol = scipy.linalg.cholesky(spec.sigma_matrix, lower=True)
    return chol


def _features_at(spec: LocalizedClassSpec, x, a) -> np.ndarray:
    phi = np.asarray(spec.feature_map(x, a), dtype=float)
    if phi.ndim == 1:
        phi = phi[:, None]
    return phi


def rademacher_S_mc(
    instance: ProblemInstance,
    spec: LocalizedClassSpec,
    m: int,
    multiplier="outcome-noise",
    reps: int = DEFAULT_REPS,
    seed: int = 0,
) -> ComplexityEstimate:
    """Squared-form localized complexity with a per-sample multiplier.

    Each replication draws m pairs, the multiplier values (outcome noise
    Y - mu by default, or a custom function h(x, a), typically the difference
    mu - center), and Rademacher signs; the supremum of the weighted score is
    computed in closed form.  Returns the root of the mean squared supremum
    with a delta-method standard error.
    """
    if spec.class_id == "singleton-zero":
        return ComplexityEstimate(0.0, 0.0, reps)
    chol = _prepare(spec)
    sups_sq = np.empty(reps)
    for r in range(reps):
        rng = substream(seed, r)
        x, a = _sample_pairs(instance, m, rng)
        ratio2 = (
            np.asarray(instance.weight_fn(x, a), dtype=float)
            / instance.propensity_at(x, a)
        ) ** 2
        if isinstance(multiplier, str):
            if multiplier != "outcome-noise":
                raise ValueError(f"unknown multiplier {multiplier!r}")
            sd = np.asarray(instance.outcome_sd(x, a), dtype=float) * np.ones(m)
            mult = sd * rng.standard_normal(m)
        else:
            mult = np.asarray(multiplier(x, a), dtype=float) * np.ones(m)
        eps = rng.integers(0, 2, size=m) * 2.0 - 1.0
        phi = _features_at(spec, x, a)
        score = (eps * ratio2 * mult) @ phi / m
        sups_sq[r] = _score_sup(spec, score, chol) ** 2
    mean_sq = float(np.mean(sups_sq))
    se_sq = float(np.std(sups_sq, ddof=1) / np.sqrt(reps)) if reps > 1 else 0.0
    value = float(np.sqrt(max(mean_sq, 0.0)))
    stderr = se_sq / (2.0 * value) if value > 0 else float(np.sqrt(se_sq))
    return ComplexityEstimate(value, stderr, reps)


def rademacher_R_mc(
    instance: ProblemInstance,
    spec: LocalizedClassSpec,
    m: int,
    reps: int = DEFAULT_REPS,
    seed: int = 0,
) -> ComplexityEstimate:
    """Plain localized complexity with the g/pi weighting and no multiplier."""
    if spec.class_id == "singleton-zero":
        return ComplexityEstimate(0.0, 0.0, reps)
    chol = _prepare(spec)
    sups = np.empty(reps)
    for r in range(reps):
        rng = substream(seed, r)
        x, a = _sample_pairs(instance, m, rng)
        ratio = (
            np.asarray(instance.weight_fn(x, a), dtype=float)
            / instance.propensity_at(x, a)
        )
        eps = rng.integers(0, 2, size=m) * 2.0 - 1.0
        phi = _features_at(spec, x, a)
        score = (eps * ratio) @ phi / m
        sups[r] = _score_sup(spec, score, chol)
    value = float(np.mean(sups))
    stderr = float(np.std(sups, ddof=1) / np.sqrt(reps)) if reps > 1 else 0.0
    return ComplexityEstimate(value, stderr, reps)


# ---------------------------------------------------------------------------
# Critical radii
# ---------------------------------------------------------------------------


def critical_radius(
    instance: ProblemInstance,
    spec: LocalizedClassSpec,
    m: int,
    kind: str = "s",
    source: str = "mc",
    tolerance: float = BISECTION_TOL,
    alpha1: float | None = None,
    alpha2: float | None = None,
    multiplier="outcome-noise",
    reps: int = DEFAULT_REPS,
    seed: int = 0,
    gamma_matrix: np.ndarray | None = None,
) -> float:
    """Smallest radius solving the localized fixed-point inequality.

    ``kind == "s"`` solves complexity(r) <= r^2 for the squared-form
    complexity; ``kind == "r"`` solves complexity(r)/r <= alpha1*alpha2/32 for
    the plain one and requires the small-ball constants.  ``source`` is
    ``"mc"`` (bisection on Monte Carlo estimates sharing one seed across
    radii) or ``"closed-form-linear"`` (the linear-class bounds
    R(r) = r*sqrt(d/m) and S(r) = r*sqrt(tr(Sigma^{-1} Gamma_sigma)/m)).

    The plain kind returns 0 when the threshold already holds at every
    radius and inf when it holds at none.
    """
    if kind not in ("s", "r"):
        raise ValueError("kind must be 's' or 'r'")
    if spec.class_id == "singleton-zero":
        return 0.0
    if kind == "r":
        if alpha1 is None or alpha2 is None:
            raise ValueError("kind 'r' requires the small-ball constants")
        threshold = alpha1 * alpha2 / 32.0

    if source == "closed-form-linear":
        if spec.class_id != "linear-ellipsoid":
            raise ValueError("closed-form-linear applies to the linear class")
        d = spec.sigma_matrix.shape[0]
        if kind == "r":
            return 0.0 if np.sqrt(d / m) <= threshold else float("inf")
        if gamma_matrix is None:
            _, gamma_matrix = moment_matrices(instance, spec.feature_map)
        trace = float(np.trace(np.linalg.solve(spec.sigma_matrix, gamma_matrix)))
        slope = np.sqrt(max(trace, 0.0) / m)

        def complexity(r: float) -> ComplexityEstimate:
            return ComplexityEstimate(r * slope, 0.0, 0)

    elif source == "mc":

        def complexity(r: float) -> ComplexityEstimate:
            local = spec.with_radius(r)
            if kind == "s":
                return rademacher_S_mc(
                    instance, local, m, multiplier=multiplier, reps=reps, seed=seed
                )
            return rademacher_R_mc(instance, local, m, reps=reps, seed=seed)

    else:
        raise ValueError(f"unknown complexity source {source!r}")

    profile: list[tuple[float, ComplexityEstimate]] = []

    def ratio_at(r: float) -> float:
        est = complexity(r)
        profile.append((r, est))
        return est.value / r

    def satisfied(r: float) -> bool:
        if kind == "s":
            return ratio_at(r) <= r
        return ratio_at(r) <= threshold

    hi = 1.0
    expansions = 0
    while not satisfied(hi):
        hi *= 2.0
        expansions += 1
        if expansions > 60:
            if kind == "r":
                _check_monotone(profile)
                return float("inf")
            raise RuntimeError("no solution found below radius 2^60")
    lo = 0.0
    while hi - lo > tolerance:
        mid = 0.5 * (lo + hi)
        if mid <= 0.0:
            break
        if satisfied(mid):
            hi = mid
        else:
            lo = mid
    _check_monotone(profile)
    return hi if hi > tolerance else 0.0


def _check_monotone(profile) -> None:
    """Verify that the ratio complexity(r)/r is non-increasing in r, up to
    three combined standard errors; otherwise more MC reps are needed."""
    by_radius = sorted(profile, key=lambda item: item[0])
    for (r1, e1), (r2, e2) in zip(by_radius, by_radius[1:]):
        if r1 <= 0 or r2 <= 0:
            continue
        ratio1, ratio2 = e1.value / r1, e2.value / r2
        slack = 3.0 * (e1.stderr / r1 + e2.stderr / r2)
        if ratio2 > ratio1 + slack + 1e-12:
            raise MonotonicityError(
                f"complexity ratio increased from {ratio1:.4g} at r={r1:.4g} to "
                f"{ratio2:.4g} at r={r2:.4g} beyond MC error; increase reps"
            )


def profile_csv_rows(profile) -> str:
    """Serialize (radius, estimate, stderr) triples for plotting."""
    lines = ["r,estimate,stderr"]
    for r, est in profile:
        lines.append(f"{r:.10g},{est.value:.10g},{est.stderr:.10g}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Small-ball probability
# ---------------------------------------------------------------------------


def small_ball_estimate(
    instance: ProblemInstance,
    h,
    alpha1: float,
    reps: int = DEFAULT_REPS,
    seed: int = 0,
) -> ComplexityEstimate:
    """MC estimate of P[ |g h / pi|(X, A) >= alpha1 * ||h||_w ]."""
    h_norm = weighted_norm(instance, h)
    if h_norm == 0.0:
        raise ValueError("small-ball probability undefined for ||h||_w = 0")
    rng = make_generator(mix_seed(seed, "small-ball"))
    x, a = _sample_pairs(instance, reps, rng)
    vals = np.abs(
        np.asarray(instance.weight_fn(x, a), dtype=float)
        * np.asarray(h(x, a), dtype=float)
        / instance.propensity_at(x, a)
    )
    hits = vals >= alpha1 * h_norm
    p = float(np.mean(hits))
    return ComplexityEstimate(p, float(np.sqrt(p * (1 - p) / reps)), reps)


# ---------------------------------------------------------------------------
# Strong-shattering certificates
# ---------------------------------------------------------------------------


@dataclass
class ShatteringCertificate:
    """Points, thresholds and a witness map certifying shattering at a scale.

    In equality mode the witness must hit threshold +/- scale exactly (within
    ``VERIFY_TOL``); in inequality mode it must clear the margins.
    ``witness(pattern)`` maps a +/-1 pattern to parameters; ``evaluate``
    computes the witness function at every stored point.
    """

    points: np.ndarray
    thresholds: np.ndarray
    scale: float
    mode: str
    witness: Callable[[np.ndarray], np.ndarray]
    evaluate: Callable[[np.ndarray, np.ndarray], np.ndarray]
    meta: dict = field(default_factory=dict)

    @property
    def n_points(self) -> int:
        return int(self.points.shape[0])

    def pattern_iter(self, seed: int = 0):
        d = self.n_points
        if d <= EXHAUSTIVE_PATTERN_LIMIT:
            for bits in itertools.product((-1.0, 1.0), repeat=d):
                yield np.array(bits)
        else:
            rng = make_generator(mix_seed(seed, "patterns"))
            for _ in range(RANDOM_PATTERN_COUNT):
                yield rng.integers(0, 2, size=d) * 2.0 - 1.0

    def verify(self, tol: float = VERIFY_TOL, seed: int = 0) -> bool:
        """Check every (or 10^4 random) sign pattern against the witness."""
        for zeta in self.pattern_iter(seed=seed):
            params = self.witness(zeta)
            values = np.asarray(self.evaluate(params, self.points), dtype=float)
            target = self.thresholds + zeta * self.scale
            if self.mode == "equality":
                if np.max(np.abs(values - target)) > tol:
                    return False
            else:
                if np.min(zeta * (values - self.thresholds)) < self.scale - tol:
                    return False
        return True

    def to_csv(self) -> str:
        """One row per shattered point: index, threshold, scale, coordinates."""
        dim = self.points.shape[1]
        lines = ["index,threshold,scale," + ",".join(f"c{j}" for j in range(dim))]
        for i in range(self.n_points):
            coords = ",".join(f"{v:.10g}" for v in self.points[i])
            lines.append(f"{i},{self.thresholds[i]:.10g},{self.scale:.10g},{coords}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class Link:
    """Strictly increasing link with phi(0) = 0 and an explicit inverse."""

    forward: Callable[[np.ndarray], np.ndarray]
    inverse: Callable[[np.ndarray], np.ndarray]
    name: str = "custom"


IDENTITY_LINK = Link(forward=lambda z: z, inverse=lambda z: z, name="identity")


def hadamard_glm_shatter(
    p: int, link: Link = IDENTITY_LINK, amplitude: float = 1.0, radius: float = 1.0
) -> ShatteringCertificate:
    """Equality-shattering certificate for single-index models.

    The points are the (unnormalized) Hadamard basis vectors of dimension p,
    which are orthogonal with squared norm p; the witness for a sign pattern
    places inverse-link values on that basis so the index model interpolates
    +/- amplitude*radius exactly at every point.
    """
    if p < 1 or (p & (p - 1)) != 0:
        raise ValueError("p must be a positive power of two")
    target = amplitude * radius
    inv_vals = np.asarray(link.inverse(np.array([-target, target])), dtype=float)
    if not np.all(np.isfinite(inv_vals)):
        raise ValueError(
            f"link inverse is not defined at +/-{target!r}"
        )
    hadamard = scipy.linalg.hadamard(p).astype(float)
    points = hadamard.T.copy()  # row l is the l-th basis vector

    def witness(zeta: np.ndarray) -> np.ndarray:
        vals = np.asarray(link.inverse(zeta * target), dtype=float)
        return hadamard @ vals / p

    def evaluate(beta: np.ndarray, pts: np.ndarray) -> np.ndarray:
        return np.asarray(link.forward(pts @ beta), dtype=float)

    cert = ShatteringCertificate(
        points=points,
        thresholds=np.zeros(p),
        scale=target,
        mode="equality",
        witness=witness,
        evaluate=evaluate,
        meta={"family": "hadamard-glm", "p": p, "link": link.name,
              "amplitude": amplitude, "radius": radius},
    )
    if not cert.verify():
        raise RuntimeError("hadamard certificate failed self-verification")
    return cert


def sparse_packing_shatter(p: int, s: int) -> ShatteringCertificate:
    """Equality-shattering certificate for s-sparse linear models on R^p.

    Requires p = s * 2^k with k >= 1.  The k*s points are Kronecker products
    of binary-representation rows with block indicators; the witness for any
    binary pattern is s-sparse with sup-norm at most 1 and takes the value
    zeta_{i,j} in {0,1} at point (i,j).  Binary values are recentered to
    thresholds 1/2 at scale 1/2.
    """
    if s < 1 or p < 1 or p % s != 0:
        raise ValueError("p must be a positive multiple of s")
    block = p // s
    k = int(block).bit_length() - 1
    if 2**k != block:
        raise ValueError("p / s must be a power of two")
    if k == 0:
        raise ValueError(
            "s = p gives an empty construction (zero shattered points); "
            "choose s < p with p/s a power of two"
        )
    # column j of bits is the k-bit binary representation of j, MSB first
    bits = np.array(
        [[(j >> (k - 1 - i)) & 1 for j in range(block)] for i in range(k)],
        dtype=float,
    )
    eye_s = np.eye(s)
    points = np.stack(
        [np.kron(bits[i], eye_s[j]) for i in range(k) for j in range(s)]
    )

    def witness(zeta: np.ndarray) -> np.ndarray:
        binary = ((np.asarray(zeta, dtype=float) + 1.0) / 2.0).reshape(k, s)
        beta = np.zeros(p)
        powers = 2 ** np.arange(k - 1, -1, -1, dtype=float)
        for j in range(s):
            col_index = int(np.rint(powers @ binary[:, j]))
            beta += np.kron(np.eye(block)[col_index], eye_s[j])
        return beta

    def evaluate(beta: np.ndarray, pts: np.ndarray) -> np.ndarray:
        return pts @ beta

    cert = ShatteringCertificate(
        points=points,
        thresholds=np.full(k * s, 0.5),
        scale=0.5,
        mode="equality",
        witness=witness,
        evaluate=evaluate,
        meta={"family": "sparse-packing", "p": p, "s": s, "k": k},
    )
    if not cert.verify():
        raise RuntimeError("sparse packing certificate failed self-verification")
    return cert

"""Decorrelation of the smeared slope field in Wasserstein-1 distance.

The joint sample ``(X_0(phi1), X_t(phi2))`` is compared with the product of
its empirical marginals (second coordinate permuted), using an exact
assignment solve for W1.  The comparison target is the Stein-Malliavin
upper bound ``sigma/||phi1|| sqrt(pi/2) E_t[(|phi2'| * |psi1|)(Y)]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from . import field as kf
from .ensemble import (SE_MULTIPLIER, EnsembleAccumulator, EnsembleConfig, EstimateWithError,
                       mean_of, run_ensemble, smeared_pair)
from .gaussian_env import RandomStream, make_stream

MAX_POINTS = 4096
PERMUTATION_STREAM_OFFSET = 1 << 62


@dataclass(frozen=True)
class SamplePairs:
    pairs: np.ndarray
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        p = np.asarray(self.pairs, dtype=float)
        if p.ndim != 2 or p.shape[1] != 2:
            raise ValueError(f"pairs must have shape (n, 2), got {p.shape}")
        object.__setattr__(self, "pairs", p)

    @property
    def n(self) -> int:
        return self.pairs.shape[0]


@dataclass(frozen=True)
class TransportPlan:
    rows: np.ndarray
    cols: np.ndarray
    cost: float


def sample_joint(acc: EnsembleAccumulator, phi1: kf.TestFunction, phi2: kf.TestFunction,
                 scheme: str = "forward") -> SamplePairs:
    """One pair per replica: ``X_0(phi1)`` from the replica's own initial walk."""
    x0, xt = smeared_pair(acc, phi1, phi2, scheme)
    return SamplePairs(np.column_stack([x0, xt]), acc.manifest)


def sample_joint_from_config(config: EnsembleConfig, n: int, phi1_spec: dict, phi2_spec: dict,
                             start: int = 0, workers: int = 1) -> tuple[SamplePairs, EnsembleAccumulator]:
    acc = run_ensemble(config, n, start=start, workers=workers)
    phi1 = kf.from_spec(config.grid, phi1_spec)
    phi2 = kf.from_spec(config.grid, phi2_spec)
    return sample_joint(acc, phi1, phi2), acc


def random_permutation(n: int, stream: RandomStream) -> np.ndarray:
    u, _ = stream.uniforms(n)
    return np.argsort(u, kind="stable")


def product_resample(pairs: SamplePairs, stream: RandomStream | None = None,
                     permutation: np.ndarray | None = None) -> SamplePairs:
    """Empirical product measure: second coordinates shuffled, first kept."""
    if permutation is None:
        if stream is None:
            raise ValueError("need a stream or an explicit permutation")
        permutation = random_permutation(pairs.n, stream)
    out = pairs.pairs.copy()
    out[:, 1] = pairs.pairs[np.asarray(permutation), 1]
    return SamplePairs(out, pairs.manifest)


def optimal_plan(a: SamplePairs, b: SamplePairs) -> TransportPlan:
    if a.n != b.n:
        raise ValueError(f"sample sizes differ: {a.n} vs {b.n}")
    if a.n > MAX_POINTS:
        raise ValueError(f"exact solver is limited to {MAX_POINTS} points, got {a.n}")
    cost = cdist(a.pairs, b.pairs)
    rows, cols = linear_sum_assignment(cost)
    if rows.size != a.n:
        raise RuntimeError("assignment solver returned an incomplete matching")
    return TransportPlan(rows, cols, float(cost[rows, cols].sum() / a.n))


def wasserstein1_empirical(a: SamplePairs, b: SamplePairs) -> float:
    return optimal_plan(a, b).cost


def bound_integrand(phi1: kf.TestFunction, phi2: kf.TestFunction, scheme: str = "forward") -> kf.TestFunction:
    """``(|phi2'| * |psi1|)(u)`` on lattice shifts."""
    return kf.cross_correlate(kf.derivative(phi2, scheme).abs(), kf.primitive(phi1).abs())


def stein_bound_rhs(acc: EnsembleAccumulator, phi1: kf.TestFunction, phi2: kf.TestFunction,
                    scheme: str = "forward") -> EstimateWithError:
    norm = kf.l2_norm(phi1)
    if norm == 0:
        raise ValueError("phi1 must be nonzero")
    c = bound_integrand(phi1, phi2, scheme).values
    q = mean_of(np.sum(acc.probs0 * c, axis=1))
    return (q * (acc.sigma / norm * math.sqrt(math.pi / 2))).estimate()


def check_bound(acc: EnsembleAccumulator, phi1: kf.TestFunction, phi2: kf.TestFunction,
                n_permutations: int = 20, scheme: str = "forward") -> dict:
    """W1(joint, product) against the bound; pass allows 3 SE and the finite-sample bias.

    The bias allowance is the W1 distance between the two halves of one
    product resample: both halves are samples of the same law, so their
    distance measures how far two empirical measures sit apart by chance.
    Halves have n/2 points, which overstates the bias at n points.
    """
    pairs = sample_joint(acc, phi1, phi2, scheme)
    seed = acc.config.seed
    w = []
    first_product = None
    for k in range(n_permutations):
        prod = product_resample(pairs, make_stream(seed, PERMUTATION_STREAM_OFFSET + k))
        if first_product is None:
            first_product = prod
        w.append(wasserstein1_empirical(pairs, prod))
    w = np.asarray(w)
    w_mean = float(w.mean())
    w_se = float(w.std(ddof=1) / math.sqrt(w.size)) if w.size > 1 else 0.0
    half = first_product.n // 2
    bias = wasserstein1_empirical(SamplePairs(first_product.pairs[:half]),
                                  SamplePairs(first_product.pairs[half:2 * half]))
    rhs = stein_bound_rhs(acc, phi1, phi2, scheme)
    slack_se = math.hypot(w_se, rhs.std_error if rhs.has_error else 0.0)
    ok = w_mean <= rhs.value + SE_MULTIPLIER * slack_se + bias
    return {"t": acc.grid.t, "n": pairs.n, "w1": w_mean, "w1_se": w_se, "rhs": rhs.value,
            "rhs_se": rhs.std_error, "bias_allowance": bias, "slack": rhs.value - w_mean,
            "pass": bool(ok)}


def check_stein_characterization(n: int, stream: RandomStream, sigma1: float = 1.0,
                                 c=np.tanh, dependent: bool = False,
                                 x1_free: bool = False) -> EstimateWithError:
    """Monte Carlo mean of the Stein operator applied to ``f(x1, x2) = x1 c(x2)``.

    ``N f = sigma1^2 d_{x1} f - x1 f = sigma1^2 c(x2) - x1^2 c(x2)``.  With
    ``x1_free`` the test function is ``f = c(x2)`` instead, so ``N f = -x1 c(x2)``.
    ``dependent`` sets ``X2 = X1``; otherwise ``X2`` is an independent
    centred exponential-type variable (``g^2 - 1`` for a fresh normal ``g``).
    """
    g, stream = stream.normals(2 * n)
    x1 = sigma1 * g[:n]
    x2 = x1 if dependent else g[n:] ** 2 - 1.0
    cv = c(x2)
    if x1_free:
        values = -x1 * cv
    else:
        values = sigma1 ** 2 * cv - x1 * x1 * cv
    return mean_of(values).estimate()

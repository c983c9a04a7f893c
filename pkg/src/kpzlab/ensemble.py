"""Monte Carlo ensembles over (environment, initial walk) and annealed statistics.

The accumulator keeps per-replica observables in replica-id order.  Every
estimate is a smooth function of replica means, so its standard error comes
from the delta method: each estimator carries a per-replica influence vector
and residuals add influences before the spread is taken.  Same-replica
covariances are therefore kept automatically.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import field as kf
from .gaussian_env import GridSpec, make_manifest, sample_replica
from .polymer import (MASS_LOSS_THRESHOLD, SCHEMES, endpoint_log_rows, evolve_heights,
                      kernel_mass, normalized_mass)

DEFAULT_PROBES = (0, 1, -1, 2, -2, 5, -5, 10, -10, 20, -20)
SE_MULTIPLIER = 3.0


@dataclass(frozen=True)
class EstimateWithError:
    value: float
    std_error: float
    n: int

    @property
    def has_error(self) -> bool:
        return math.isfinite(self.std_error)

    def within(self, k: float = SE_MULTIPLIER, target: float = 0.0) -> bool:
        return self.has_error and abs(self.value - target) <= k * self.std_error

    def to_dict(self) -> dict:
        return {"value": self.value, "std_error": self.std_error, "n": self.n}


class Linearized:
    """Estimate plus per-replica influence values (delta method)."""

    __slots__ = ("value", "influence")

    def __init__(self, value: float, influence: np.ndarray):
        self.value = float(value)
        self.influence = influence

    def __add__(self, other):
        if isinstance(other, Linearized):
            return Linearized(self.value + other.value, self.influence + other.influence)
        return Linearized(self.value + other, self.influence)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Linearized):
            return Linearized(self.value - other.value, self.influence - other.influence)
        return Linearized(self.value - other, self.influence)

    def __rsub__(self, other):
        return Linearized(other - self.value, -self.influence)

    def __mul__(self, c: float):
        return Linearized(self.value * c, self.influence * c)

    __rmul__ = __mul__

    def __truediv__(self, c: float):
        return Linearized(self.value / c, self.influence / c)

    def estimate(self) -> EstimateWithError:
        n = self.influence.shape[0]
        if n < 2:
            return EstimateWithError(self.value, math.nan, n)
        se = float(np.std(self.influence, ddof=1) / math.sqrt(n))
        return EstimateWithError(self.value, se, n)


def mean_of(x: np.ndarray) -> Linearized:
    m = float(np.mean(x))
    return Linearized(m, x - m)


def var_of(x: np.ndarray) -> Linearized:
    m = float(np.mean(x))
    c = x - m
    n = x.shape[0]
    v = float(np.sum(c * c) / (n - 1)) if n > 1 else math.nan
    return Linearized(v, c * c - v)


def ratio(num: Linearized, den: Linearized) -> Linearized:
    r = num.value / den.value
    return Linearized(r, (num.influence - r * den.influence) / den.value)


# --- simulation ------------------------------------------------------------

@dataclass(frozen=True)
class EnsembleConfig:
    grid: GridSpec
    sigma: float
    seed: int
    scheme: str = "exponential"

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be nonnegative, got {self.sigma}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")

    def manifest(self) -> dict:
        return make_manifest(self.seed, self.grid, self.sigma, scheme=self.scheme)


def _block_size(grid: GridSpec) -> int:
    per = max(1, grid.n_steps * grid.size)
    return int(max(1, min(256, 4_000_000 // per)))


def simulate_replicas(config: EnsembleConfig, replica_ids: np.ndarray) -> dict:
    """Per-replica height fields, initial walks and endpoint laws from the origin."""
    grid, sigma = config.grid, config.sigma
    ids = np.asarray(replica_ids, dtype=np.int64)
    out = {
        "replica_ids": ids,
        "h_t": np.empty((ids.size, grid.size)),
        "w": np.empty((ids.size, grid.size)),
        "eta": np.empty((ids.size, grid.n_cells)),
        "probs0": np.empty((ids.size, grid.size)),
    }
    bs = _block_size(grid)
    for start in range(0, ids.size, bs):
        block = ids[start:start + bs]
        xi = np.empty((block.size, grid.n_steps, grid.size))
        for k, rid in enumerate(block):
            env, init = sample_replica(config.seed, int(rid), grid, sigma)
            xi[k] = env.xi
            out["eta"][start + k] = init.eta
            out["w"][start + k] = init.w
        w = out["w"][start:start + block.size]
        h0 = sigma * w
        out["h_t"][start:start + block.size] = evolve_heights(xi, h0, grid, config.scheme)
        rows = endpoint_log_rows(xi, grid, 0, config.scheme)
        out["probs0"][start:start + block.size] = normalized_mass(rows + h0)
    return out


@dataclass
class EnsembleAccumulator:
    config: EnsembleConfig
    replica_ids: np.ndarray
    h_t: np.ndarray
    w: np.ndarray
    eta: np.ndarray
    probs0: np.ndarray
    row_mass_loss: np.ndarray | None = None

    @property
    def grid(self) -> GridSpec:
        return self.config.grid

    @property
    def sigma(self) -> float:
        return self.config.sigma

    @property
    def n_replicas(self) -> int:
        return int(self.replica_ids.size)

    @property
    def h0(self) -> np.ndarray:
        return self.sigma * self.w

    @property
    def manifest(self) -> dict:
        return self.config.manifest()

    def mass_loss(self, sites=None) -> float:
        """Largest noise-free heat-kernel mass loss over ``sites`` (default: origin)."""
        if self.row_mass_loss is None:
            self.row_mass_loss = np.clip(1.0 - kernel_mass(self.grid), 0.0, 1.0)
        sites = (0,) if sites is None else sites
        return float(max(self.row_mass_loss[self.site(y)] for y in sites))

    def flagged(self, sites=None) -> bool:
        return self.mass_loss(sites) > MASS_LOSS_THRESHOLD

    def merge(self, other: "EnsembleAccumulator") -> "EnsembleAccumulator":
        if other.config != self.config:
            raise ValueError("cannot merge accumulators from different configurations")
        if np.intersect1d(self.replica_ids, other.replica_ids).size:
            raise ValueError("accumulators share replica ids")
        ids = np.concatenate([self.replica_ids, other.replica_ids])
        order = np.argsort(ids, kind="stable")

        def cat(a, b):
            return np.concatenate([a, b])[order]

        return EnsembleAccumulator(
            self.config, ids[order], cat(self.h_t, other.h_t), cat(self.w, other.w),
            cat(self.eta, other.eta), cat(self.probs0, other.probs0))

    def site(self, y: int) -> int:
        return self.grid.index(y)


def _simulate_chunk(args):
    config, ids = args
    return simulate_replicas(config, ids)


def run_ensemble(config: EnsembleConfig, n_replicas: int, start: int = 0,
                 workers: int = 1) -> EnsembleAccumulator:
    """Simulate replica ids ``start .. start+n_replicas-1``.

    Results are identical for every ``workers`` value: each replica is a pure
    function of its id, and chunks are reassembled in id order.
    """
    ids = np.arange(start, start + n_replicas, dtype=np.int64)
    if workers <= 1 or n_replicas < 2 * workers:
        parts = [simulate_replicas(config, ids)]
    else:
        chunks = [c for c in np.array_split(ids, workers * 4) if c.size]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_simulate_chunk, [(config, c) for c in chunks]))
    data = {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}
    return EnsembleAccumulator(config, data["replica_ids"], data["h_t"], data["w"],
                               data["eta"], data["probs0"])


# --- estimators ------------------------------------------------------------

def _require(acc: EnsembleAccumulator, n: int) -> None:
    if acc.n_replicas < n:
        raise ValueError(f"need at least {n} replicas, have {acc.n_replicas}")


def _g(acc: EnsembleAccumulator, x: int) -> Linearized:
    return var_of(acc.h_t[:, acc.site(x)])


def _cdf(acc: EnsembleAccumulator, y: int) -> Linearized:
    if y < -acc.grid.half_width:
        return Linearized(0.0, np.zeros(acc.n_replicas))
    y = min(y, acc.grid.half_width)
    cum = np.sum(acc.probs0[:, : acc.site(y) + 1], axis=1)
    return mean_of(cum)


def _quenched_mean(acc: EnsembleAccumulator, values: np.ndarray) -> Linearized:
    return mean_of(np.sum(acc.probs0 * values, axis=1))


def variance_function(acc: EnsembleAccumulator, x_index: int) -> EstimateWithError:
    _require(acc, 2)
    return _g(acc, x_index).estimate()


def endpoint_cdf(acc: EnsembleAccumulator, y_index: int) -> EstimateWithError:
    _require(acc, 1)
    return _cdf(acc, y_index).estimate()


def cdf_symmetry_residual(acc: EnsembleAccumulator, y_index: int) -> EstimateWithError:
    """``P[Y <= -y] - (1 - P[Y <= y-1])``; zero for a reflection-symmetric law."""
    _require(acc, 1)
    return (_cdf(acc, -y_index) - (1.0 - _cdf(acc, y_index - 1))).estimate()


def _decomposition_weights(x: float, positions: np.ndarray) -> np.ndarray:
    if x >= 0:
        return np.maximum(np.minimum(x, x + positions), 0.0)
    return np.maximum(-np.maximum(x, x + positions), 0.0)


def g_function_decomposition(acc: EnsembleAccumulator, x_index: int) -> EstimateWithError:
    """``g(x) - [g(0) - sigma^2 |x| + 2 sigma^2 G(x)]`` with ``G`` from the origin's law."""
    _require(acc, 2)
    s2 = acc.sigma ** 2
    x = x_index * acc.grid.dx
    if x_index == 0:
        return EstimateWithError(0.0, 0.0, acc.n_replicas)
    G = _quenched_mean(acc, _decomposition_weights(x, acc.grid.positions))
    r = _g(acc, x_index) - (_g(acc, 0) - s2 * abs(x) + 2 * s2 * G)
    return r.estimate()


def slope_cdf_residual(acc: EnsembleAccumulator, y_index: int) -> EstimateWithError:
    """Forward difference of ``g`` against ``sigma^2 (2 P[Y <= y] - 1)``."""
    _require(acc, 2)
    if y_index + 1 > acc.grid.half_width:
        raise ValueError(f"probe {y_index} needs site {y_index + 1} inside the lattice")
    dg = (_g(acc, y_index + 1) - _g(acc, y_index)) / acc.grid.dx
    r = dg - acc.sigma ** 2 * (2.0 * _cdf(acc, y_index) - 1.0)
    return r.estimate()


def smeared_pair(acc: EnsembleAccumulator, phi1: kf.TestFunction, phi2: kf.TestFunction,
                 scheme: str = "forward") -> tuple[np.ndarray, np.ndarray]:
    """Per-replica ``(X_0(phi1), X_t(phi2))``; ``X_0`` is the exact Wiener sum."""
    x0 = acc.sigma * kf.wiener_integral(acc.eta, phi1)
    xt = kf.smeared_slope(acc.h_t, phi2, scheme)
    return np.atleast_1d(x0), np.atleast_1d(xt)


def two_point(acc: EnsembleAccumulator, phi1: kf.TestFunction, phi2: kf.TestFunction,
              scheme: str = "forward") -> tuple[EstimateWithError, EstimateWithError, EstimateWithError]:
    """``E[X_t(phi2) X_0(phi1)]`` and ``sigma^2 E_t[(phi2 * phi1)(Y)]``, plus their difference."""
    _require(acc, 1)
    x0, xt = smeared_pair(acc, phi1, phi2, scheme)
    lhs = mean_of(xt * x0)
    rhs = acc.sigma ** 2 * _quenched_mean(acc, kf.cross_correlate(phi2, phi1).values)
    return lhs.estimate(), rhs.estimate(), (lhs - rhs).estimate()


def mean_abs_endpoint(acc: EnsembleAccumulator) -> EstimateWithError:
    return _quenched_mean(acc, np.abs(acc.grid.positions)).estimate()


def stationary_checks(acc: EnsembleAccumulator, probe_x: tuple[int, ...] | None = None) -> dict:
    """Continuum stationarity diagnostics for ``sigma = 1``."""
    if acc.sigma != 1.0:
        raise ValueError("stationarity checks apply to sigma = 1 only")
    _require(acc, 2)
    dx = acc.grid.dx
    if probe_x is None:
        k = int(round(0.5 / dx))
        probe_x = (-k, k)
    ratios = {}
    h0col = acc.h_t[:, acc.site(0)]
    for x in probe_x:
        inc = var_of(acc.h_t[:, acc.site(x)] - h0col)
        ratios[x] = (inc / (abs(x) * dx)).estimate()
    g0 = _g(acc, 0)
    ey = _quenched_mean(acc, np.abs(acc.grid.positions))
    rel = ratio(ey - g0, g0)
    return {
        "increment_variance_ratio": ratios,
        "mean_abs_endpoint": ey.estimate(),
        "g0": g0.estimate(),
        "relative_gap": rel.estimate(),
    }


def _smoothed_second_difference_weights(halfwidth: int, dx: float) -> np.ndarray:
    box_ = np.full(2 * halfwidth + 1, 1.0 / (2 * halfwidth + 1))
    return np.convolve(box_, np.array([1.0, -2.0, 1.0])) / dx ** 2


def _second_difference(acc: EnsembleAccumulator, y: int, halfwidth: int,
                       column=None) -> Linearized:
    L = acc.grid.half_width
    reach = halfwidth + 1
    if halfwidth < 0 or abs(y) + reach > L:
        raise ValueError(f"smoothing halfwidth {halfwidth} at y={y} exceeds the lattice")
    c = _smoothed_second_difference_weights(halfwidth, acc.grid.dx)
    total = Linearized(0.0, np.zeros(acc.n_replicas))
    for k, ck in zip(range(-reach, reach + 1), c):
        total = total + ck * (_g(acc, y + k) if column is None else column(y + k))
    return total


def second_derivative(acc: EnsembleAccumulator, y_index: int,
                      smoothing_halfwidth: int = 2) -> EstimateWithError:
    """Second lattice difference of the moving-average-smoothed ``g``."""
    _require(acc, 2)
    return _second_difference(acc, y_index, smoothing_halfwidth).estimate()


def second_derivative_mass(acc: EnsembleAccumulator, smoothing_halfwidth: int = 2,
                           reach: int | None = None) -> EstimateWithError:
    """``sum_y g''(y) dx`` over ``|y| <= reach``; ``2 sigma^2`` once the CDF spans [0, 1].

    The default reach stays in the inner half of the lattice: near the
    Dirichlet edge the heights lose mass and the variance slope bends.
    """
    _require(acc, 2)
    if reach is None:
        reach = acc.grid.half_width // 2 - smoothing_halfwidth - 1
    total = Linearized(0.0, np.zeros(acc.n_replicas))
    for y in range(-reach, reach + 1):
        total = total + _second_difference(acc, y, smoothing_halfwidth)
    return (total * acc.grid.dx).estimate()


def annealed_density(acc: EnsembleAccumulator, y_index: int, smoothing_halfwidth: int = 0) -> EstimateWithError:
    """Annealed endpoint mass per unit length at ``y``, moving-average smoothed."""
    _require(acc, 1)
    return _density(acc, y_index, smoothing_halfwidth).estimate()


def _density(acc: EnsembleAccumulator, y: int, halfwidth: int) -> Linearized:
    lo, hi = acc.site(y - halfwidth), acc.site(y + halfwidth)
    col = np.mean(acc.probs0[:, lo:hi + 1], axis=1) / acc.grid.dx
    return mean_of(col)


def flat_limit_check(runs: dict[float, EnsembleAccumulator], flat: EnsembleAccumulator,
                     probes: tuple[int, ...], smoothing_halfwidth: int = 2,
                     tolerance: float = 0.05) -> dict:
    """Compare ``g''/(2 sigma^2)`` for each ``sigma`` with the direct flat density.

    ``runs`` maps sigma to an accumulator; all of them and ``flat`` (sigma = 0)
    must share seed, grid and replica ids, so environments coincide (common
    random numbers).  Writing ``h^sigma = h^0 + d``, translation invariance
    makes ``Var h^0`` and ``Cov(d, h^0)`` constant in space, so ``g''`` equals
    the second difference of ``Var d``; that estimator is used for the check.
    The plain second difference of ``Var h^sigma`` is reported alongside.
    """
    rows = []
    for sigma in sorted(runs, reverse=True):
        acc = runs[sigma]
        if acc.n_replicas != flat.n_replicas or not np.array_equal(acc.replica_ids, flat.replica_ids):
            raise ValueError("flat-limit runs must share replica ids")
        if acc.config.seed != flat.config.seed or acc.grid != flat.grid:
            raise ValueError("flat-limit runs must share seed and grid")
        if sigma <= 0:
            raise ValueError("flat-limit sigmas must be positive")
        s2 = 2 * sigma ** 2
        d = acc.h_t - flat.h_t

        def dcol(y, d=d, acc=acc):
            return var_of(d[:, acc.site(y)])

        worst = None
        per_probe = []
        for y in probes:
            crn = _second_difference(acc, y, smoothing_halfwidth, column=dcol) / s2
            plain = _second_difference(acc, y, smoothing_halfwidth) / s2
            direct = _density(flat, y, smoothing_halfwidth)
            diff = (crn - direct).estimate()
            per_probe.append({"y": y, "g2_density": crn.estimate().to_dict(),
                              "g2_density_plain": plain.estimate().to_dict(),
                              "direct_density": direct.estimate().to_dict(),
                              "difference": diff.to_dict()})
            if worst is None or abs(diff.value) > abs(worst.value):
                worst = diff
        rows.append({"sigma": sigma, "sup_norm": abs(worst.value), "sup_norm_se": worst.std_error,
                     "probes": per_probe})
    monotone = True
    for a, b in zip(rows, rows[1:]):
        slack = SE_MULTIPLIER * math.hypot(a["sup_norm_se"], b["sup_norm_se"])
        if b["sup_norm"] > a["sup_norm"] + slack:
            monotone = False
    final_ok = bool(rows) and rows[-1]["sup_norm"] <= tolerance
    flat_mass = float(np.max(np.abs(np.sum(flat.probs0, axis=1) - 1.0)))
    return {"rows": rows, "monotone_within_se": monotone, "final_within_tolerance": final_ok,
            "tolerance": tolerance, "flat_mass_error": flat_mass,
            "smoothing_halfwidth": smoothing_halfwidth,
            "pass": bool(monotone and final_ok)}

"""Exact small-system checks by tensor Gauss-Hermite quadrature.

A tiny lattice has only a handful of Gaussian coordinates (noise cells plus
initial increments), so annealed expectations can be computed to quadrature
precision.  The Gaussian integration-by-parts identity ``E[g(G) G_i] =
E[d_i g(G)]`` is exact in finite dimensions, which makes every identity
checked here hold to rounding error once the quadrature has converged.

Identities that rely on shift invariance (the derivative of the variance
function, the two-point formula) are evaluated only at sites whose polymer
light cone stays clear of the truncation, ``|x| + N <= L``.  Inside that
window the lattice is indistinguishable from an infinite one.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from . import field as kf
from .gaussian_env import (Environment, GridSpec, InitialCondition, TruncationWarning, make_stream,
                           sample_replica, walk_from_increments)
from .polymer import (endpoint_log_rows, evolve_green, evolve_heights, expected_signed_indicator,
                      height_gradient, normalized_mass, quenched_density)

MAX_DIM = 8
DEFAULT_ORDERS = (8, 12, 16, 20)
EXACT_TOL = 1e-8


class OracleError(RuntimeError):
    pass


@dataclass(frozen=True)
class QuadratureRule:
    """Gauss-Hermite rule for the standard normal weight."""

    order: int
    nodes: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)

    @classmethod
    def gauss_hermite(cls, order: int) -> "QuadratureRule":
        if order < 1:
            raise ValueError("quadrature order must be positive")
        x, w = hermegauss(order)
        return cls(order, x, w / math.sqrt(2 * math.pi))


@dataclass(frozen=True)
class TinySystem:
    """Small lattice whose Gaussian coordinates are integrated exactly.

    ``env_period=None`` draws independent noise on every space-time cell.
    ``env_period=P`` repeats ``P`` noise values periodically in space (a
    shift-invariant environment law with fewer coordinates).
    """

    grid: GridSpec
    sigma: float = 1.0
    scheme: str = "exponential"
    env_period: int | None = None

    def __post_init__(self):
        if self.dim > MAX_DIM:
            raise OracleError(f"tiny system has {self.dim} Gaussian coordinates; the cap is {MAX_DIM}")

    @property
    def env_width(self) -> int:
        return self.grid.size if self.env_period is None else self.env_period

    @property
    def env_dim(self) -> int:
        return self.grid.n_steps * self.env_width

    @property
    def dim(self) -> int:
        return self.env_dim + self.grid.n_cells

    @property
    def dim_labels(self) -> list[str]:
        labels = [f"xi[{n},{j}]" for n in range(self.grid.n_steps) for j in range(self.env_width)]
        return labels + [f"eta[{u}]" for u in self.grid.cells]

    def window(self) -> tuple[int, int]:
        """Sites whose polymer cannot reach the truncated boundary."""
        L, N = self.grid.half_width, self.grid.n_steps
        return -(L - N), L - N

    def split(self, g: np.ndarray) -> tuple[np.ndarray | None, np.ndarray]:
        """Gaussian vectors ``(B, d)`` -> noise ``(B, N, 2L+1)`` and increments ``(B, 2L)``."""
        grid = self.grid
        b = g.shape[0]
        env = g[:, : self.env_dim].reshape(b, grid.n_steps, self.env_width)
        if self.env_period is not None:
            # site j reuses coordinate j mod P
            env = env[:, :, grid.sites % self.env_period]
        return env, g[:, self.env_dim:]

    def realize(self, g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        xi, eta = self.split(g)
        return xi, eta, walk_from_increments(eta, self.grid.dx)

    def heights(self, g: np.ndarray) -> np.ndarray:
        xi, _, w = self.realize(g)
        return evolve_heights(xi, self.sigma * w, self.grid, self.scheme)

    def endpoint(self, g: np.ndarray, x_index: int = 0) -> np.ndarray:
        xi, _, w = self.realize(g)
        rows = endpoint_log_rows(xi, self.grid, x_index, self.scheme)
        return normalized_mass(rows + self.sigma * w)

    def gradient(self, g: np.ndarray, x_index: int) -> np.ndarray:
        """Analytic ``dh_t(x)/d eta_u`` for all cells, shape ``(B, 2L)``."""
        probs = self.endpoint(g, x_index)
        return self.sigma * math.sqrt(self.grid.dx) * expected_signed_indicator(probs)


def default_system(scheme: str = "exponential", sigma: float = 1.0) -> TinySystem:
    """L=1, N=1, dx=1, dt=1/2: three noise cells and two increments (d=5)."""
    return TinySystem(_tiny_grid(1, 1), sigma, scheme)


def shift_system(scheme: str = "exponential", sigma: float = 1.0) -> TinySystem:
    """L=2, N=1 with a spatially constant noise layer (d=5); window is ``[-1, 1]``."""
    return TinySystem(_tiny_grid(2, 1), sigma, scheme, env_period=1)


def _tiny_grid(half_width: int, n_steps: int, dx: float = 1.0, dt: float = 0.5) -> GridSpec:
    # tiny lattices are narrow on purpose
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TruncationWarning)
        return GridSpec(dx=dx, dt=dt, half_width=half_width, n_steps=n_steps)


def quad_expectation(sys: TinySystem, rule: QuadratureRule,
                     F: Callable[[np.ndarray], np.ndarray], chunk: int = 1 << 16) -> np.ndarray | float:
    """Tensor-product quadrature of ``E[F(G)]`` for ``G ~ N(0, I_d)``.

    ``F`` maps a ``(B, d)`` block of nodes to ``(B,)`` or ``(B, k)`` values.
    Blocks are reduced in node-index order.
    """
    d, m = sys.dim, rule.order
    total_nodes = m ** d
    acc = None
    for start in range(0, total_nodes, chunk):
        idx = np.arange(start, min(start + chunk, total_nodes))
        digits = np.unravel_index(idx, (m,) * d) if d else ()
        g = np.stack([rule.nodes[k] for k in digits], axis=1) if d else np.zeros((idx.size, 0))
        w = np.prod(np.stack([rule.weights[k] for k in digits], axis=1), axis=1) if d else np.ones(idx.size)
        vals = np.asarray(F(g), dtype=float)
        if not np.all(np.isfinite(vals)):
            raise OracleError("functional is not finite at a quadrature node")
        part = np.tensordot(w, vals, axes=(0, 0)) if vals.ndim > 1 else float(np.dot(w, vals))
        acc = part if acc is None else acc + part
    return acc


def check_integration_by_parts(sys: TinySystem, rule: QuadratureRule,
                               phi: kf.TestFunction | None = None, x_index: int = 0,
                               corrupt: float = 0.0) -> dict:
    """``E[h_t(x) * int phi dW]`` against ``E[<Dh_t(x), phi>]``."""
    grid = sys.grid
    if phi is None:
        phi = default_ibp_function(grid)
    weights = phi.cell_weights()
    root = math.sqrt(grid.dx)
    xi_ = grid.index(x_index)

    def F(g):
        _, eta = sys.split(g)
        h = sys.heights(g)[:, xi_]
        grad = sys.gradient(g, x_index) * (1.0 + corrupt)
        lhs = h * root * (eta @ weights)
        rhs = root * (grad @ weights)
        return np.stack([lhs, rhs], axis=1)

    lhs, rhs = quad_expectation(sys, rule, F)
    return {"check": "integration_by_parts", "lhs": float(lhs), "rhs": float(rhs),
            "residual": abs(float(lhs - rhs)), "x_index": x_index}


def default_ibp_function(grid: GridSpec) -> kf.TestFunction:
    v = np.zeros(grid.size)
    v[1:] = 1.0 + 0.5 * grid.cells
    return kf.TestFunction(v, grid)


def _cells_in_window(sys: TinySystem) -> list[int]:
    lo, hi = sys.window()
    return [y for y in range(lo, hi)]


def check_slope_cdf_exact(sys: TinySystem, rule: QuadratureRule) -> dict:
    """Forward difference of the variance function against ``sigma^2 (2 CDF - 1)``."""
    grid = sys.grid
    M = grid.size

    def F(g):
        h = sys.heights(g)
        cdf = np.cumsum(sys.endpoint(g, 0), axis=1)
        return np.concatenate([h, h * h, cdf], axis=1)

    out = quad_expectation(sys, rule, F)
    mean, second, cdf = out[:M], out[M:2 * M], out[2 * M:]
    g = second - mean * mean
    rows = []
    for y in _cells_in_window(sys):
        i = grid.index(y)
        dg = (g[i + 1] - g[i]) / grid.dx
        rhs = sys.sigma ** 2 * (2 * cdf[i] - 1)
        rows.append({"y": y, "dg": float(dg), "rhs": float(rhs), "residual": abs(float(dg - rhs))})
    if not rows:
        raise OracleError("no cell of the tiny system is clear of the truncation")
    return {"check": "slope_cdf", "cells": rows, "residual": max(r["residual"] for r in rows)}


def check_cdf_symmetry_exact(sys: TinySystem, rule: QuadratureRule) -> dict:
    """``max_y |P[Y <= -y] - (1 - P[Y <= y-1])|`` for the endpoint from the origin."""
    grid = sys.grid
    cdf = quad_expectation(sys, rule, lambda g: np.cumsum(sys.endpoint(g, 0), axis=1))

    def P(y):
        if y < -grid.half_width:
            return 0.0
        return float(cdf[grid.index(min(y, grid.half_width))])

    res = [abs(P(-y) - (1.0 - P(y - 1))) for y in range(-grid.half_width, grid.half_width + 1)]
    return {"check": "cdf_symmetry", "residual": max(res)}


def check_two_point_exact(sys: TinySystem, rule: QuadratureRule,
                      phi1: kf.TestFunction | None = None,
                      phi2: kf.TestFunction | None = None) -> dict:
    """``E[X_t(phi2) X_0(phi1)]`` against ``sigma^2 E_t[(phi2 * phi1)(Y)]``.

    ``X_t`` uses the forward difference, the exact summation-by-parts partner
    of the cell convention behind ``X_0`` and the primitive.
    """
    grid = sys.grid
    if phi1 is None or phi2 is None:
        phi1, phi2 = default_two_point_functions(grid)
    dphi = kf.derivative(phi2, "forward")
    lo, hi = sys.window()
    if dphi.support is not None and (dphi.support[0] < lo or dphi.support[1] > hi):
        raise kf.MarginError(f"X_t(phi2) needs heights on {dphi.support}, outside the exact window {lo, hi}")
    corr = kf.cross_correlate(phi2, phi1).values

    def F(g):
        _, eta = sys.split(g)
        h = sys.heights(g)
        x0 = sys.sigma * kf.wiener_integral(eta, phi1)
        xt = kf.smeared_slope(h, phi2, "forward")
        rhs = sys.sigma ** 2 * (sys.endpoint(g, 0) @ corr)
        return np.stack([xt * x0, rhs], axis=1)

    lhs, rhs = quad_expectation(sys, rule, F)
    return {"check": "two_point", "lhs": float(lhs), "rhs": float(rhs), "residual": abs(float(lhs - rhs))}


def default_two_point_functions(grid: GridSpec) -> tuple[kf.TestFunction, kf.TestFunction]:
    """``phi1`` on cells 0 and 1, ``phi2`` a spike at the origin."""
    v1 = np.zeros(grid.size)
    v1[grid.index(0)] = 0.6
    v1[grid.index(1)] = 1.0
    v2 = np.zeros(grid.size)
    v2[grid.index(0)] = 1.0
    return kf.TestFunction(v1, grid), kf.TestFunction(v2, grid)


def derivative_residuals(grid: GridSpec, sigma: float, xi: np.ndarray | None, eta: np.ndarray,
                         scheme: str = "exponential", step: float = 1e-5,
                         floor: float | None = None, corrupt: float = 0.0) -> float:
    """Max relative gap between analytic ``dh_t(x)/d eta_u`` and a central difference.

    The analytic side runs the log-domain Green matrix and the quenched laws;
    the finite difference reruns the forward height evolution with each
    increment nudged by ``+-step``.  The relative error is taken against
    ``max(|analytic|, floor)`` with ``floor = 1e-2 * sigma * sqrt(dx)``, since
    cells far from the polymer have derivatives far below the rounding level
    of the difference quotient.
    """
    if floor is None:
        floor = 1e-2 * max(sigma, 1e-300) * math.sqrt(grid.dx)
    env = None if xi is None else Environment(xi)
    init = InitialCondition.from_increments(grid, sigma, eta)
    green = evolve_green(env, grid, scheme)
    analytic = np.stack([height_gradient(quenched_density(green, init, x), sigma)
                         for x in grid.sites])  # (sites, cells)
    analytic = analytic * (1.0 + corrupt)
    n_cells = grid.n_cells
    bumps = np.concatenate([np.eye(n_cells), -np.eye(n_cells)]) * step
    walks = walk_from_increments(eta[None, :] + bumps, grid.dx)
    xi_b = None if xi is None else np.broadcast_to(xi, (2 * n_cells,) + xi.shape)
    h = evolve_heights(xi_b, sigma * walks, grid, scheme)
    fd = (h[:n_cells] - h[n_cells:]).T / (2 * step)  # (sites, cells)
    return float(np.max(np.abs(analytic - fd) / np.maximum(np.abs(analytic), floor)))


def check_derivative_formula(sys: TinySystem, n_points: int = 100, seed: int = 0,
                             step: float = 1e-5, corrupt: float = 0.0) -> dict:
    """Analytic Malliavin derivative against finite differences at random points."""
    worst = 0.0
    for k in range(n_points):
        g, _ = make_stream(seed, k).normals(sys.dim)
        xi, eta = sys.split(g[None, :])
        worst = max(worst, derivative_residuals(sys.grid, sys.sigma, xi[0], eta[0], sys.scheme,
                                                step, corrupt=corrupt))
    return {"check": "derivative_formula", "residual": worst, "n_points": n_points, "step": step}


def check_derivative_on_grid(grid: GridSpec, sigma: float = 1.0, n_points: int = 100, seed: int = 0,
                             scheme: str = "exponential", step: float = 1e-5) -> dict:
    """Same comparison on a full-size grid, one sampled replica per point."""
    worst = 0.0
    for k in range(n_points):
        env, init = sample_replica(seed, k, grid, sigma)
        worst = max(worst, derivative_residuals(grid, sigma, env.xi, init.eta, scheme, step))
    return {"check": "derivative_formula", "residual": worst, "n_points": n_points, "step": step,
            "half_width": grid.half_width, "n_steps": grid.n_steps}


def run_all(orders=DEFAULT_ORDERS, schemes=("exponential", "clipped_euler"),
            tol: float = EXACT_TOL, corrupt: float = 0.0, sigma: float = 1.0,
            derivative_points: int = 100) -> dict:
    """Every oracle check at every order; pass flags judged at the highest order."""
    results = []
    top = max(orders)
    for scheme in schemes:
        base, shifted = default_system(scheme, sigma), shift_system(scheme, sigma)
        for m in orders:
            rule = QuadratureRule.gauss_hermite(m)
            for name, fn, sys in (
                ("integration_by_parts", lambda s, r: check_integration_by_parts(s, r, corrupt=corrupt), base),
                ("slope_cdf", check_slope_cdf_exact, shifted),
                ("two_point", check_two_point_exact, shifted),
                ("cdf_symmetry", check_cdf_symmetry_exact, base),
            ):
                t0 = time.perf_counter()
                res = fn(sys, rule)
                res.update({"scheme": scheme, "order": m, "nodes": m ** sys.dim, "dim": sys.dim,
                            "wall_time": time.perf_counter() - t0})
                res["pass"] = bool(res["residual"] <= tol) if m == top else None
                results.append(res)
        t0 = time.perf_counter()
        res = check_derivative_formula(base, n_points=derivative_points, corrupt=corrupt)
        res.update({"scheme": scheme, "order": None, "nodes": None, "dim": base.dim,
                    "wall_time": time.perf_counter() - t0, "tolerance": 1e-6})
        res["pass"] = bool(res["residual"] <= 1e-6)
        results.append(res)
    ok = all(r["pass"] for r in results if r["pass"] is not None)
    return {"checks": results, "tolerance": tol, "orders": list(orders), "pass": ok}

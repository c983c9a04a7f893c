"""Transfer-matrix evolution of the discrete stochastic heat equation.

One time step applies the nearest-neighbour heat kernel ``K`` (side weight
``dt/(2dx^2)``, centre weight ``1 - dt/dx^2``) and then multiplies every site
by a positive noise factor.  Starting from ``Z_0(x, y) = delta_xy / dx`` the
Green matrix after ``N`` steps is ``F_{N-1} K ... F_0 K / dx``.

Two arithmetic paths are provided:

* log-domain with max-shifted log-sum-exp (``evolve_green``, ``green_row``);
* max-rescaled linear arithmetic on stacks of replicas (``evolve_heights``,
  ``endpoint_log_rows``), which carries the running log scale separately.

Both are elementwise along the replica axis, so a replica's result does not
depend on which other replicas share its batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .gaussian_env import Environment, GridSpec, InitialCondition

MASS_LOSS_THRESHOLD = 1e-6
CLIP_FLOOR = 1e-8
SCHEMES = ("exponential", "clipped_euler")


def log_noise_factor(xi: np.ndarray, grid: GridSpec, scheme: str = "exponential") -> np.ndarray:
    """Log of the multiplicative noise factor applied after each heat step."""
    a = math.sqrt(grid.dt / grid.dx)
    if scheme == "exponential":
        return a * xi - grid.dt / (2 * grid.dx)
    if scheme == "clipped_euler":
        return np.log(np.maximum(1.0 + a * xi, CLIP_FLOOR))
    raise ValueError(f"unknown environment scheme {scheme!r}")


def logsumexp3(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    m = np.maximum(np.maximum(a, b), c)
    finite = np.isfinite(m)
    shift = np.where(finite, m, 0.0)
    with np.errstate(under="ignore"):
        s = np.exp(a - shift) + np.exp(b - shift) + np.exp(c - shift)
    with np.errstate(divide="ignore"):
        return np.where(finite, shift + np.log(s), -np.inf)


def logsumexp(a: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    shift = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(under="ignore", divide="ignore"):
        out = np.log(np.sum(np.exp(a - shift), axis=axis, keepdims=True)) + shift
    return np.squeeze(out, axis=axis)


def _log_heat_step(a: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Apply the Dirichlet heat kernel along axis 0 of a log-domain array."""
    with np.errstate(divide="ignore"):
        ls, lc = math.log(grid.p_side), (math.log(grid.p_center) if grid.p_center > 0 else -math.inf)
    pad = np.full((1,) + a.shape[1:], -np.inf)
    left = np.concatenate([pad, a[:-1]], axis=0)
    right = np.concatenate([a[1:], pad], axis=0)
    return logsumexp3(ls + left, lc + a, ls + right)


def heat_step(z: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Linear Dirichlet heat kernel along the last axis."""
    out = grid.p_center * z
    out[..., 1:] += grid.p_side * z[..., :-1]
    out[..., :-1] += grid.p_side * z[..., 1:]
    return out


def kernel_mass(grid: GridSpec, n_steps: int | None = None) -> np.ndarray:
    """Row sums of ``K^N`` (surviving heat-kernel mass from each site)."""
    v = np.ones(grid.size)
    for _ in range(grid.n_steps if n_steps is None else n_steps):
        v = heat_step(v, grid)
    return v


@dataclass(frozen=True)
class GreenMatrix:
    """``log_z[i, j] = log Z_N(x_i, y_j)``; entries outside the light cone are -inf."""

    log_z: np.ndarray
    grid: GridSpec
    mass_loss: np.ndarray
    scheme: str = "exponential"

    @property
    def flagged(self) -> bool:
        return bool(np.max(self.mass_loss) > MASS_LOSS_THRESHOLD)


@dataclass(frozen=True)
class HeightField:
    h: np.ndarray
    grid: GridSpec

    def at(self, site: int) -> float:
        return float(self.h[self.grid.index(site)])


@dataclass(frozen=True)
class QuenchedEndpoint:
    x_index: int
    probs: np.ndarray
    t: float
    grid: GridSpec


def _check_env(env: Environment | None, grid: GridSpec) -> None:
    if env is not None and env.xi.shape != (grid.n_steps, grid.size):
        raise ValueError(f"environment shape {env.xi.shape} does not match grid "
                         f"({grid.n_steps}, {grid.size})")


def evolve_green(env: Environment | None, grid: GridSpec, scheme: str = "exponential") -> GreenMatrix:
    """Full Green matrix in the log domain.

    ``env=None`` gives the noise-free heat kernel (no multiplicative factor).
    """
    _check_env(env, grid)
    log_z = np.full((grid.size, grid.size), -np.inf)
    np.fill_diagonal(log_z, -math.log(grid.dx))
    for n in range(grid.n_steps):
        log_z = _log_heat_step(log_z, grid)
        if env is not None:
            log_z = log_z + log_noise_factor(env.xi[n], grid, scheme)[:, None]
    mass_loss = np.clip(1.0 - kernel_mass(grid), 0.0, 1.0)
    return GreenMatrix(log_z, grid, mass_loss, scheme)


def green_row(env: Environment | None, grid: GridSpec, x_index: int,
              scheme: str = "exponential") -> np.ndarray:
    """Row ``x_index`` of the log Green matrix by the adjoint recursion, O(N*L)."""
    _check_env(env, grid)
    r = np.full(grid.size, -np.inf)
    r[grid.index(x_index)] = 0.0
    for n in range(grid.n_steps - 1, -1, -1):
        if env is not None:
            r = r + log_noise_factor(env.xi[n], grid, scheme)
        r = _log_heat_step(r, grid)
    return r - math.log(grid.dx)


def partition_function(green: GreenMatrix, init: InitialCondition, x_index: int) -> float:
    """``log Z_t(x) = log sum_j Z(x, y_j) exp(sigma w_j) dx``."""
    row = green.log_z[green.grid.index(x_index)]
    return float(logsumexp(row + init.sigma * init.w) + math.log(green.grid.dx))


def height_field(green: GreenMatrix, init: InitialCondition) -> HeightField:
    terms = green.log_z + (init.sigma * init.w)[None, :]
    return HeightField(logsumexp(terms, axis=1) + math.log(green.grid.dx), green.grid)


def quenched_density(green: GreenMatrix, init: InitialCondition, x_index: int) -> QuenchedEndpoint:
    grid = green.grid
    row = green.log_z[grid.index(x_index)] + init.sigma * init.w
    return QuenchedEndpoint(x_index, normalized_mass(row), grid.t, grid)


def normalized_mass(log_weights: np.ndarray) -> np.ndarray:
    """Probability mass proportional to ``exp(log_weights)`` along the last axis."""
    m = np.max(log_weights, axis=-1, keepdims=True)
    with np.errstate(under="ignore"):
        p = np.exp(log_weights - m)
    return p / np.sum(p, axis=-1, keepdims=True)


def quenched_expectation(qe: QuenchedEndpoint, f: Callable[[np.ndarray], np.ndarray] | np.ndarray) -> float:
    """``E_{x,t}[f(Y)]``; ``f`` is a callable on positions or an array of site values."""
    values = f(qe.grid.positions) if callable(f) else np.asarray(f, dtype=float)
    values = np.broadcast_to(values, qe.probs.shape)
    return float(np.sum(values * qe.probs))


def expected_signed_indicator(probs: np.ndarray) -> np.ndarray:
    """``E[1_Y(u)]`` for every cell ``u = -L+1..L`` (last axis of ``probs`` is sites).

    For ``u >= 1`` this is ``P(Y >= u)``; for ``u <= 0`` it is ``-P(Y <= u-1)``.
    """
    n_sites = probs.shape[-1]
    half = n_sites // 2
    tail = np.cumsum(probs[..., ::-1], axis=-1)[..., ::-1]
    head = np.cumsum(probs, axis=-1)
    # cells u=-L+1..0 use head at site u-1 (array idx 0..L-1);
    # cells u=1..L use tail at site u (array idx L+1..2L)
    return np.concatenate([-head[..., :half], tail[..., half + 1:]], axis=-1)


def height_gradient(qe: QuenchedEndpoint, sigma: float) -> np.ndarray:
    """``dh_t(x)/d eta_u`` for every cell, from the quenched endpoint law."""
    return sigma * math.sqrt(qe.grid.dx) * expected_signed_indicator(qe.probs)


def malliavin_derivative_height(qe: QuenchedEndpoint, sigma: float, u: int) -> float:
    return float(height_gradient(qe, sigma)[qe.grid.cell_index(u)])


# --- stacked-replica paths -------------------------------------------------

def evolve_heights(xi: np.ndarray | None, h0: np.ndarray, grid: GridSpec,
                   scheme: str = "exponential") -> np.ndarray:
    """Evolve ``Z_0 = exp(h0)`` forward; returns ``h_t`` with the shape of ``h0``.

    ``xi`` has shape ``h0.shape[:-1] + (N, 2L+1)`` or is ``None`` (noise-free).
    """
    h0 = np.asarray(h0, dtype=float)
    scale = np.max(h0, axis=-1, keepdims=True)
    z = np.exp(h0 - scale)
    for n in range(grid.n_steps):
        z = heat_step(z, grid)
        if xi is not None:
            z *= np.exp(log_noise_factor(xi[..., n, :], grid, scheme))
        m = np.max(z, axis=-1, keepdims=True)
        z /= m
        scale = scale + np.log(m)
    with np.errstate(divide="ignore"):
        return np.log(z) + scale


def endpoint_log_rows(xi: np.ndarray | None, grid: GridSpec, x_index: int,
                      scheme: str = "exponential", batch_shape: tuple = ()) -> np.ndarray:
    """Log Green-matrix row ``x_index`` for a stack of environments.

    Returns an array of shape ``batch_shape + (2L+1,)`` (batch shape taken from
    ``xi`` when given).
    """
    if xi is not None:
        batch_shape = xi.shape[:-2]
    r = np.zeros(tuple(batch_shape) + (grid.size,))
    r[..., grid.index(x_index)] = 1.0
    scale = np.zeros(tuple(batch_shape) + (1,))
    for n in range(grid.n_steps - 1, -1, -1):
        if xi is not None:
            r = r * np.exp(log_noise_factor(xi[..., n, :], grid, scheme))
        r = heat_step(r, grid)
        m = np.max(r, axis=-1, keepdims=True)
        r /= m
        scale = scale + np.log(m)
    with np.errstate(divide="ignore"):
        return np.log(r) + scale - math.log(grid.dx)

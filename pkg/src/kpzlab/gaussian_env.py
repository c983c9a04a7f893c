"""Lattice description and reproducible Gaussian coordinates.

Sites are labelled ``j = -L..L`` with position ``x_j = j*dx``; arrays are
indexed by ``j + L``.  Initial-condition increments live on cells
``u = -L+1..L`` where cell ``u`` is the half-open interval
``(x_{u-1}, x_u]``; they are stored at array index ``u + L - 1``.

Random numbers come from a counter-based generator (Philox4x64-10) keyed by
``(seed, replica_id)``.  Every raw 64-bit word maps to exactly one standard
normal through the inverse CDF, so draw ``k`` of a replica is a pure function
of ``(seed, replica_id, k)``.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

GENERATOR_FAMILY_ID = "philox4x64-10/raw53-ndtri/v1"

_MASK64 = (1 << 64) - 1


class GridError(ValueError):
    """Raised for an invalid space-time lattice."""


class TruncationWarning(UserWarning):
    """Lattice is narrow compared with the diffusive spread at final time."""


@dataclass(frozen=True)
class GridSpec:
    dx: float
    dt: float
    half_width: int
    n_steps: int
    boundary: str = "dirichlet_zero"

    def __post_init__(self):
        if not (self.dx > 0 and math.isfinite(self.dx)):
            raise GridError(f"dx must be positive, got {self.dx}")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise GridError(f"dt must be positive, got {self.dt}")
        if int(self.half_width) != self.half_width or self.half_width < 0:
            raise GridError(f"half_width must be a nonnegative integer, got {self.half_width}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 0:
            raise GridError(f"n_steps must be a nonnegative integer, got {self.n_steps}")
        if self.boundary != "dirichlet_zero":
            raise GridError(f"unsupported boundary policy {self.boundary!r}")
        # explicit scheme: centre weight 1 - dt/dx^2 must stay nonnegative
        if self.dt > self.dx * self.dx * (1 + 1e-12):
            raise GridError(f"dt={self.dt} violates dt <= dx^2={self.dx * self.dx}")
        object.__setattr__(self, "half_width", int(self.half_width))
        object.__setattr__(self, "n_steps", int(self.n_steps))
        if self.half_width < self.recommended_half_width():
            warnings.warn(
                f"half_width={self.half_width} below 4*ceil(sqrt(t)/dx)="
                f"{self.recommended_half_width()}; boundary mass loss may be visible",
                TruncationWarning,
                stacklevel=3,
            )

    @property
    def size(self) -> int:
        return 2 * self.half_width + 1

    @property
    def n_cells(self) -> int:
        return 2 * self.half_width

    @property
    def t(self) -> float:
        return self.n_steps * self.dt

    @property
    def sites(self) -> np.ndarray:
        return np.arange(-self.half_width, self.half_width + 1)

    @property
    def positions(self) -> np.ndarray:
        return self.sites * self.dx

    @property
    def cells(self) -> np.ndarray:
        return np.arange(-self.half_width + 1, self.half_width + 1)

    @property
    def p_side(self) -> float:
        return self.dt / (2 * self.dx * self.dx)

    @property
    def p_center(self) -> float:
        return max(0.0, 1.0 - self.dt / (self.dx * self.dx))

    def index(self, site: int) -> int:
        if abs(site) > self.half_width:
            raise IndexError(f"site {site} outside lattice of half-width {self.half_width}")
        return site + self.half_width

    def cell_index(self, u: int) -> int:
        if not -self.half_width < u <= self.half_width:
            raise IndexError(f"cell {u} outside lattice of half-width {self.half_width}")
        return u + self.half_width - 1

    def recommended_half_width(self) -> int:
        return 4 * math.ceil(math.sqrt(self.t) / self.dx)

    def n_environment_draws(self) -> int:
        return self.n_steps * self.size

    def to_dict(self) -> dict:
        return {"dx": self.dx, "dt": self.dt, "half_width": self.half_width, "n_steps": self.n_steps}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(dx=float(d["dx"]), dt=float(d["dt"]),
                   half_width=int(d["half_width"]), n_steps=int(d["n_steps"]))

    @classmethod
    def for_time(cls, dx: float, dt: float, t: float, half_width: int | None = None,
                 width_factor: int = 6) -> "GridSpec":
        """Grid reaching time ``t`` with ``round(t/dt)`` steps.

        ``half_width`` defaults to ``width_factor*ceil(sqrt(t)/dx)``, which keeps
        heat-kernel mass loss well under 1e-6 for ``width_factor >= 6``.
        """
        n = int(round(t / dt))
        if not math.isclose(n * dt, t, rel_tol=1e-9, abs_tol=1e-12):
            raise GridError(f"t={t} is not a multiple of dt={dt}")
        if half_width is None:
            half_width = max(1, width_factor * math.ceil(math.sqrt(t) / dx))
        return cls(dx=dx, dt=dt, half_width=half_width, n_steps=n)


@dataclass(frozen=True)
class RandomStream:
    """Immutable handle on a counter-addressed Gaussian sequence."""

    seed: int
    replica_id: int
    counter: int = 0

    def normals(self, n: int) -> tuple[np.ndarray, "RandomStream"]:
        """Return ``n`` standard normals and the advanced stream."""
        return _normals_at(self.seed, self.replica_id, self.counter, n), self.advance(n)

    def uniforms(self, n: int) -> tuple[np.ndarray, "RandomStream"]:
        """Return ``n`` uniforms on (0, 1), one raw word each."""
        return _uniforms_at(self.seed, self.replica_id, self.counter, n), self.advance(n)

    def advance(self, n: int) -> "RandomStream":
        return RandomStream(self.seed, self.replica_id, self.counter + int(n))

    def at(self, counter: int) -> "RandomStream":
        return RandomStream(self.seed, self.replica_id, int(counter))


def make_stream(seed: int, replica_id: int) -> RandomStream:
    return RandomStream(int(seed) & _MASK64, int(replica_id) & _MASK64, 0)


def _raw_at(seed: int, replica_id: int, counter: int, n: int) -> np.ndarray:
    key = np.array([seed & _MASK64, replica_id & _MASK64], dtype=np.uint64)
    block, offset = divmod(int(counter), 4)
    ctr = np.array([block & _MASK64, (block >> 64) & _MASK64, 0, 0], dtype=np.uint64)
    bg = np.random.Philox(counter=ctr, key=key)
    if offset:
        bg.random_raw(offset)
    if n == 0:
        return np.empty(0, dtype=np.uint64)
    return np.asarray(bg.random_raw(n), dtype=np.uint64)


def _uniforms_at(seed: int, replica_id: int, counter: int, n: int) -> np.ndarray:
    raw = _raw_at(seed, replica_id, counter, n)
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def _normals_at(seed: int, replica_id: int, counter: int, n: int) -> np.ndarray:
    return ndtri(_uniforms_at(seed, replica_id, counter, n))


@dataclass(frozen=True)
class Environment:
    """Unit-variance noise on each space-time cell, shape ``(N, 2L+1)``."""

    xi: np.ndarray

    @classmethod
    def zeros(cls, grid: GridSpec) -> "Environment":
        return cls(np.zeros((grid.n_steps, grid.size)))


@dataclass(frozen=True)
class InitialCondition:
    sigma: float
    eta: np.ndarray
    w: np.ndarray

    @classmethod
    def from_increments(cls, grid: GridSpec, sigma: float, eta: np.ndarray) -> "InitialCondition":
        eta = np.asarray(eta, dtype=float)
        return cls(float(sigma), eta, walk_from_increments(eta, grid.dx))

    @classmethod
    def flat(cls, grid: GridSpec) -> "InitialCondition":
        return cls(0.0, np.zeros(grid.n_cells), np.zeros(grid.size))

    @property
    def h0(self) -> np.ndarray:
        return self.sigma * self.w


def walk_from_increments(eta: np.ndarray, dx: float) -> np.ndarray:
    """Two-sided walk anchored at the origin; works on the last axis.

    ``eta[..., k]`` is the increment of cell ``u = k - L + 1``.
    """
    eta = np.asarray(eta, dtype=float)
    n_cells = eta.shape[-1]
    half = n_cells // 2
    s = math.sqrt(dx)
    right = np.cumsum(eta[..., half:], axis=-1) * s
    # cells -L+1..0 accumulate leftwards from the origin with a minus sign
    left = -np.cumsum(eta[..., :half][..., ::-1], axis=-1)[..., ::-1] * s
    zero = np.zeros(eta.shape[:-1] + (1,))
    # left[..., k] is w at site k-L, i.e. the sum over cells k-L+1..0
    return np.concatenate([left, zero, right], axis=-1)


def sample_environment(stream: RandomStream, grid: GridSpec) -> tuple[Environment, RandomStream]:
    g, stream = stream.normals(grid.n_environment_draws())
    return Environment(g.reshape(grid.n_steps, grid.size)), stream


def sample_initial_walk(stream: RandomStream, grid: GridSpec,
                        sigma: float) -> tuple[InitialCondition, RandomStream]:
    if sigma < 0:
        raise ValueError(f"sigma must be nonnegative, got {sigma}")
    eta, stream = stream.normals(grid.n_cells)
    return InitialCondition.from_increments(grid, sigma, eta), stream


def sample_replica(seed: int, replica_id: int, grid: GridSpec,
                   sigma: float) -> tuple[Environment, InitialCondition]:
    """Environment then initial increments, in the fixed counter layout."""
    stream = make_stream(seed, replica_id)
    env, stream = sample_environment(stream, grid)
    init, _ = sample_initial_walk(stream, grid, sigma)
    return env, init


def make_manifest(seed: int, grid: GridSpec, sigma: float, **extra) -> dict:
    manifest = {
        "seed": int(seed),
        "generator_family_id": GENERATOR_FAMILY_ID,
        "grid": grid.to_dict(),
        "sigma": float(sigma),
    }
    manifest.update(extra)
    return manifest


def manifest_hash(manifest: dict) -> str:
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]

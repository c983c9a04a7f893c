"""Gridded test functions and the smeared slope field.

A test function is sampled at lattice sites.  When it is paired with cell
quantities (Brownian increments, the signed indicator) the value at site
``u`` is the weight of cell ``u = (x_{u-1}, x_u]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .gaussian_env import GridSpec

DEFAULT_MARGIN = 2
DIFFERENCE_SCHEMES = ("central", "forward")


class MarginError(ValueError):
    """Support of a test function is too close to the lattice edge."""


@dataclass(frozen=True)
class TestFunction:
    values: np.ndarray
    grid: GridSpec

    __test__ = False  # not a pytest class

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.size,):
            raise ValueError(f"expected {self.grid.size} samples, got shape {v.shape}")
        object.__setattr__(self, "values", v)

    @property
    def support(self) -> tuple[int, int] | None:
        nz = np.flatnonzero(self.values)
        if nz.size == 0:
            return None
        return int(nz[0]) - self.grid.half_width, int(nz[-1]) - self.grid.half_width

    def margin(self) -> int:
        s = self.support
        if s is None:
            return self.grid.half_width
        return min(s[0] + self.grid.half_width, self.grid.half_width - s[1])

    def require_margin(self, margin: int = DEFAULT_MARGIN) -> "TestFunction":
        if self.margin() < margin:
            raise MarginError(f"support {self.support} leaves margin {self.margin()} < {margin} "
                              f"on lattice of half-width {self.grid.half_width}")
        return self

    def abs(self) -> "TestFunction":
        return TestFunction(np.abs(self.values), self.grid)

    def scaled(self, c: float) -> "TestFunction":
        return TestFunction(c * self.values, self.grid)

    def at(self, site: int) -> float:
        return float(self.values[self.grid.index(site)])

    def cell_weights(self) -> np.ndarray:
        """Values at cells ``u = -L+1..L`` (drops site ``-L``)."""
        return self.values[1:]


# --- constructors ----------------------------------------------------------

def zero(grid: GridSpec) -> TestFunction:
    return TestFunction(np.zeros(grid.size), grid)


def triangle(grid: GridSpec, center: float = 0.0, width: float = 2.0, amplitude: float = 1.0,
             margin: int = DEFAULT_MARGIN) -> TestFunction:
    half = width / 2
    v = amplitude * np.clip(1.0 - np.abs(grid.positions - center) / half, 0.0, None)
    return TestFunction(v, grid).require_margin(margin)


def bump(grid: GridSpec, center: float = 0.0, width: float = 2.0, amplitude: float = 1.0,
         margin: int = DEFAULT_MARGIN) -> TestFunction:
    """``amplitude * e * exp(-1/(1-r^2))`` with ``r = (x-center)/(width/2)``; peak = amplitude."""
    r = (grid.positions - center) / (width / 2)
    inside = np.abs(r) < 1
    v = np.zeros(grid.size)
    v[inside] = amplitude * math.e * np.exp(-1.0 / (1.0 - r[inside] ** 2))
    return TestFunction(v, grid).require_margin(margin)


def box(grid: GridSpec, left: float = 0.0, right: float = 1.0, amplitude: float = 1.0,
        margin: int = DEFAULT_MARGIN) -> TestFunction:
    """Amplitude on the cells inside ``(left, right]``."""
    x = grid.positions
    eps = 1e-9 * grid.dx
    v = np.where((x > left + eps) & (x <= right + eps), amplitude, 0.0)
    return TestFunction(v, grid).require_margin(margin)


def smoothed_box(grid: GridSpec, left: float = -0.5, right: float = 0.5, amplitude: float = 1.0,
                 smoothing: float = 0.25, margin: int = DEFAULT_MARGIN) -> TestFunction:
    """Box convolved with a normalized triangle of half-width ``smoothing``."""
    raw = box(grid, left, right, amplitude, margin=0).values
    k = max(1, int(round(smoothing / grid.dx)))
    ker = np.clip(1.0 - np.abs(np.arange(-k, k + 1)) / (k + 1), 0.0, None)
    v = np.convolve(raw, ker / ker.sum(), mode="same")
    return TestFunction(v, grid).require_margin(margin)


SHAPES = {"triangle": triangle, "bump": bump, "box": box, "smoothed_box": smoothed_box}


def from_spec(grid: GridSpec, spec: dict) -> TestFunction:
    """Build a test function from ``{"shape": name, **params}``."""
    spec = dict(spec)
    shape = spec.pop("shape", None)
    if shape not in SHAPES:
        raise ValueError(f"unknown test-function shape {shape!r}; expected one of {sorted(SHAPES)}")
    return SHAPES[shape](grid, **spec)


# --- algebra ---------------------------------------------------------------

def indicator_one_y(y_index: int, u: int) -> int:
    """Signed indicator of cell ``u`` between the origin and site ``y_index``."""
    if y_index > 0 and 1 <= u <= y_index:
        return 1
    if y_index < 0 and y_index + 1 <= u <= 0:
        return -1
    return 0


def indicator_matrix(grid: GridSpec) -> np.ndarray:
    """``S[y, u]`` over sites ``y`` and cells ``u`` (shape ``(2L+1, 2L)``)."""
    y = grid.sites[:, None]
    u = grid.cells[None, :]
    pos = (y > 0) & (u >= 1) & (u <= y)
    neg = (y < 0) & (u >= y + 1) & (u <= 0)
    return pos.astype(int) - neg.astype(int)


def primitive(phi: TestFunction) -> TestFunction:
    """``psi(x_j) = dx * sum_u phi(u) 1_{x_j}(u)``; ``psi(0) = 0`` exactly."""
    grid = phi.grid
    L = grid.half_width
    v = phi.values
    psi = np.zeros(grid.size)
    psi[L + 1:] = np.cumsum(v[L + 1:]) * grid.dx
    # site j < 0 collects cells j+1..0
    psi[:L] = -np.cumsum(v[1:L + 1][::-1])[::-1] * grid.dx
    return TestFunction(psi, grid)


def derivative(phi: TestFunction, scheme: str = "central") -> TestFunction:
    """Lattice derivative; the support grows by one cell (each side for central).

    ``forward`` is the summation-by-parts partner of ``primitive`` and of the
    cell convention of the walk: ``-sum D+phi * w * dx = sum phi(u) (w_u - w_{u-1})``.
    """
    grid = phi.grid
    if phi.support is not None:
        need = 1 if scheme == "forward" else 2
        lo, hi = phi.support
        if scheme == "forward":
            if lo - 1 <= -grid.half_width or hi >= grid.half_width:
                raise MarginError(f"forward derivative of support {phi.support} touches the lattice edge")
        elif phi.margin() < need:
            raise MarginError(f"central derivative of support {phi.support} touches the lattice edge")
    v = phi.values
    d = np.zeros(grid.size)
    if scheme == "central":
        d[1:-1] = (v[2:] - v[:-2]) / (2 * grid.dx)
    elif scheme == "forward":
        d[:-1] = (v[1:] - v[:-1]) / grid.dx
    else:
        raise ValueError(f"unknown difference scheme {scheme!r}")
    return TestFunction(d, grid)


def cross_correlate(phi2: TestFunction, phi1: TestFunction) -> TestFunction:
    """``u -> dx * sum_z phi2(z) phi1(z+u)`` for lattice shifts ``u = -L..L``."""
    grid = phi2.grid
    M = grid.size
    full = np.correlate(phi1.values, phi2.values, mode="full")  # lags -(M-1)..(M-1)
    mid = M - 1
    L = grid.half_width
    return TestFunction(full[mid - L: mid + L + 1] * grid.dx, grid)


def smeared_slope(h: np.ndarray, phi: TestFunction, scheme: str = "central") -> np.ndarray | float:
    """``X(phi) = -sum_j phi'(x_j) h(x_j) dx`` along the last axis of ``h``."""
    dphi = derivative(phi, scheme).values
    out = -np.sum(np.asarray(h) * dphi, axis=-1) * phi.grid.dx
    return float(out) if np.ndim(out) == 0 else out


def wiener_integral(eta: np.ndarray, phi: TestFunction) -> np.ndarray | float:
    """``sqrt(dx) * sum_u phi(u) eta_u``: the lattice version of ``int phi dW``."""
    out = np.sum(np.asarray(eta) * phi.cell_weights(), axis=-1) * math.sqrt(phi.grid.dx)
    return float(out) if np.ndim(out) == 0 else out


def l2_norm(phi: TestFunction) -> float:
    return math.sqrt(float(np.sum(phi.values ** 2)) * phi.grid.dx)

"""Experiment configuration: JSON in, validated dataclass out."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .ensemble import DEFAULT_PROBES
from .field import from_spec
from .gaussian_env import GridError, GridSpec, TruncationWarning, make_manifest
from .oracle import DEFAULT_ORDERS
from .polymer import SCHEMES

KINDS = ("verify-tiny", "ensemble", "wasserstein", "flat-limit")
DEFAULT_PHI1 = {"shape": "triangle", "center": 0.0, "width": 2.0}
DEFAULT_PHI2 = {"shape": "triangle", "center": 1.0, "width": 2.0}
# per-kind overrides of the dataclass defaults
KIND_DEFAULTS = {
    "wasserstein": {"dt": 0.0025, "replicas": 2000},
    "flat-limit": {"replicas": 40000},
}


class ConfigError(ValueError):
    def __init__(self, name: str, message: str):
        super().__init__(f"config field {name!r}: {message}")
        self.field = name


@dataclass
class ExperimentConfig:
    kind: str = "ensemble"
    seed: int = 0
    dx: float = 0.1
    dt: float = 0.004
    t: float = 1.0
    half_width: int | None = None
    sigma: float = 1.0
    scheme: str = "exponential"
    replicas: int = 20000
    probes: list[int] = field(default_factory=lambda: list(DEFAULT_PROBES))
    phi1: dict = field(default_factory=lambda: dict(DEFAULT_PHI1))
    phi2: dict = field(default_factory=lambda: dict(DEFAULT_PHI2))
    times: list[float] = field(default_factory=lambda: [0.25, 1.0])
    sigmas: list[float] = field(default_factory=lambda: [0.5, 0.25, 0.1])
    smoothing_halfwidth: int = 2
    tolerance: float = 0.05
    permutations: int = 20
    orders: list[int] = field(default_factory=lambda: list(DEFAULT_ORDERS))
    schemes: list[str] = field(default_factory=lambda: list(SCHEMES))
    derivative_points: int = 100
    workers: int = 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("<root>", "expected a JSON object")
        known = {f for f in cls.__dataclass_fields__}
        for k in data:
            if k not in known:
                raise ConfigError(k, "unknown field")
        kind = data.get("kind", cls.kind)
        if kind not in KINDS:
            raise ConfigError("kind", f"expected one of {list(KINDS)}, got {kind!r}")
        cfg = cls(**{**KIND_DEFAULTS.get(kind, {}), **data})
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError("<file>", f"cannot read {path}: {e.strerror}") from e
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError("<file>", f"invalid JSON at line {e.lineno}: {e.msg}") from e
        return cls.from_dict(data)

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError("kind", f"expected one of {list(KINDS)}, got {self.kind!r}")
        _check_int("seed", self.seed, lo=0)
        for name in ("dx", "dt"):
            _check_real(name, getattr(self, name), positive=True)
        _check_real("t", self.t)
        if self.t < 0:
            raise ConfigError("t", f"must be nonnegative, got {self.t}")
        if self.half_width is not None:
            _check_int("half_width", self.half_width, lo=1)
        _check_real("sigma", self.sigma)
        if self.sigma < 0:
            raise ConfigError("sigma", f"must be nonnegative, got {self.sigma}")
        if self.scheme not in SCHEMES:
            raise ConfigError("scheme", f"expected one of {list(SCHEMES)}, got {self.scheme!r}")
        _check_int("replicas", self.replicas, lo=2)
        _check_int("workers", self.workers, lo=1)
        _check_int("smoothing_halfwidth", self.smoothing_halfwidth, lo=0)
        _check_int("permutations", self.permutations, lo=2)
        _check_int("derivative_points", self.derivative_points, lo=1)
        _check_real("tolerance", self.tolerance, positive=True)
        _check_list("probes", self.probes, int)
        _check_list("orders", self.orders, int)
        _check_list("times", self.times, (int, float))
        _check_list("sigmas", self.sigmas, (int, float))
        _check_list("schemes", self.schemes, str)
        for s in self.schemes:
            if s not in SCHEMES:
                raise ConfigError("schemes", f"unknown scheme {s!r}")
        if any(m < 1 for m in self.orders):
            raise ConfigError("orders", "quadrature orders must be positive")
        if any(s <= 0 for s in self.sigmas):
            raise ConfigError("sigmas", "flat-limit sigmas must be positive")
        for name in ("phi1", "phi2"):
            spec = getattr(self, name)
            if not isinstance(spec, dict) or "shape" not in spec:
                raise ConfigError(name, "expected an object with a 'shape' key")
        try:
            for t in self.grid_times():
                self.grid(t)
        except GridError as e:
            msg = str(e)
            name = "dt" if "violates" in msg else "t" if "multiple" in msg else "grid"
            raise ConfigError(name, msg) from e
        if self.kind in ("ensemble", "wasserstein"):
            for t in self.grid_times():
                for name in ("phi1", "phi2"):
                    try:
                        from_spec(self.grid(t), getattr(self, name))
                    except (TypeError, ValueError) as e:
                        raise ConfigError(name, str(e)) from e
        if self.kind == "ensemble":
            L = self.grid().half_width
            for y in self.probes:
                if abs(y) + 1 > L:
                    raise ConfigError("probes", f"probe {y} needs |y|+1 <= half_width={L}")

    def grid_times(self) -> list[float]:
        return [float(t) for t in self.times] if self.kind == "wasserstein" else [self.t]

    def grid(self, t: float | None = None) -> GridSpec:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", TruncationWarning)
            return GridSpec.for_time(self.dx, self.dt, self.t if t is None else t, self.half_width)

    def manifest(self) -> dict:
        """Manifest of the whole experiment; its hash tags every output row."""
        extra = {"kind": self.kind, "scheme": self.scheme}
        if self.kind == "wasserstein":
            extra["times"] = [float(t) for t in self.times]
            extra["phi1"], extra["phi2"] = self.phi1, self.phi2
        elif self.kind == "flat-limit":
            extra["sigmas"] = [float(s) for s in self.sigmas]
        elif self.kind == "verify-tiny":
            extra["orders"] = list(self.orders)
            extra["schemes"] = list(self.schemes)
        if self.kind in ("ensemble", "wasserstein", "flat-limit"):
            extra["replicas"] = int(self.replicas)
        return make_manifest(self.seed, self.grid(self.grid_times()[-1]), self.sigma, **extra)


def _check_int(name, v, lo=None):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(name, f"expected an integer, got {v!r}")
    if lo is not None and v < lo:
        raise ConfigError(name, f"must be >= {lo}, got {v}")


def _check_real(name, v, positive=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(name, f"expected a number, got {v!r}")
    if positive and not v > 0:
        raise ConfigError(name, f"must be positive, got {v}")


def _check_list(name, v, types):
    if not isinstance(v, list) or not v:
        raise ConfigError(name, "expected a nonempty list")
    for item in v:
        if isinstance(item, bool) or not isinstance(item, types):
            raise ConfigError(name, f"bad element {item!r}")

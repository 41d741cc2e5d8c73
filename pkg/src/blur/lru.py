"""Diagonal linear recurrent unit with exponentially parameterized eigenvalues."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, NumericError
from .scan import DEFAULT_BLOCK_SIZE, Direction, HiddenSequence, par_scan, reverse_scan

# keeps |lambda| strictly inside the unit disk when e_max == 1
RADIUS_MARGIN = 1e-6
# exp(-exp(nu_log)) reaches radius 0 only at nu_log = +inf
MIN_RADIUS = 1e-12


@dataclass(frozen=True)
class RingInit:
    """Annulus ``e_min <= |lambda| <= e_max`` that eigenvalues are drawn from."""

    e_min: float = 0.0
    e_max: float = 1.0
    phase_max: float = 2 * math.pi
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.e_min <= self.e_max <= 1.0):
            raise ConfigError(f"ring bounds must satisfy 0 <= e_min <= e_max <= 1, got [{self.e_min}, {self.e_max}]")
        if not (0.0 < self.phase_max <= 2 * math.pi):
            raise ConfigError(f"phase_max must lie in (0, 2*pi], got {self.phase_max}")


@dataclass
class LruParams:
    """Parameters of one LRU.

    ``B`` is complex with shape (n, m); the optimizer sees it through its
    ``.real`` and ``.imag`` views.
    """

    nu_log: np.ndarray
    theta: np.ndarray
    B: np.ndarray
    gamma: np.ndarray
    direction: Direction = Direction.FORWARD

    def __post_init__(self):
        self.direction = Direction(self.direction)
        if self.direction is Direction.MERGED:
            raise ConfigError("an LRU runs either forward or backward")
        n = self.nu_log.shape[0]
        if self.theta.shape != (n,) or self.gamma.shape != (n,) or self.B.ndim != 2 or self.B.shape[0] != n:
            raise DimensionError(
                f"inconsistent LRU shapes: nu_log {self.nu_log.shape}, theta {self.theta.shape}, "
                f"gamma {self.gamma.shape}, B {self.B.shape}"
            )

    @property
    def width(self) -> int:
        return self.nu_log.shape[0]

    @property
    def input_dim(self) -> int:
        return self.B.shape[1]


def nu_log_from_radius(radius):
    """Invert ``|lambda| = exp(-exp(nu_log))``."""
    return np.log(-np.log(np.asarray(radius, dtype=np.float64)))


def init_lru(n: int, m: int, ring: RingInit = RingInit(), direction=Direction.FORWARD) -> LruParams:
    if n < 1 or m < 1:
        raise ConfigError(f"LRU needs n >= 1 and m >= 1, got n={n}, m={m}")
    rng = np.random.default_rng(ring.seed)
    u = rng.uniform(0.0, 1.0, n)
    # uniform in area over the annulus
    radius = np.sqrt(ring.e_min**2 + u * (ring.e_max**2 - ring.e_min**2))
    radius = np.clip(radius, MIN_RADIUS, 1.0 - RADIUS_MARGIN)
    theta = rng.uniform(0.0, ring.phase_max, n)
    scale = math.sqrt(1.0 / (2 * m))
    B = rng.normal(0.0, scale, (n, m)) + 1j * rng.normal(0.0, scale, (n, m))
    nu_log = nu_log_from_radius(radius)
    gamma = np.sqrt(1.0 - np.exp(-2.0 * np.exp(nu_log)))
    return LruParams(nu_log=nu_log, theta=theta, B=B, gamma=gamma, direction=direction)


def eigenvalues(params: LruParams) -> np.ndarray:
    return np.exp(-np.exp(params.nu_log)) * (np.cos(params.theta) + 1j * np.sin(params.theta))


def spectral_radius(params: LruParams) -> float:
    return float(np.max(np.abs(eigenvalues(params))))


def lru_apply(params: LruParams, u, block_size: int = DEFAULT_BLOCK_SIZE) -> HiddenSequence:
    """Project real inputs ``u`` of shape (..., N, m) and run the recurrence."""
    u = np.asarray(u, dtype=np.float64)
    if u.ndim < 2 or u.shape[-1] != params.input_dim:
        raise DimensionError(f"inputs {u.shape} do not match LRU input dim {params.input_dim}")
    if not np.all(np.isfinite(u)):
        raise NumericError("non-finite LRU inputs")
    lam = eigenvalues(params)
    b = params.gamma * (u @ params.B.T)
    if params.direction is Direction.FORWARD:
        return par_scan(lam, b, block_size=block_size)
    return reverse_scan(lam, b, block_size=block_size)

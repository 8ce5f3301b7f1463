"""Positional machinery: 1D rotary, golden-angle 2D rotary, Fourier features.

The attention head dimension is split into two halves. The first half rotates
by the 1D sequence index (standard rotary pairs); the second half rotates by
the projection of the 2D grid position onto golden-ratio-distributed unit
directions, so heads can compare relative offsets along arbitrary angles
instead of only the x/y axes. The 2D half is rotated only for image tokens;
everything else gets the identity there.

Coordinate and size values are embedded with a random Fourier feature map
gamma(v) = [cos(2*pi*B v), sin(2*pi*B v)] whose bandwidth is set by the
standard deviation of the fixed Gaussian projection B.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "RopeConfig",
    "FourierConfig",
    "ggrope_directions",
    "ggrope_frequencies",
    "rope_angles_1d",
    "ggrope_angles_2d",
    "apply_rope_1d",
    "apply_ggrope_2d",
    "rotate_pairs",
    "fourier_features",
]

GOLDEN_RATIO = (1.0 + math.sqrt(5.0)) / 2.0


def ggrope_directions(n_pairs: int) -> np.ndarray:
    """Unit direction vectors u_j = (cos a_j, sin a_j), a_j = 2*pi*frac(j/phi).

    The golden-ratio stride spreads directions quasi-uniformly over the
    circle for any n_pairs; j=0 is always (1, 0).
    """
    if n_pairs <= 0:
        raise ValueError(f"n_pairs must be positive, got {n_pairs}")
    j = np.arange(n_pairs, dtype=np.float64)
    ang = 2.0 * math.pi * np.mod(j / GOLDEN_RATIO, 1.0)
    return np.stack([np.cos(ang), np.sin(ang)], axis=1)


def ggrope_frequencies(n_pairs: int, omega_max: float = 4.0,
                       omega_min: float = 0.25) -> np.ndarray:
    """Geometric frequency spectrum from omega_max down to omega_min.

    The single tunable of the 2D half. Angles are omega_j * (p . u_j) with p
    in grid units, so the spectrum must put at least one full rotation
    across the grid: for small grids (8x8 patches) the default [4, 0.25]
    spans periods of ~1.6 to ~25 units. A 1D-style spectrum (1 down to
    1e-4) leaves all but one pair effectively constant over such a grid and
    positional addressing collapses.
    """
    if n_pairs == 1:
        return np.array([omega_max], dtype=np.float64)
    j = np.arange(n_pairs, dtype=np.float64)
    ratio = omega_min / omega_max
    return omega_max * ratio ** (j / (n_pairs - 1))


@dataclass(frozen=True)
class RopeConfig:
    """Rotary setup for one attention head dimension.

    head_dim must be divisible by 4: the 1D and 2D halves each consist of
    rotation pairs. The 1D half uses the standard base-10000 spectrum over
    sequence indices; the 2D half uses a geometric spectrum
    [omega_max, omega_min] matched to grid coordinates. Tables are derived
    deterministically; direction vectors are global (shared by all heads).
    """

    head_dim: int
    base: float = 10000.0
    omega_max: float = 4.0
    omega_min: float = 0.25

    def __post_init__(self):
        if self.head_dim % 4 != 0 or self.head_dim <= 0:
            raise ValueError(f"head_dim must be a positive multiple of 4, got {self.head_dim}")
        if self.omega_max <= 0 or self.omega_min <= 0:
            raise ValueError("2D rotary frequencies must be positive")

    @property
    def n_pairs_1d(self) -> int:
        return self.head_dim // 4

    @property
    def n_pairs_2d(self) -> int:
        return self.head_dim // 4

    def freqs_1d(self) -> np.ndarray:
        n = self.n_pairs_1d
        return self.base ** (-np.arange(n, dtype=np.float64) / n)

    def directions_2d(self) -> np.ndarray:
        return ggrope_directions(self.n_pairs_2d)

    def freqs_2d(self) -> np.ndarray:
        return ggrope_frequencies(self.n_pairs_2d, self.omega_max, self.omega_min)


def rope_angles_1d(t, cfg: RopeConfig) -> np.ndarray:
    """Angles [len(t), n_pairs_1d] for sequence indices t."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    return t[:, None] * cfg.freqs_1d()[None, :]


def ggrope_angles_2d(p, cfg: RopeConfig) -> np.ndarray:
    """Angles [len(p), n_pairs_2d]: omega_j * (p . u_j) for grid positions p."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    proj = p @ cfg.directions_2d().T  # [N, n_pairs]
    return proj * cfg.freqs_2d()[None, :]


def rotate_pairs(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate dimension pairs (i, i + n) of the last axis by given angles.

    x: [..., 2n]; cos/sin broadcastable to [..., n].
    """
    n = x.shape[-1] // 2
    a, b = x[..., :n], x[..., n:]
    return np.concatenate([a * cos - b * sin, a * sin + b * cos], axis=-1)


def apply_rope_1d(x: np.ndarray, t, cfg: RopeConfig) -> np.ndarray:
    """Rotate the 1D half (first head_dim/2 dims of x) by position t.

    x: [N, head_dim/2] (or [head_dim/2] with scalar t). Norm-preserving;
    t = 0 is the identity.
    """
    single = np.asarray(x).ndim == 1
    x2 = np.atleast_2d(np.asarray(x, dtype=np.float64))
    ang = rope_angles_1d(t, cfg)
    out = rotate_pairs(x2, np.cos(ang), np.sin(ang))
    return out[0] if single else out


def apply_ggrope_2d(x: np.ndarray, p, cfg: RopeConfig) -> np.ndarray:
    """Rotate the 2D half by the golden-angle projection of grid position p."""
    single = np.asarray(x).ndim == 1
    x2 = np.atleast_2d(np.asarray(x, dtype=np.float64))
    ang = ggrope_angles_2d(p, cfg)
    out = rotate_pairs(x2, np.cos(ang), np.sin(ang))
    return out[0] if single else out


@dataclass(frozen=True)
class FourierConfig:
    """Fixed random Fourier projection for points in [0,1]^2.

    feature_dim is the length of gamma(v) (cos half + sin half); the
    projection matrix has shape (feature_dim/2, 2), entries N(0, sigma^2),
    and is frozen after initialization (never trained). sigma controls the
    kernel bandwidth.
    """

    feature_dim: int
    sigma: float = 10.0
    seed: int = 0
    projection: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.feature_dim % 2 != 0 or self.feature_dim <= 0:
            raise ValueError(f"feature_dim must be a positive even number, got {self.feature_dim}")
        rng = np.random.default_rng(self.seed)
        b = rng.normal(0.0, self.sigma, size=(self.feature_dim // 2, 2))
        b.setflags(write=False)
        object.__setattr__(self, "projection", b)


def fourier_features(v, cfg: FourierConfig) -> np.ndarray:
    """gamma(v) = [cos(2 pi B v), sin(2 pi B v)] for v in [0,1]^2.

    v: (2,) or (N, 2). The squared norm of every output row is exactly
    feature_dim / 2 (cos^2 + sin^2 summed over projections).
    """
    arr = np.asarray(v, dtype=np.float64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[-1] != 2:
        raise ValueError(f"expected points in R^2, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite input to fourier_features")
    phase = 2.0 * math.pi * (arr @ cfg.projection.T)  # [N, feature_dim/2]
    out = np.concatenate([np.cos(phase), np.sin(phase)], axis=-1)
    return out[0] if single else out

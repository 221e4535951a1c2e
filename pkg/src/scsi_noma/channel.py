"""Ray-based ULA channel model: path statistics, realizations and covariances."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


def exponential_powers(rng: np.random.Generator, n_paths: int) -> np.ndarray:
    """Default path-power sampler: i.i.d. Exp(1) variates (normalized by the caller)."""
    return rng.exponential(1.0, size=n_paths)


@dataclass(frozen=True)
class PathProfile:
    """Long-term statistics of one user: AoDs and normalized path powers."""

    angles: np.ndarray
    powers: np.ndarray

    def __post_init__(self):
        angles = np.asarray(self.angles, dtype=float).reshape(-1)
        powers = np.asarray(self.powers, dtype=float).reshape(-1)
        if angles.size == 0 or angles.shape != powers.shape:
            raise ValueError("angles and powers must be non-empty and of equal length")
        if not np.all(np.isfinite(angles)) or np.any(np.abs(angles) > np.pi / 2):
            raise ValueError("angles must lie in [-pi/2, pi/2]")
        if np.any(powers <= 0) or abs(powers.sum() - 1.0) > 1e-12:
            raise ValueError("path powers must be positive and sum to 1")
        object.__setattr__(self, "angles", angles)
        object.__setattr__(self, "powers", powers)

    @property
    def count(self) -> int:
        return self.angles.size


@dataclass(frozen=True)
class ChannelRealization:
    h: np.ndarray
    owner: int = 0


def steering_vector(theta: float, n_antennas: int) -> np.ndarray:
    """Half-wavelength ULA response, element m = exp(j*pi*m*sin(theta)) / sqrt(N)."""
    if n_antennas < 1:
        raise ValueError("n_antennas must be >= 1")
    if not np.isfinite(theta):
        raise ValueError("theta must be finite")
    m = np.arange(n_antennas)
    return np.exp(1j * np.pi * m * np.sin(theta)) / np.sqrt(n_antennas)


def steering_matrix(angles: np.ndarray, n_antennas: int) -> np.ndarray:
    """Columns are steering vectors, shape (n_antennas, len(angles))."""
    angles = np.asarray(angles, dtype=float)
    m = np.arange(n_antennas)[:, None]
    return np.exp(1j * np.pi * m * np.sin(angles)[None, :]) / np.sqrt(n_antennas)


def draw_path_profile(
    rng: np.random.Generator,
    n_paths: int,
    power_sampler: Callable[[np.random.Generator, int], np.ndarray] = exponential_powers,
) -> PathProfile:
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    angles = rng.uniform(-np.pi / 2, np.pi / 2, size=n_paths)
    raw = np.asarray(power_sampler(rng, n_paths), dtype=float)
    powers = raw / raw.sum()
    # renormalize once more so the sum is 1 to the last ulp
    powers = powers / powers.sum()
    return PathProfile(angles, powers)


def draw_channels(
    profile: PathProfile, rng: np.random.Generator, n_antennas: int, size: int = 1
) -> np.ndarray:
    """Draw ``size`` independent block-fading rows h, shape (size, n_antennas).

    h = sqrt(N/L) * sum_l alpha_l * a(theta_l)^H with alpha_l ~ CN(0, rho_l^2).
    """
    L = profile.count
    std = np.sqrt(profile.powers / 2.0)
    alpha = (rng.standard_normal((size, L)) + 1j * rng.standard_normal((size, L))) * std
    return synthesize_channel(profile, alpha, n_antennas)


def synthesize_channel(profile: PathProfile, alpha: np.ndarray, n_antennas: int) -> np.ndarray:
    """Channel rows for given path gains ``alpha`` (shape (..., L))."""
    A = steering_matrix(profile.angles, n_antennas)
    return np.sqrt(n_antennas / profile.count) * (np.asarray(alpha) @ A.conj().T)


def draw_realization(
    profile: PathProfile, rng: np.random.Generator, n_antennas: int, owner: int = 0
) -> ChannelRealization:
    return ChannelRealization(draw_channels(profile, rng, n_antennas)[0], owner)


def covariance(profile: PathProfile, n_antennas: int) -> np.ndarray:
    """Analytic long-term covariance E{h^H h} = (N/L) * sum_l rho_l^2 a_l a_l^H."""
    A = steering_matrix(profile.angles, n_antennas)
    R = (n_antennas / profile.count) * (A * profile.powers) @ A.conj().T
    return 0.5 * (R + R.conj().T)

"""Hybrid beamforming from second-order statistics.

Analog stage: statistical analog beamforming (SAB) from null-space projected
group-average covariances, or constant-modulus EGT toward a cluster head.
Digital stage: zero forcing on the effective dominant directions, or the
SLNR generalized eigenvector. All precoders are globally scaled so that
||F W||_F^2 = G.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .grouping import GroupingResult

log = logging.getLogger(__name__)


class ConditioningError(RuntimeError):
    """Raised when a digital precoder cannot be formed (singular system)."""


@dataclass(frozen=True)
class BeamformingState:
    F: np.ndarray  # (N_t, G) analog
    W: np.ndarray  # (G, G) digital, columns w_g
    scheme: str = ""

    @property
    def precoders(self) -> np.ndarray:
        """Equivalent precoders d_g = F w_g as columns, shape (N_t, G)."""
        return self.F @ self.W


def fix_phase(v: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Rotate v so its first non-negligible entry is real and positive."""
    mags = np.abs(v)
    idx = int(np.argmax(mags > eps * max(mags.max(), 1e-300)))
    if mags[idx] == 0:
        return v
    return v * (np.conj(v[idx]) / mags[idx])


def dominant_eigenvector(R: np.ndarray) -> np.ndarray:
    """Unit-norm eigenvector of the largest eigenvalue of Hermitian R."""
    R = np.asarray(R)
    _, V = np.linalg.eigh(0.5 * (R + R.conj().T))
    return fix_phase(V[:, -1])


def group_average_covariance(grouping: GroupingResult, covariances: Sequence[np.ndarray]) -> list[np.ndarray]:
    return [sum(covariances[u] for u in g) / len(g) for g in grouping.groups]


def strongest_users(grouping: GroupingResult, covariances: Sequence[np.ndarray]) -> list[int]:
    """Per group, the member with the largest trace(R); ties to the lowest id."""
    heads = []
    for g in grouping.groups:
        traces = [np.trace(covariances[u]).real for u in g]
        heads.append(g[int(np.argmax(traces))])
    return heads


def null_space_basis(Xi: np.ndarray, rel_tol: float = 1e-10) -> np.ndarray:
    """Orthonormal basis of the orthogonal complement of span(Xi) via full SVD."""
    n = Xi.shape[0]
    if Xi.shape[1] == 0:
        return np.eye(n, dtype=complex)
    Q, s, _ = np.linalg.svd(Xi, full_matrices=True)
    rank = int(np.sum(s > rel_tol * s.max())) if s.size and s.max() > 0 else 0
    return Q[:, rank:]


def sab_analog(avg_covs: Sequence[np.ndarray]) -> np.ndarray:
    """Statistical analog beamforming.

    For each group g the other groups' dominant eigenvectors are stacked into
    Xi_g; f_g is the dominant direction of R_bar_g restricted to null(Xi_g^H).
    """
    G = len(avg_covs)
    n = avg_covs[0].shape[0]
    if n <= G - 1:
        raise ValueError("need N_t > G - 1")
    u_max = np.stack([dominant_eigenvector(R) for R in avg_covs], axis=1)
    F = np.empty((n, G), dtype=complex)
    for g in range(G):
        Qn = null_space_basis(np.delete(u_max, g, axis=1))
        R_hat = Qn.conj().T @ avg_covs[g] @ Qn
        f = Qn @ dominant_eigenvector(R_hat)
        F[:, g] = fix_phase(f / np.linalg.norm(f))
    return F


def egt_vector(R: np.ndarray) -> np.ndarray:
    """Constant-modulus beam with the phases of R's dominant eigenvector, entries 1/sqrt(N)."""
    u = dominant_eigenvector(R)
    return np.exp(1j * np.angle(u)) / np.sqrt(u.size)


def egt_analog(grouping: GroupingResult, covariances: Sequence[np.ndarray], heads: Sequence[int] | None = None) -> np.ndarray:
    if heads is None:
        heads = strongest_users(grouping, covariances)
    return np.stack([egt_vector(covariances[h]) for h in heads], axis=1)


def normalize_digital(F: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Global scaling W <- sqrt(G) W / ||F W||_F."""
    G = W.shape[1]
    norm = np.linalg.norm(F @ W)
    if norm == 0 or not np.isfinite(norm):
        raise ConditioningError("digital precoder has zero or non-finite norm")
    return np.sqrt(G) * W / norm


def zf_digital(F: np.ndarray, ref_covs: Sequence[np.ndarray], normalize: bool = True, max_cond: float = 1e12) -> np.ndarray:
    """Zero forcing on the dominant effective directions u_q of F^H R_q F.

    With H = U_max^H (rows u_q^H), W = H^H (H H^H)^{-1}, so that
    w_g^H u_q = delta_gq before normalization.
    """
    U = np.stack([dominant_eigenvector(F.conj().T @ R @ F) for R in ref_covs], axis=1)
    H = U.conj().T
    gram = H @ H.conj().T
    if np.linalg.cond(gram) > max_cond:
        raise ConditioningError("effective dominant eigenvectors are (nearly) linearly dependent")
    W = H.conj().T @ np.linalg.inv(gram)
    return normalize_digital(F, W) if normalize else W


def generalized_dominant_eigenvector(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Unit-norm maximizer of w^H A w / w^H B w for Hermitian A, Hermitian PD B.

    Cholesky-whitens B, then takes the top eigenvector of L^{-1} A L^{-H}.
    """
    B = 0.5 * (B + B.conj().T)
    try:
        L = np.linalg.cholesky(B)
    except np.linalg.LinAlgError:
        reg = 1e-12 * np.trace(B).real
        log.warning("SLNR denominator not positive definite; adding %.3g I", reg)
        L = np.linalg.cholesky(B + reg * np.eye(B.shape[0]))
    Linv = np.linalg.inv(L)
    C = Linv @ A @ Linv.conj().T
    z = dominant_eigenvector(C)
    w = Linv.conj().T @ z
    return fix_phase(w / np.linalg.norm(w))


def slnr_digital(
    F: np.ndarray,
    grouping: GroupingResult,
    user_covs: Sequence[np.ndarray],
    powers: np.ndarray,
    sigma2: float,
    normalize: bool = True,
) -> np.ndarray:
    """SLNR digital precoder from per-user covariances (statistical or rank-1 instantaneous).

    ``powers`` is the per-user bootstrap power split used in the leakage ratio.
    """
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    G = grouping.n_groups
    if F.shape[1] != G:
        raise ValueError("analog matrix must have one column per group")
    powers = np.asarray(powers, dtype=float)
    if np.any(powers <= 0):
        raise ValueError("bootstrap powers must be positive")
    R_eff = [F.conj().T @ R @ F for R in user_covs]
    per_group = [sum(R_eff[u] for u in g) for g in grouping.groups]
    total = sum(per_group)
    W = np.empty((G, G), dtype=complex)
    for g, members in enumerate(grouping.groups):
        A = sum(powers[u] * R_eff[u] for u in members)
        P_g = powers[list(members)].sum()
        B = sigma2 * np.eye(G) + P_g * (total - per_group[g])
        W[:, g] = generalized_dominant_eigenvector(A, B)
    return normalize_digital(F, W) if normalize else W


def slnr_lower_bound(
    w: np.ndarray, g: int, grouping: GroupingResult, R_eff: Sequence[np.ndarray], powers: np.ndarray, sigma2: float
) -> float:
    """Ratio of expected desired power to expected leakage-plus-noise for group g's w."""
    members = grouping.groups[g]
    num = sum(powers[u] * np.vdot(w, R_eff[u] @ w).real for u in members)
    others = [u for gi, m in enumerate(grouping.groups) if gi != g for u in m]
    leak = sum(np.vdot(w, R_eff[u] @ w).real for u in others)
    return float(num / (sigma2 + powers[list(members)].sum() * leak))


def effective_gains(channels: np.ndarray, state: BeamformingState | np.ndarray) -> np.ndarray:
    """gains[u, q] = |h_u d_q|^2 for channel rows h_u, shape (K, G)."""
    D = state.precoders if isinstance(state, BeamformingState) else np.asarray(state)
    H = np.asarray(channels)
    return np.abs(H @ D) ** 2

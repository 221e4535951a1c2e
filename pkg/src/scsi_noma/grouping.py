"""User grouping: CMD-based agglomerative clustering and a K-means baseline."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class GroupingResult:
    """A partition of users 0..K-1 into G non-empty groups.

    Groups are sorted by their smallest member id; members ascending.
    """

    groups: tuple[tuple[int, ...], ...]
    method: str
    merges: tuple[tuple[tuple[int, ...], tuple[int, ...]], ...] = ()

    def __post_init__(self):
        members = sorted(u for g in self.groups for u in g)
        if any(len(g) == 0 for g in self.groups):
            raise ValueError("empty group")
        if members != list(range(len(members))):
            raise ValueError("groups must partition 0..K-1")

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def n_users(self) -> int:
        return sum(len(g) for g in self.groups)

    def group_of(self) -> np.ndarray:
        out = np.empty(self.n_users, dtype=int)
        for gi, g in enumerate(self.groups):
            out[list(g)] = gi
        return out


def _canonical(groups: Sequence[Sequence[int]], method: str, merges=()) -> GroupingResult:
    gs = sorted((tuple(sorted(int(u) for u in g)) for g in groups), key=lambda g: g[0])
    return GroupingResult(tuple(gs), method, tuple(merges))


def cmd_distance(Ri: np.ndarray, Rj: np.ndarray) -> float:
    """Correlation matrix distance 1 - Tr(Ri^H Rj) / (||Ri||_F ||Rj||_F), clamped to [0, 1]."""
    Ri = np.asarray(Ri)
    Rj = np.asarray(Rj)
    if Ri.shape != Rj.shape:
        raise ValueError("covariances must have the same shape")
    ni = np.linalg.norm(Ri)
    nj = np.linalg.norm(Rj)
    if ni == 0 or nj == 0:
        raise ValueError("zero-norm covariance")
    # Tr(Ri^H Rj) = sum(conj(Ri) * Rj); real for Hermitian inputs
    corr = np.vdot(Ri, Rj).real / (ni * nj)
    return float(min(1.0, max(0.0, 1.0 - corr)))


def cmd_matrix(covariances: Sequence[np.ndarray]) -> np.ndarray:
    """Symmetric table of pairwise CMD distances, zero diagonal."""
    R = np.stack([np.asarray(c) for c in covariances])
    K = R.shape[0]
    flat = R.reshape(K, -1)
    norms = np.linalg.norm(flat, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero-norm covariance")
    gram = (flat.conj() @ flat.T).real / np.outer(norms, norms)
    D = np.clip(1.0 - gram, 0.0, 1.0)
    D = 0.5 * (D + D.T)
    np.fill_diagonal(D, 0.0)
    return D


def complete_linkage(dist: np.ndarray, merged: tuple[int, int], q: int) -> float:
    """Distance from the union of groups i, j to group q: max(C(i, q), C(j, q))."""
    i, j = merged
    return float(max(dist[i, q], dist[j, q]))


def agnes_from_distances(dist: np.ndarray, n_groups: int, method: str = "agnes") -> GroupingResult:
    """Complete-linkage agglomerative nesting on a precomputed distance table.

    Merges the closest pair of groups until ``n_groups`` remain. Ties go to
    the lexicographically smallest (i, j) slot pair, where a merged group
    keeps the lower slot index. The merge history is kept in ``merges``.
    """
    D = np.array(dist, dtype=float)
    K = D.shape[0]
    if not 1 <= n_groups <= K:
        raise ValueError(f"need 1 <= G <= K, got G={n_groups}, K={K}")
    members: dict[int, list[int]] = {k: [k] for k in range(K)}
    active = np.ones(K, dtype=bool)
    work = D.copy()
    np.fill_diagonal(work, np.inf)
    history = []
    for _ in range(K - n_groups):
        masked = np.where(np.outer(active, active), work, np.inf)
        masked[np.tril_indices(K)] = np.inf
        flat = int(np.argmin(masked))
        i, j = divmod(flat, K)
        for q in np.flatnonzero(active):
            if q != i and q != j:
                work[i, q] = work[q, i] = complete_linkage(work, (i, j), q)
        history.append((tuple(sorted(members[i])), tuple(sorted(members[j]))))
        members[i].extend(members.pop(j))
        active[j] = False
    return _canonical(members.values(), method, history)


def agnes(covariances: Sequence[np.ndarray], n_groups: int, method: str = "agnes-scsi") -> GroupingResult:
    if len(covariances) < n_groups:
        raise ValueError("fewer users than groups")
    return agnes_from_distances(cmd_matrix(covariances), n_groups, method)


def _correlation_distance(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    # rows of X and C are unit-norm; returns (len(X), len(C))
    return 1.0 - np.abs(X.conj() @ C.T) ** 2


def kmeans_baseline(
    channels: np.ndarray,
    n_groups: int,
    rng: np.random.Generator,
    max_iter: int = 50,
    tol: float = 1e-6,
) -> GroupingResult:
    """Correlation K-means on unit-normalized channel rows.

    Distance is 1 - |<x, c>|^2, so centroids are phase-free directions: each
    update takes the dominant eigenvector of the member scatter matrix.
    Seeding is farthest-point from an rng-chosen first user.
    """
    H = np.asarray([getattr(c, "h", c) for c in channels], dtype=complex)
    K = H.shape[0]
    if K < n_groups:
        raise ValueError("fewer users than groups")
    X = H / np.linalg.norm(H, axis=1, keepdims=True)

    chosen = [int(rng.integers(K))]
    while len(chosen) < n_groups:
        d = _correlation_distance(X, X[chosen]).min(axis=1)
        d[chosen] = -1.0
        chosen.append(int(np.argmax(d)))
    C = X[chosen].copy()

    labels = np.zeros(K, dtype=int)
    for _ in range(max_iter):
        labels = np.argmin(_correlation_distance(X, C), axis=1)
        _repair_empty(labels, X, C, n_groups)
        C_new = np.empty_like(C)
        for g in range(n_groups):
            Xg = X[labels == g]
            S = Xg.T @ Xg.conj()
            _, V = np.linalg.eigh(S)
            C_new[g] = V[:, -1]
        shift = np.max(1.0 - np.abs(np.sum(C.conj() * C_new, axis=1)) ** 2)
        C = C_new
        if shift < tol:
            break
    labels = np.argmin(_correlation_distance(X, C), axis=1)
    _repair_empty(labels, X, C, n_groups)
    return _canonical([np.flatnonzero(labels == g) for g in range(n_groups)], "kmeans-icsi")


def _repair_empty(labels: np.ndarray, X: np.ndarray, C: np.ndarray, n_groups: int) -> None:
    # steal the member of the largest cluster farthest from its centroid
    for g in range(n_groups):
        if np.any(labels == g):
            continue
        sizes = np.bincount(labels, minlength=n_groups)
        big = int(np.argmax(sizes))
        idx = np.flatnonzero(labels == big)
        d = _correlation_distance(X[idx], C[big : big + 1])[:, 0]
        labels[idx[int(np.argmax(d))]] = g
        C[g] = X[idx[int(np.argmax(d))]]

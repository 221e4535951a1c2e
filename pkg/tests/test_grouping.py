import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scsi_noma.channel import PathProfile, covariance, steering_vector
from scsi_noma.grouping import (
    GroupingResult,
    agnes,
    agnes_from_distances,
    cmd_distance,
    cmd_matrix,
    complete_linkage,
    kmeans_baseline,
)


def _random_cov(rng, n=8, rank=3):
    X = rng.standard_normal((n, rank)) + 1j * rng.standard_normal((n, rank))
    return X @ X.conj().T


def _valid(result: GroupingResult, K: int, G: int):
    assert result.n_groups == G
    assert sorted(u for g in result.groups for u in g) == list(range(K))
    assert all(len(g) > 0 for g in result.groups)


def test_cmd_self_is_zero():
    R = _random_cov(np.random.default_rng(0))
    assert cmd_distance(R, R) == pytest.approx(0.0, abs=1e-12)


def test_cmd_orthogonal_is_one():
    assert cmd_distance(np.diag([1.0, 0]), np.diag([0, 1.0])) == 1.0


def test_cmd_hand_value():
    # Tr = 1/sqrt(2), norms 1 and 1 -> 1 - 1/sqrt(2)
    d = cmd_distance(np.diag([1.0, 0]), np.diag([1.0, 1.0]) / np.sqrt(2))
    assert d == pytest.approx(1 - 1 / np.sqrt(2), abs=1e-15)


def test_cmd_zero_matrix_rejected():
    with pytest.raises(ValueError):
        cmd_distance(np.zeros((2, 2)), np.eye(2))


@settings(max_examples=50)
@given(st.integers(0, 2**31), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_cmd_symmetric_and_scale_invariant(seed, a, b):
    rng = np.random.default_rng(seed)
    Ri, Rj = _random_cov(rng), _random_cov(rng)
    d = cmd_distance(Ri, Rj)
    assert abs(d - cmd_distance(Rj, Ri)) <= 1e-12
    assert abs(d - cmd_distance(a * Ri, b * Rj)) <= 1e-12
    assert 0.0 <= d <= 1.0


def test_cmd_matrix_matches_pairwise():
    rng = np.random.default_rng(3)
    Rs = [_random_cov(rng) for _ in range(5)]
    D = cmd_matrix(Rs)
    for i in range(5):
        for j in range(5):
            if i != j:
                assert D[i, j] == pytest.approx(cmd_distance(Rs[i], Rs[j]), abs=1e-12)


def test_complete_linkage_is_max():
    D = np.array([[0, 0, 0.3], [0, 0, 0.7], [0.3, 0.7, 0]])
    assert complete_linkage(D, (0, 1), 2) == 0.7
    D = np.array([[0, 0, 0.5], [0, 0, 0.5], [0.5, 0.5, 0]])
    assert complete_linkage(D, (0, 1), 2) == 0.5


def test_agnes_hand_run_toy():
    # Hand run: merge (0,1) at 0.1; then C({0,1},2)=max(0.7,0.2)=0.7,
    # C({0,1},3)=0.9, C(2,3)=0.3 -> merge (2,3); finally C=max(0.7,0.9,...)=0.9.
    # Single linkage would instead attach 2 to {0,1} via 0.2.
    D = np.array(
        [
            [0.0, 0.1, 0.7, 0.9],
            [0.1, 0.0, 0.2, 0.8],
            [0.7, 0.2, 0.0, 0.3],
            [0.9, 0.8, 0.3, 0.0],
        ]
    )
    r = agnes_from_distances(D, 1)
    assert r.merges == (((0,), (1,)), ((2,), (3,)), ((0, 1), (2, 3)))
    assert agnes_from_distances(D, 2).groups == ((0, 1), (2, 3))


def test_agnes_no_merges_when_k_equals_g():
    rng = np.random.default_rng(0)
    r = agnes([_random_cov(rng) for _ in range(4)], 4)
    assert r.groups == ((0,), (1,), (2,), (3,))
    assert r.merges == ()


def test_agnes_tie_lowest_pair():
    D = np.full((4, 4), 0.5)
    np.fill_diagonal(D, 0)
    r = agnes_from_distances(D, 3)
    assert r.merges == (((0,), (1,)),)


def test_agnes_rejects_too_few_users():
    with pytest.raises(ValueError):
        agnes([np.eye(2)], 2)


def test_agnes_separated_angle_pairs():
    n = 8
    angles = np.deg2rad([-60, -59, 59, 60])
    Rs = [covariance(PathProfile([a], [1.0]), n) for a in angles]
    D = cmd_matrix(Rs)
    assert D[0, 1] < 0.1 and D[2, 3] < 0.1
    assert agnes(Rs, 2).groups == ((0, 1), (2, 3))


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 12), st.integers(1, 6), st.integers(0, 2**31))
def test_agnes_valid_partition(K, G, seed):
    G = min(G, K)
    rng = np.random.default_rng(seed)
    _valid(agnes([_random_cov(rng) for _ in range(K)], G), K, G)


@settings(max_examples=60)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=5), st.integers(0, 2**31))
def test_agnes_recovers_blocks(sizes, seed):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(len(sizes)), sizes)
    perm = rng.permutation(labels.size)
    labels = labels[perm]
    K = labels.size
    D = rng.uniform(0.0, 0.4, (K, K))
    cross = rng.uniform(0.6, 1.0, (K, K))
    D = np.where(labels[:, None] == labels[None, :], D, cross)
    D = np.triu(D, 1)
    D = D + D.T
    r = agnes_from_distances(D, len(sizes))
    truth = sorted(tuple(np.flatnonzero(labels == b)) for b in range(len(sizes)))
    assert sorted(r.groups) == truth


def test_kmeans_single_group():
    rng = np.random.default_rng(0)
    H = rng.standard_normal((5, 16)) + 1j * rng.standard_normal((5, 16))
    assert kmeans_baseline(H, 1, np.random.default_rng(1)).groups == ((0, 1, 2, 3, 4),)


def test_kmeans_orthogonal_users_separated():
    n = 64
    theta2 = np.arcsin(2 / n)  # exactly orthogonal grid point
    h1 = steering_vector(0.0, n).conj()
    h2 = steering_vector(theta2, n).conj()
    assert abs(np.vdot(h1, h2)) < 0.05
    r = kmeans_baseline(np.stack([h1, h2]), 2, np.random.default_rng(0))
    assert r.groups == ((0,), (1,))


def test_kmeans_deterministic_and_valid():
    rng = np.random.default_rng(5)
    H = rng.standard_normal((12, 32)) + 1j * rng.standard_normal((12, 32))
    a = kmeans_baseline(H, 4, np.random.default_rng(9))
    b = kmeans_baseline(H, 4, np.random.default_rng(9))
    assert a.groups == b.groups
    _valid(a, 12, 4)


def test_kmeans_repairs_empty_clusters():
    # identical users force empty clusters after assignment
    h = np.ones(8, dtype=complex)
    r = kmeans_baseline(np.stack([h] * 4), 3, np.random.default_rng(0))
    _valid(r, 4, 3)

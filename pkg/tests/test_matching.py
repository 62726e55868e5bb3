import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from itevalid.data import TrialDataset
from itevalid.matching import (
    GREEDY,
    MAHALANOBIS,
    MatchingError,
    MatchSpec,
    balance_subsample,
    mahalanobis_distances,
    match_pairs,
)


def brute_force_min(dist):
    n = dist.shape[0]
    return min(sum(dist[i, perm[i]] for i in range(n)) for perm in itertools.permutations(range(n)))


def test_identical_multisets_have_zero_distance():
    s = np.array([0.3, -0.1, 0.3, 0.7])
    m = match_pairs(MatchSpec(), s, s[::-1])
    assert m.total_distance == 0.0
    assert len(m) == 4


@pytest.mark.parametrize("n", [1, 2, 3, 4, 5, 6])
def test_scalar_optimal_equals_permutation_oracle(n):
    rng = np.random.default_rng(n)
    for _ in range(20):
        c, t = rng.random(n), rng.random(n)
        m = match_pairs(MatchSpec(), c, t)
        oracle = brute_force_min(np.abs(c[:, None] - t[None, :]))
        assert m.total_distance == pytest.approx(oracle, abs=1e-12)


@pytest.mark.parametrize("n", [2, 3, 4, 5, 6])
def test_mahalanobis_optimal_equals_permutation_oracle(n):
    rng = np.random.default_rng(100 + n)
    for _ in range(10):
        c, t = rng.standard_normal((n, 2)), rng.standard_normal((n, 2))
        m = match_pairs(MatchSpec(mode=MAHALANOBIS), c, t, cov=np.eye(2) * 1.5)
        oracle = brute_force_min(mahalanobis_distances(c, t, np.eye(2) * 1.5))
        assert m.total_distance == pytest.approx(oracle, abs=1e-12)


@pytest.mark.parametrize("n", [2, 5, 8])
def test_scalar_optimal_is_rank_pairing(n):
    rng = np.random.default_rng(200 + n)
    c, t = rng.random(n), rng.random(n)
    m = match_pairs(MatchSpec(), c, t)
    ranked = sorted(zip(np.argsort(c), np.argsort(t)))
    assert list(m.pairs) == [(int(i), int(j)) for i, j in ranked]
    if n <= 6:
        assert m.total_distance == pytest.approx(brute_force_min(np.abs(c[:, None] - t[None, :])), abs=1e-12)


def test_optimal_never_worse_than_greedy():
    rng = np.random.default_rng(9)
    for k in range(1000):
        n = int(rng.integers(2, 9))
        if k % 2:
            c, t = rng.standard_normal((n, 2)), rng.standard_normal((n, 2))
            mode = MAHALANOBIS
        else:
            c, t = rng.random(n), rng.random(n + int(rng.integers(0, 3)))
            mode = "scalar"
        opt = match_pairs(MatchSpec(mode=mode), c, t)
        gr = match_pairs(MatchSpec(mode=mode, algorithm=GREEDY), c, t)
        assert opt.total_distance <= gr.total_distance + 1e-12


def test_identity_covariance_gives_euclidean():
    rng = np.random.default_rng(10)
    c, t = rng.standard_normal((4, 2)), rng.standard_normal((5, 2))
    d = mahalanobis_distances(c, t, np.eye(2))
    assert np.allclose(d, np.linalg.norm(c[:, None, :] - t[None, :, :], axis=2), atol=1e-12)


def test_singular_covariance_rejected():
    c = np.column_stack([np.arange(4.0), 2 * np.arange(4.0)])
    with pytest.raises(MatchingError):
        match_pairs(MatchSpec(mode=MAHALANOBIS), c, c[::-1])
    with pytest.raises(MatchingError):
        mahalanobis_distances(c, c, cov=np.array([[1.0, 2.0], [2.0, 4.0]]))


def test_pairs_are_one_to_one_with_unequal_arms():
    rng = np.random.default_rng(11)
    m = match_pairs(MatchSpec(), rng.random(7), rng.random(4))
    assert len(m) == 4
    assert len(set(m.controls)) == 4 and len(set(m.treated)) == 4


def test_ties_go_to_lower_index():
    m = match_pairs(MatchSpec(), np.array([0.5, 0.5]), np.array([0.2, 0.9]))
    assert m.pairs == ((0, 0), (1, 1))


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 12), st.integers(0, 10_000))
def test_permutation_invariance(n, seed):
    rng = np.random.default_rng(seed)
    c, t = rng.random(n), rng.random(n)
    pc, pt = rng.permutation(n), rng.permutation(n)
    m = match_pairs(MatchSpec(), c, t)
    mp = match_pairs(MatchSpec(), c[pc], t[pt])
    assert mp.total_distance == pytest.approx(m.total_distance, abs=1e-12)
    # same individuals end up together
    assert {(int(pc[i]), int(pt[j])) for i, j in mp.pairs} == set(m.pairs)


def _trial(n0, n1):
    return TrialDataset(np.zeros(n0 + n1), np.r_[np.zeros(n0), np.ones(n1)], np.zeros((n0 + n1, 1)))


def test_balance_subsample_examples():
    sets = balance_subsample(_trial(10, 7), seed=1, repeats=3)
    assert len(sets) == 3
    d = _trial(10, 7)
    for s in sets:
        assert s.size == 14
        assert (d.a[s] == 1).sum() == 7 and (d.a[s] == 0).sum() == 7
    again = balance_subsample(_trial(10, 7), seed=1, repeats=3)
    assert all(np.array_equal(a, b) for a, b in zip(sets, again))
    full = balance_subsample(_trial(5, 5), seed=1, repeats=50)
    assert len(full) == 1 and np.array_equal(full[0], np.arange(10))
    with pytest.raises(ValueError):
        balance_subsample(_trial(5, 4), repeats=0)

"""Deterministic 1:1 matching of control to treated individuals.

Scalar mode matches on a single score (predicted effect or predicted control
risk) with absolute-difference cost. For equal arm sizes the optimal
assignment under that cost is the rank pairing (k-th smallest control with
k-th smallest treated), so no O(n^3) solver is needed there. Mahalanobis mode
matches covariate rows and uses the Hungarian solver for ``optimal``.

Ties are broken by lower original index.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .data import MatchedPairSet, TrialDataset

SCALAR = "scalar"
MAHALANOBIS = "mahalanobis"
OPTIMAL = "optimal"
GREEDY = "greedy"


class MatchingError(ValueError):
    pass


@dataclass(frozen=True)
class MatchSpec:
    mode: str = SCALAR
    algorithm: str = OPTIMAL
    seed: Optional[int] = 0
    label: str = "score"

    def __post_init__(self):
        if self.mode not in (SCALAR, MAHALANOBIS):
            raise ValueError(f"unknown matching mode {self.mode!r}")
        if self.algorithm not in (OPTIMAL, GREEDY):
            raise ValueError(f"unknown matching algorithm {self.algorithm!r}")


def _stable_order(scores: np.ndarray) -> np.ndarray:
    return np.argsort(scores, kind="stable")


def rank_pairs(control_scores, treated_scores) -> tuple[np.ndarray, np.ndarray]:
    """Pair the k-th smallest control with the k-th smallest treated score.

    Arms must have equal size. Returns (control positions, treated positions).
    """
    c = np.asarray(control_scores, dtype=float)
    t = np.asarray(treated_scores, dtype=float)
    if c.shape[0] != t.shape[0]:
        raise MatchingError("rank pairing needs equal arm sizes; balance the arms first")
    return _stable_order(c), _stable_order(t)


def _inverse_covariance(controls: np.ndarray, treated: np.ndarray, cov=None) -> np.ndarray:
    if cov is None:
        pooled = np.vstack([controls, treated])
        cov = np.atleast_2d(np.cov(pooled, rowvar=False))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if not np.all(np.isfinite(cov)):
        raise MatchingError("covariate covariance matrix is not finite")
    eig = np.linalg.eigvalsh(cov)
    # relative threshold: rounding leaves tiny positive eigenvalues on singular matrices
    if eig[0] <= max(eig[-1], 0.0) * cov.shape[0] * 1e-12:
        raise MatchingError("covariate covariance matrix is not positive definite")
    return np.linalg.inv(cov)


def mahalanobis_distances(controls, treated, cov=None) -> np.ndarray:
    """Matrix of d(x_i, x_j) = sqrt((x_i - x_j)' S^-1 (x_i - x_j)), controls on rows."""
    controls = np.atleast_2d(np.asarray(controls, dtype=float))
    treated = np.atleast_2d(np.asarray(treated, dtype=float))
    if controls.shape[1] < 1:
        raise MatchingError("mahalanobis matching needs at least one covariate")
    vi = _inverse_covariance(controls, treated, cov)
    return cdist(controls, treated, metric="mahalanobis", VI=vi)


def _greedy_nearest(dist: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n_c, n_t = dist.shape
    available = np.ones(n_c, dtype=bool)
    ci, tj = [], []
    for j in range(n_t):
        if not available.any():
            break
        col = np.where(available, dist[:, j], np.inf)
        i = int(np.argmin(col))  # argmin returns the first (lowest index) minimum
        available[i] = False
        ci.append(i)
        tj.append(j)
    return np.array(ci, dtype=int), np.array(tj, dtype=int)


def match_pairs(spec: MatchSpec, controls, treated, cov=None) -> MatchedPairSet:
    """Match controls to treated individuals 1:1.

    ``controls``/``treated`` are 1-d scores in scalar mode or covariate rows in
    mahalanobis mode. Returned indices refer to positions within the two
    inputs. With unequal sizes, ``min(n0, n1)`` pairs are formed.
    """
    controls = np.asarray(controls, dtype=float)
    treated = np.asarray(treated, dtype=float)
    if controls.shape[0] == 0 or treated.shape[0] == 0:
        raise MatchingError("both arms must be non-empty")

    if spec.mode == SCALAR:
        controls = controls.reshape(-1)
        treated = treated.reshape(-1)
        if controls.shape[0] == treated.shape[0]:
            ci, tj = rank_pairs(controls, treated)
        else:
            dist = np.abs(controls[:, None] - treated[None, :])
            ci, tj = _solve(dist, spec.algorithm)
        d = np.abs(controls[ci] - treated[tj])
    else:
        if controls.ndim == 1:
            controls = controls.reshape(-1, 1)
        if treated.ndim == 1:
            treated = treated.reshape(-1, 1)
        dist = mahalanobis_distances(controls, treated, cov)
        ci, tj = _solve(dist, spec.algorithm)
        d = dist[ci, tj]

    order = np.argsort(ci, kind="stable")
    pairs = tuple((int(ci[k]), int(tj[k])) for k in order)
    return MatchedPairSet(pairs, spec.label if spec.mode == SCALAR else MAHALANOBIS, float(np.sum(d)))


def _solve(dist: np.ndarray, algorithm: str):
    if algorithm == OPTIMAL:
        return linear_sum_assignment(dist)
    return _greedy_nearest(dist)


def subsample_matrix(n_large: int, m: int, repeats: int, rng: np.random.Generator) -> np.ndarray:
    """``repeats`` uniform size-``m`` subsets of ``range(n_large)``, each row sorted."""
    if m > n_large:
        raise ValueError("subset larger than arm")
    keys = rng.random((repeats, n_large))
    picks = np.argpartition(keys, m - 1, axis=1)[:, :m] if m < n_large else np.tile(np.arange(n_large), (repeats, 1))
    return np.sort(picks, axis=1)


def balance_subsample(d: TrialDataset, seed=None, repeats: int = 1000) -> list[np.ndarray]:
    """Index sets with the smaller arm kept whole and the larger arm subsampled to its size.

    Already balanced arms give the full index set once.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    ctrl, trt = d.controls, d.treated
    if ctrl.size == trt.size:
        return [np.arange(d.n)]
    small, large = (ctrl, trt) if ctrl.size < trt.size else (trt, ctrl)
    rng = np.random.default_rng(seed)
    picks = subsample_matrix(large.size, small.size, repeats, rng)
    return [np.sort(np.concatenate([small, large[row]])) for row in picks]

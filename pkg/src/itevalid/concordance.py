"""Discrimination statistics for predicted individualized treatment effects.

Conventions (event ``Y = 1`` is harmful):

* per individual the potential-outcome difference ``Y1 - Y0`` is -1 (benefit),
  0 (no effect) or +1 (harm);
* individual ``k`` shows more benefit than ``l`` when ``Y1_k - Y0_k < Y1_l - Y0_l``;
* a prediction pair is concordant when the individual with more benefit has
  the lower predicted effect ``delta``.

The model-based probability that ``k`` shows more benefit than ``l`` is
separable, ``P_ben(k, l) = B_k (1 - B_l) + N_k H_l`` with ``B = g0 (1 - g1)``,
``H = (1 - g0) g1`` and ``N = 1 - B - H``. All tie-tolerant concordance sums
are therefore computed in O(n log n) by sorting on ``delta`` and using
suffix sums of ``B``, ``H`` and counts over strictly larger predictions.
"""
from __future__ import annotations

import math
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from .data import MetricEstimate, RiskPredictionSet, TrialDataset
from .matching import MAHALANOBIS, MatchSpec, match_pairs, subsample_matrix

DEFAULT_REPEATS = 1000


# ---------------------------------------------------------------------------
# potential-outcome pattern probabilities


def pattern_probabilities(g0, g1):
    """Per-individual (benefit, harm, no-effect) probabilities under independence."""
    g0 = np.asarray(g0, dtype=float)
    g1 = np.asarray(g1, dtype=float)
    benefit = g0 * (1.0 - g1)
    harm = (1.0 - g0) * g1
    return benefit, harm, 1.0 - benefit - harm


def pair_benefit_prob(g0_k, g1_k, g0_l, g1_l):
    """Probability that ``k`` shows more benefit than ``l``: the five concordant patterns summed."""
    g0_k, g1_k, g0_l, g1_l = (np.asarray(v, dtype=float) for v in (g0_k, g1_k, g0_l, g1_l))
    k_benefit = (1 - g1_k) * g0_k
    l_harm = g1_l * (1 - g0_l)
    return (
        k_benefit * (1 - g1_l) * (1 - g0_l)
        + k_benefit * g1_l * g0_l
        + k_benefit * l_harm
        + (1 - g1_k) * (1 - g0_k) * l_harm
        + g1_k * g0_k * l_harm
    )


def pair_harm_prob(g0_k, g1_k, g0_l, g1_l):
    return pair_benefit_prob(g0_l, g1_l, g0_k, g1_k)


def pair_no_effect_prob(g0_k, g1_k, g0_l, g1_l):
    """Probability that both individuals show the same potential-outcome difference."""
    bk, hk, nk = pattern_probabilities(g0_k, g1_k)
    bl, hl, nl = pattern_probabilities(g0_l, g1_l)
    return bk * bl + hk * hl + nk * nl


# ---------------------------------------------------------------------------
# O(n log n) engine


def _benefit_concordance_sums(delta, benefit, harm, tie_weight=0.5):
    """Numerator and denominator of the tie-tolerant benefit concordance.

    numerator   = sum_{k != l} [I(d_k < d_l) + tie_weight I(d_k = d_l)] P_ben(k, l)
    denominator = sum_{k != l} P_ben(k, l)
    """
    delta = np.asarray(delta, dtype=float)
    benefit = np.asarray(benefit, dtype=float)
    harm = np.asarray(harm, dtype=float)
    none = 1.0 - benefit - harm
    n = delta.shape[0]

    keys, inv = np.unique(delta, return_inverse=True)
    g = keys.shape[0]
    cnt = np.bincount(inv, minlength=g).astype(float)
    b = np.bincount(inv, weights=benefit, minlength=g)
    h = np.bincount(inv, weights=harm, minlength=g)
    nn = np.bincount(inv, weights=none, minlength=g)
    bb = np.bincount(inv, weights=benefit * (1.0 - benefit), minlength=g)
    nh = np.bincount(inv, weights=none * harm, minlength=g)

    # sums over groups with strictly larger delta
    def above(v):
        s = np.cumsum(v[::-1])[::-1]
        return np.concatenate([s[1:], [0.0]])

    strict = b * above(cnt) - b * above(b) + nn * above(h)
    ties = (b * (cnt - b) - bb) + (nn * h - nh)
    num = math.fsum(strict) + tie_weight * math.fsum(ties)

    btot, htot, ntot = math.fsum(benefit), math.fsum(harm), math.fsum(none)
    den = btot * (n - btot) - math.fsum(benefit * (1.0 - benefit)) + ntot * htot - math.fsum(none * harm)
    return num, den


def _pairwise_concordance_sums(delta, benefit, harm, tie_weight=0.5, block=1024):
    """Same sums by explicit blockwise enumeration of ordered pairs.

    Block partial sums are combined with exactly rounded summation so the
    result does not depend on block size beyond within-block rounding.
    """
    delta = np.asarray(delta, dtype=float)
    benefit = np.asarray(benefit, dtype=float)
    harm = np.asarray(harm, dtype=float)
    none = 1.0 - benefit - harm
    n = delta.shape[0]
    nums, dens = [], []
    for start in range(0, n, block):
        stop = min(start + block, n)
        k = slice(start, stop)
        p = benefit[k, None] * (1.0 - benefit[None, :]) + none[k, None] * harm[None, :]
        rows = np.arange(start, stop)
        p[rows - start, rows] = 0.0
        w = (delta[k, None] < delta[None, :]) + tie_weight * (delta[k, None] == delta[None, :])
        nums.append(np.sum(w * p))
        dens.append(np.sum(p))
    return math.fsum(nums), math.fsum(dens)


def _ratio_estimate(name, num, den, context, **meta):
    if not den > 0:
        return MetricEstimate.non_estimable(name, context, "no benefit-ordered probability mass", denominator=den, **meta)
    return MetricEstimate(name, min(max(num / den, 0.0), 1.0), context, {"denominator": den, **meta})


def mbcb(
    preds: RiskPredictionSet,
    benefit_preds: Optional[RiskPredictionSet] = None,
    *,
    context: str = "apparent",
    method: str = "sorted",
) -> MetricEstimate:
    """Model-based c-for-benefit.

    ``preds`` supplies the predicted effects being ranked; ``benefit_preds``
    (default: the same predictions) supplies ``g0``/``g1`` for the benefit
    probabilities. Passing a locally refitted model there gives a validation
    estimate instead of the model-implied expectation.
    """
    src = preds if benefit_preds is None else benefit_preds
    if len(src) != len(preds):
        raise ValueError("benefit predictions must align with effect predictions")
    if len(preds) < 2:
        return MetricEstimate.non_estimable("mbcb", context, "need n >= 2")
    b, h, _ = pattern_probabilities(src.g0, src.g1)
    sums = _pairwise_concordance_sums if method == "pairwise" else _benefit_concordance_sums
    num, den = sums(preds.delta, b, h)
    return _ratio_estimate("mbcb", num, den, context, n=len(preds))


def concordance_probability_variant(preds: RiskPredictionSet, benefit_preds: Optional[RiskPredictionSet] = None) -> float:
    """Benefit-or-harm concordance probability (no tie credit); diagnostic only.

    sum [I(d_k<d_l) P_ben(k,l) + I(d_k>d_l) P_harm(k,l)] / sum [P_ben + P_harm].
    Since ``P_harm(k, l) = P_ben(l, k)`` both halves are equal, which reduces
    it to the strict-order part of :func:`mbcb` over the same denominator.
    """
    src = preds if benefit_preds is None else benefit_preds
    b, h, _ = pattern_probabilities(src.g0, src.g1)
    num, den = _benefit_concordance_sums(preds.delta, b, h, tie_weight=0.0)
    return num / den if den > 0 else float("nan")


def c_delta_ben(delta, y0, y1, *, context: str = "population_reference") -> MetricEstimate:
    """Harrell-type concordance of predicted effects with realized potential-outcome differences."""
    y0 = np.asarray(y0)
    y1 = np.asarray(y1)
    diff = y1.astype(int) - y0.astype(int)
    b = (diff == -1).astype(float)
    h = (diff == 1).astype(float)
    num, den = _benefit_concordance_sums(delta, b, h)
    if den == 0:
        return MetricEstimate.non_estimable("mbcb", context, "no pair with ordered potential-outcome differences")
    return MetricEstimate("mbcb", min(max(num / den, 0.0), 1.0), context, {"denominator": den, "n": int(diff.size)})


def sample_reference_mbcb(preds: RiskPredictionSet, p0, p1, *, context: str = "sample_reference") -> MetricEstimate:
    """mbcb with the true benefit probabilities (known event probabilities) substituted."""
    return mbcb(preds, RiskPredictionSet.from_probs(p0, p1), context=context)


# ---------------------------------------------------------------------------
# matched c-for-benefit


def ordinal_concordance(scores, outcome):
    """Harrell concordance sums for an outcome with few ordered levels.

    Over pairs with unequal outcome, counts the pair as concordant when the
    member with the higher outcome has the higher score (ties in score: 1/2).
    Works row-wise on 2-d input. Returns (numerator, denominator) arrays.
    """
    s = np.atleast_2d(np.asarray(scores, dtype=float))
    o = np.atleast_2d(np.asarray(outcome))
    levels = np.unique(o)
    num = np.zeros(s.shape[0])
    den = np.zeros(s.shape[0])
    counts = {v: (o == v).sum(axis=1) for v in levels}
    for idx, v in enumerate(levels[1:], start=1):
        at = o == v
        # ranks among members at or below level v, minus ranks within level v
        r_le = rankdata(np.where(o <= v, s, np.inf), axis=1)
        r_eq = rankdata(np.where(at, s, np.inf), axis=1)
        num += np.where(at, r_le - r_eq, 0.0).sum(axis=1)
        below = sum(counts[u] for u in levels[:idx])
        den += counts[v] * below
    return num, den


def _arm_subsets(d: TrialDataset, repeats: int, rng):
    ctrl, trt = d.controls, d.treated
    if ctrl.size == trt.size:
        return ctrl[None, :], trt[None, :]
    if ctrl.size < trt.size:
        picks = subsample_matrix(trt.size, ctrl.size, repeats, rng)
        return np.tile(ctrl, (repeats, 1)), trt[picks]
    picks = subsample_matrix(ctrl.size, trt.size, repeats, rng)
    return ctrl[picks], np.tile(trt, (repeats, 1))


def _rank_matched(match_scores, C, T):
    oc = np.argsort(match_scores[C], axis=1, kind="stable")
    ot = np.argsort(match_scores[T], axis=1, kind="stable")
    return np.take_along_axis(C, oc, axis=1), np.take_along_axis(T, ot, axis=1)


def _mahalanobis_matched(X, C, T, spec):
    Cs, Ts = np.empty_like(C), np.empty_like(T)
    for r in range(C.shape[0]):
        mp = match_pairs(spec, X[C[r]], X[T[r]])
        Cs[r] = C[r][mp.controls]
        Ts[r] = T[r][mp.treated]
    return Cs, Ts


def _matched_cben(name, d, pair_effect, match_scores, spec, repeats, seed, context):
    if d.outcome_kind != "binary":
        raise ValueError(f"{name} requires binary outcomes")
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    C, T = _arm_subsets(d, repeats, rng)
    if spec.mode == MAHALANOBIS:
        Cs, Ts = _mahalanobis_matched(d.X, C, T, spec)
    else:
        Cs, Ts = _rank_matched(match_scores, C, T)
    observed = d.y[Cs] - d.y[Ts]  # +1: control had the event, treated did not
    predicted = pair_effect(Cs, Ts)
    num, den = ordinal_concordance(-predicted, observed)
    ok = den > 0
    meta = {"pairs": int(Cs.shape[1]), "repeats": int(Cs.shape[0]), "estimable_repeats": int(ok.sum())}
    if not ok.any():
        return MetricEstimate.non_estimable(name, context, "no matched pairs with unequal observed benefit", **meta)
    values = num[ok] / den[ok]
    return MetricEstimate(name, float(np.mean(values)), context, meta)


def cben_delta(
    d: TrialDataset,
    preds: RiskPredictionSet,
    spec: Optional[MatchSpec] = None,
    *,
    repeats: int = DEFAULT_REPEATS,
    seed=None,
    context: str = "apparent",
) -> MetricEstimate:
    """c-for-benefit with 1:1 matching on predicted effect.

    Each pair's predicted effect is the mean of its two members' ``delta``;
    observed benefit is ``y_control - y_treated``. Unequal arms are handled by
    averaging over ``repeats`` random subsamples of the larger arm.
    """
    spec = spec or MatchSpec(label="delta")
    delta = preds.delta
    return _matched_cben(
        "cben_delta", d, lambda C, T: (delta[C] + delta[T]) / 2.0, delta, spec, repeats, seed, context
    )


def cben_y0(
    d: TrialDataset,
    preds_for_delta: RiskPredictionSet,
    preds_for_matching: Optional[RiskPredictionSet] = None,
    spec: Optional[MatchSpec] = None,
    *,
    repeats: int = DEFAULT_REPEATS,
    seed=None,
    context: str = "apparent",
) -> MetricEstimate:
    """c-for-benefit with 1:1 matching on predicted control risk.

    The predicted effect of a pair is the treated member's ``delta``.
    ``preds_for_matching`` may come from a control-arm model refitted in the
    evaluation data.
    """
    spec = spec or MatchSpec(label="g0")
    match = preds_for_delta if preds_for_matching is None else preds_for_matching
    delta = preds_for_delta.delta
    return _matched_cben("cben_y0", d, lambda C, T: delta[T], match.g0, spec, repeats, seed, context)


# ---------------------------------------------------------------------------
# outcome-level performance


def c_outcome(y, risk, *, context: str = "apparent") -> MetricEstimate:
    """Ordinary c-statistic of risk predictions against binary outcomes."""
    y = np.asarray(y)
    risk = np.asarray(risk, dtype=float)
    n1 = int((y == 1).sum())
    n0 = int((y == 0).sum())
    if n1 == 0 or n0 == 0:
        return MetricEstimate.non_estimable("c_outcome", context, "outcomes are all equal")
    num, den = ordinal_concordance(risk, y)
    return MetricEstimate("c_outcome", float(num[0] / den[0]), context, {"n": int(y.size)})


def brier(y, risk, *, context: str = "apparent") -> MetricEstimate:
    y = np.asarray(y, dtype=float)
    risk = np.asarray(risk, dtype=float)
    return MetricEstimate("brier", float(np.mean((risk - y) ** 2)), context, {"n": int(y.size)})

"""Conformal quantiles, region radii, posterior risk and likelihood weighting.

Scores are plain 1-D float arrays whose position is the index into the
calibration split they came from. Prediction-error scores (``R``) are
nonnegative; constraint-margin scores (``S``) are signed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .constraints import ConstraintSpec, constraint_margin
from .errors import InvalidInput, PreconditionError


def _as_scores(scores) -> np.ndarray:
    arr = np.asarray(scores, dtype=float).ravel()
    if np.isnan(arr).any():
        raise InvalidInput("scores contain NaN")
    return arr


def _check_level(level: float) -> float:
    level = float(level)
    if not 0.0 < level < 1.0:
        raise InvalidInput(f"quantile level must lie in (0, 1), got {level}")
    return level


def order_statistic_index(n_atoms: int, level: float) -> int:
    """Smallest ``k`` with ``k / n_atoms >= level`` (1-based).

    Evaluated with the same floating-point division a direct count would use,
    so it agrees exactly with ``inf{z : #{score <= z} / n_atoms >= level}``.
    """
    k = max(1, math.ceil(n_atoms * level))
    while k > 1 and (k - 1) / n_atoms >= level:
        k -= 1
    while k / n_atoms < level:
        k += 1
    return k


def empirical_quantile(scores, level: float, augmented: bool = True) -> float:
    """Level-``level`` quantile of the empirical score distribution.

    With ``augmented=True`` an atom at ``+inf`` is appended, so over ``K`` scores
    the result is the ``k``-th smallest score with ``k = ceil((K + 1) * level)``,
    or ``inf`` when ``k > K``.
    """
    level = _check_level(level)
    s = _as_scores(scores)
    n = s.size
    if not augmented and n == 0:
        raise InvalidInput("empty score list")
    k = order_statistic_index(n + 1 if augmented else n, level)
    if k > n:
        return math.inf
    return float(np.partition(s, k - 1)[k - 1])


def region_radius(calib_scores, alpha_tau: float) -> float:
    """Conformal radius ``C^{1-alpha}`` from nonnegative prediction-error scores."""
    alpha_tau = float(alpha_tau)
    if not 0.0 < alpha_tau < 1.0:
        raise InvalidInput(f"alpha_tau must lie in (0, 1), got {alpha_tau}")
    return empirical_quantile(calib_scores, 1.0 - alpha_tau, augmented=True)


def radii_from_sorted(sorted_scores: np.ndarray, alphas) -> np.ndarray:
    """Vectorised :func:`region_radius` over rows of pre-sorted scores.

    ``sorted_scores`` has shape ``(n_steps, K)`` with each row ascending and
    ``alphas`` has length ``n_steps``.
    """
    sorted_scores = np.asarray(sorted_scores, dtype=float)
    alphas = np.asarray(alphas, dtype=float)
    n_steps, K = sorted_scores.shape
    if alphas.shape != (n_steps,):
        raise InvalidInput("one alpha per step required")
    if np.any((alphas <= 0) | (alphas >= 1)):
        raise InvalidInput("alphas must lie in (0, 1)")
    out = np.full(n_steps, np.inf)
    for i, a in enumerate(alphas):
        k = order_statistic_index(K + 1, 1.0 - a)
        if k <= K:
            out[i] = sorted_scores[i, k - 1]
    return out


@dataclass(frozen=True)
class LikelihoodWeights:
    """Normalised covariate-shift weights; the test weight sits on the ``+inf`` atom."""

    calib_weights: np.ndarray
    test_weight: float

    def __post_init__(self):
        w = np.asarray(self.calib_weights, dtype=float).ravel()
        object.__setattr__(self, "calib_weights", w)
        object.__setattr__(self, "test_weight", float(self.test_weight))
        if np.any(w < 0) or self.test_weight < 0 or not np.all(np.isfinite(w)):
            raise InvalidInput("weights must be finite and nonnegative")
        total = math.fsum(w) + self.test_weight
        if abs(total - 1.0) > 1e-12:
            raise InvalidInput(f"weights must sum to 1, got {total!r}")

    @property
    def is_uniform(self) -> bool:
        return bool(np.all(self.calib_weights == self.test_weight))

    @classmethod
    def uniform(cls, n: int) -> "LikelihoodWeights":
        w = 1.0 / (n + 1)
        return cls(np.full(n, w), w)


def likelihood_weights(ratio_values, test_ratio: float) -> LikelihoodWeights:
    """Normalise likelihood ratios of calibration points and the test point."""
    v = np.asarray(ratio_values, dtype=float).ravel()
    test_ratio = float(test_ratio)
    if not (np.all(np.isfinite(v)) and np.all(v > 0) and math.isfinite(test_ratio) and test_ratio > 0):
        raise InvalidInput("likelihood ratios must be positive and finite")
    total = math.fsum(v) + test_ratio
    calib = v / total
    test = test_ratio / total
    # renormalise the rounding residue onto the test atom so the sum is 1 to 1e-12
    if np.all(v == test_ratio):
        return LikelihoodWeights(np.full(v.size, test), test)
    return LikelihoodWeights(calib, 1.0 - math.fsum(calib))


def weighted_quantile(scores, weights: LikelihoodWeights, level: float) -> float:
    """Quantile of ``sum_i w_i delta_{score_i} + w_test delta_inf``.

    Returns ``inf{z : sum_{score_i <= z} w_i >= level}``, or ``inf`` when the
    finite mass never reaches ``level``. Uniform weights take the unweighted
    order-statistic path, so the two agree bit for bit.
    """
    level = _check_level(level)
    s = _as_scores(scores)
    if s.size != weights.calib_weights.size:
        raise InvalidInput("scores and weights differ in length")
    if weights.is_uniform:
        return empirical_quantile(s, level, augmented=True)
    order = np.argsort(s, kind="stable")
    cum = np.cumsum(weights.calib_weights[order])
    idx = int(np.searchsorted(cum, level, side="left"))
    if idx >= s.size:
        return math.inf
    return float(s[order[idx]])


def _s_scores(realized_ego, predicted_center, calib_errors, constraint: ConstraintSpec) -> np.ndarray:
    errs = np.asarray(calib_errors, dtype=float)
    if errs.ndim == 1:
        errs = errs[None, :]
    if errs.shape[0] == 0:
        raise InvalidInput("posterior risk needs at least one calibration error")
    center = np.asarray(predicted_center, dtype=float).ravel()
    if errs.shape[1] != center.size:
        raise InvalidInput("error vectors and predicted center differ in dimension")
    return constraint_margin(constraint, np.asarray(realized_ego, dtype=float)[:2], center[None, :] + errs)


def posterior_risk(realized_ego, predicted_center, calib_errors, constraint: ConstraintSpec) -> float:
    """Upper bound on the violation probability at a realized ego position.

    Counts the cal2 error vectors that, added to the one-step prediction,
    would put an obstacle inside the collision radius:
    ``beta = (1 + #{i : c(x, Yhat + w_i) < 0}) / (1 + L)``.
    """
    s = _s_scores(realized_ego, predicted_center, calib_errors, constraint)
    return (1 + int(np.count_nonzero(s < 0))) / (1 + s.size)


def weighted_posterior_risk(realized_ego, predicted_center, calib_errors, constraint: ConstraintSpec,
                            weights: LikelihoodWeights) -> float:
    """Likelihood-weighted form of :func:`posterior_risk`."""
    s = _s_scores(realized_ego, predicted_center, calib_errors, constraint)
    if s.size != weights.calib_weights.size:
        raise InvalidInput("errors and weights differ in length")
    if weights.is_uniform:
        return (1 + int(np.count_nonzero(s < 0))) / (1 + s.size)
    beta = weights.test_weight + math.fsum(weights.calib_weights[s < 0])
    return min(beta, 1.0)


def risk_lower_bound_from_clearance(clearance: float, calib_scores, lipschitz: float = 1.0) -> float:
    """Smallest risk whose radius still fits inside a known clearance.

    ``(1 + #{i : clearance < L * R_i}) / (1 + K)``; the result is never below
    ``1 / (1 + K)``, which keeps the matching radius finite.
    """
    r = _as_scores(calib_scores)
    return (1 + int(np.count_nonzero(clearance < lipschitz * r))) / (1 + r.size)


def risk_lower_bound(planned_ego, center, calib_scores, constraint: ConstraintSpec,
                     lipschitz: float | None = None) -> float:
    """Tightest risk for a planned position that keeps the plan feasible.

    The planned position must satisfy ``c(planned_ego, center) >= L * C`` for
    the incumbent radius ``C``; the bound is then at most the incumbent risk.
    """
    lip = constraint.lipschitz if lipschitz is None else float(lipschitz)
    clearance = constraint_margin(constraint, np.asarray(planned_ego, dtype=float)[:2], center)
    return risk_lower_bound_from_clearance(clearance, calib_scores, lip)


def expected_beta_bound(alpha_tau: float, K: int, L: int, delta: float) -> float:
    """High-probability bound on the expected posterior risk.

    With probability at least ``1 - delta`` over the cal1 draw,
    ``E[beta] <= (1 + L (alpha + sqrt(-ln(delta) / (2K)))) / (1 + L)``.
    Requires ``K > -ln(delta) / (2 alpha^2)``.
    """
    if not 0.0 < delta < 1.0:
        raise InvalidInput("delta must lie in (0, 1)")
    if not 0.0 < alpha_tau < 1.0:
        raise InvalidInput("alpha_tau must lie in (0, 1)")
    if K < 1 or L < 0:
        raise InvalidInput("K must be positive and L nonnegative")
    threshold = -math.log(delta) / (2.0 * alpha_tau ** 2)
    if not K > threshold:
        raise PreconditionError(f"K={K} must exceed {threshold:.3f}", minimum=math.floor(threshold) + 1)
    return (1.0 + L * (alpha_tau + math.sqrt(-math.log(delta) / (2.0 * K)))) / (1.0 + L)

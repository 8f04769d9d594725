"""Server-side aggregation of device updates into new global parameters.

Five rules, from plain averaging to correlation-weighted variants that
score each update by the inner product of the device's gradient with an
estimate of the global gradient.  Updates enter as multisets: an update
selected twice appears twice and carries double weight.

Weighted sums run single-threaded in multiset order so results are
reproducible bit for bit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .local_solver import LocalUpdate
from .numerics import dot, l2_norm_sq

logger = logging.getLogger(__name__)

# a correlation denominator this small means the round sits at a stationary
# point; the rules below fall back to plain averaging instead of dividing
DEGENERATE_EPS = 1e-12


@dataclass(frozen=True)
class AggregationReport:
    """New parameters plus the per-update weights that produced them."""

    params: np.ndarray
    weights: tuple[float, ...]  # aligned 1:1 with the update multiset
    grad_estimate: np.ndarray | None = None  # mean gradient over the update set
    grad_estimate_2: np.ndarray | None = None  # mean gradient over the scoring set
    denominator: float | None = None
    fallback: bool = False


def _require_updates(updates):
    if not updates:
        raise ValueError("cannot aggregate an empty update multiset")


def _mean_gradient(grads) -> np.ndarray:
    total = np.zeros_like(grads[0])
    for g in grads:
        total = total + g
    return total / len(grads)


def estimate_global_gradient(updates: list[LocalUpdate]) -> np.ndarray:
    """Mean of the devices' center gradients over the multiset (repeats count)."""
    _require_updates(updates)
    return _mean_gradient([u.grad_at_center for u in updates])


def _apply_deltas(center: np.ndarray, updates, weights) -> np.ndarray:
    params = center.copy()
    for w, u in zip(weights, updates):
        params = params + w * u.delta
    return params


def aggregate_average(center: np.ndarray, updates: list[LocalUpdate]) -> AggregationReport:
    """Plain mean of the updated parameter vectors (weight 1/K each)."""
    _require_updates(updates)
    k = len(updates)
    total = np.zeros_like(updates[0].w_next)
    for u in updates:
        total = total + u.w_next
    return AggregationReport(params=total / k, weights=(1.0 / k,) * k)


def aggregate_signed(
    center: np.ndarray, updates: list[LocalUpdate], global_grad: np.ndarray
) -> AggregationReport:
    """Averaging with sign correction: deltas from devices whose gradient
    anti-aligns with the (exact) global gradient enter negated.

    A zero inner product keeps the positive sign.
    """
    _require_updates(updates)
    k = len(updates)
    weights = []
    for u in updates:
        sign = 1.0 if dot(global_grad, u.grad_at_center) >= 0.0 else -1.0
        weights.append(sign / k)
    return AggregationReport(
        params=_apply_deltas(center, updates, weights),
        weights=tuple(weights),
    )


def aggregate_folb_two_set(
    center: np.ndarray,
    updates: list[LocalUpdate],
    scoring_grads: list[np.ndarray],
) -> AggregationReport:
    """Correlation-weighted aggregation with an independent scoring multiset.

    Each update's weight is its gradient's inner product with the update
    set's mean gradient, normalized by the scoring set's total
    self-correlation (a signed sum, used as written).  When that denominator
    degenerates to ~0 the round falls back to plain averaging.
    """
    _require_updates(updates)
    if not scoring_grads:
        raise ValueError("scoring multiset must be nonempty")
    g1 = estimate_global_gradient(updates)
    g2 = _mean_gradient(scoring_grads)
    denominator = 0.0
    for g in scoring_grads:
        denominator += dot(g, g2)
    if abs(denominator) < DEGENERATE_EPS:
        logger.warning("two-set aggregation: degenerate denominator %.3e, averaging", denominator)
        base = aggregate_average(center, updates)
        return AggregationReport(
            params=base.params,
            weights=base.weights,
            grad_estimate=g1,
            grad_estimate_2=g2,
            denominator=denominator,
            fallback=True,
        )
    weights = [dot(u.grad_at_center, g1) / denominator for u in updates]
    return AggregationReport(
        params=_apply_deltas(center, updates, weights),
        weights=tuple(weights),
        grad_estimate=g1,
        grad_estimate_2=g2,
        denominator=denominator,
    )


def aggregate_folb_single(center: np.ndarray, updates: list[LocalUpdate]) -> AggregationReport:
    """Single-set correlation weighting; absolute weights sum to one.

    Weights are the signed alignment scores normalized by the sum of their
    absolute values, so anti-aligned updates enter negated rather than
    being discarded.
    """
    _require_updates(updates)
    g1 = estimate_global_gradient(updates)
    scores = [dot(u.grad_at_center, g1) for u in updates]
    denominator = 0.0
    for s in scores:
        denominator += abs(s)
    if denominator < DEGENERATE_EPS:
        logger.warning("single-set aggregation: all scores ~0, averaging")
        base = aggregate_average(center, updates)
        return AggregationReport(
            params=base.params,
            weights=base.weights,
            grad_estimate=g1,
            denominator=denominator,
            fallback=True,
        )
    weights = [s / denominator for s in scores]
    return AggregationReport(
        params=_apply_deltas(center, updates, weights),
        weights=tuple(weights),
        grad_estimate=g1,
        denominator=denominator,
    )


def aggregate_folb_het(
    center: np.ndarray, updates: list[LocalUpdate], psi: float
) -> AggregationReport:
    """Heterogeneity-aware correlation weighting.

    Alignment scores are discounted by each device's measured solver
    inexactness: ``I_k = <grad_k, g1> - psi * gamma_k * |g1|^2``.  With
    ``psi == 0``, or all gammas zero, this matches the single-set rule
    bit for bit.
    """
    _require_updates(updates)
    g1 = estimate_global_gradient(updates)
    gsq = l2_norm_sq(g1)
    scores = [dot(u.grad_at_center, g1) - psi * u.gamma * gsq for u in updates]
    denominator = 0.0
    for s in scores:
        denominator += abs(s)
    if denominator < DEGENERATE_EPS:
        logger.warning("heterogeneity-aware aggregation: all scores ~0, averaging")
        base = aggregate_average(center, updates)
        return AggregationReport(
            params=base.params,
            weights=base.weights,
            grad_estimate=g1,
            denominator=denominator,
            fallback=True,
        )
    weights = [s / denominator for s in scores]
    return AggregationReport(
        params=_apply_deltas(center, updates, weights),
        weights=tuple(weights),
        grad_estimate=g1,
        denominator=denominator,
    )

"""Device-selection distributions over the N participating devices.

All constructors return a normalized :class:`SelectionDistribution`.  The
degenerate all-zero-score case (which occurs at convergence) falls back to
the uniform distribution with a logged notice instead of failing the round.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .numerics import dot, l2_norm, l2_norm_sq, sample_categorical

logger = logging.getLogger(__name__)

KINDS = ("uniform", "lb_near_optimal", "norm_proportional", "lbh")


@dataclass(frozen=True)
class SelectionDistribution:
    kind: str
    probs: np.ndarray

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown selection kind {self.kind!r}")
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or p.size == 0:
            raise ValueError("probability vector must be nonempty and 1-D")
        if np.any(p < 0.0):
            raise ValueError("selection probabilities must be nonnegative")
        total = float(np.sum(p))
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"selection probabilities sum to {total!r}")
        object.__setattr__(self, "probs", p)

    @property
    def n_devices(self) -> int:
        return self.probs.size

    def sample(self, count: int, rng) -> np.ndarray:
        """Draw a multiset of ``count`` device indices (with replacement)."""
        return sample_categorical(self.probs, count, rng)


def _normalized(kind: str, scores: np.ndarray, n: int) -> SelectionDistribution:
    total = float(np.sum(scores))
    if total <= 0.0 or not np.isfinite(total):
        logger.info("selection %s: all scores zero, falling back to uniform", kind)
        return uniform_distribution(n)
    return SelectionDistribution(kind, scores / total)


def uniform_distribution(n: int) -> SelectionDistribution:
    if n < 1:
        raise ValueError("need at least one device")
    return SelectionDistribution("uniform", np.full(n, 1.0 / n))


def lb_near_optimal_distribution(local_grads, global_grad) -> SelectionDistribution:
    """Selection probabilities proportional to |<global grad, local grad_k>|.

    This is the near-optimal distribution for the per-round loss-decrease
    lower bound: devices whose gradients align (or anti-align) most strongly
    with the global gradient are selected most often.
    """
    scores = np.array([abs(dot(global_grad, g)) for g in local_grads])
    return _normalized("lb_near_optimal", scores, len(scores))


def norm_proportional_distribution(local_grads) -> SelectionDistribution:
    """Cheaper surrogate: probabilities proportional to |local grad_k|.

    Upper-bounds the alignment scores via Cauchy-Schwarz, needing only one
    scalar upload per device.
    """
    scores = np.array([l2_norm(g) for g in local_grads])
    return _normalized("norm_proportional", scores, len(scores))


def lbh_distribution(local_grads, global_grad, gammas, psi: float) -> SelectionDistribution:
    """Heterogeneity-aware selection: alignment discounted by solver quality.

    Scores are |I_k| with ``I_k = <global, local_k> - psi * gamma_k *
    |global|^2``; a device with a weak solver (gamma_k near 1) is penalized
    in proportion to ``psi``.  With ``psi == 0`` this reduces to the plain
    alignment distribution.
    """
    gammas = np.asarray(gammas, dtype=np.float64)
    if len(local_grads) != gammas.size:
        raise ValueError("need one gamma per local gradient")
    gsq = l2_norm_sq(global_grad)
    scores = np.array(
        [abs(dot(global_grad, g) - psi * gam * gsq) for g, gam in zip(local_grads, gammas)]
    )
    return _normalized("lbh", scores, len(scores))

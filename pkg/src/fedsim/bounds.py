"""Numeric verification lab for the per-round loss-decrease guarantees.

This module estimates the smoothness/dissimilarity constants the guarantees
assume, evaluates the guaranteed right-hand sides exactly as stated, and
checks them against Monte-Carlo estimates of the actual expected loss after
one aggregation step.  It also provides brute-force oracles for the
combinatorial sampling identities that justify the correlation-weighted
aggregation rules.

CLI bound kinds map to evaluators as follows:

* ``thm1``  -- plain averaging under an arbitrary selection distribution
* ``prop1`` -- sign-corrected averaging (absolute alignment sum)
* ``def1``  -- plain averaging under the alignment-proportional distribution
* ``prop2`` -- single-set correlation-weighted aggregation, uniform sampling
* ``thm3``  -- averaging with per-device solver inexactness discounts
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .aggregation import (
    aggregate_average,
    aggregate_folb_single,
    aggregate_signed,
)
from .data import DataShard
from .local_solver import LocalUpdate
from .models import LossModel
from .numerics import RngStream, dot, l2_norm, l2_norm_sq, sample_categorical
from .selection import lb_near_optimal_distribution

BOUND_KINDS = ("thm1", "prop1", "def1", "prop2", "thm3")


@dataclass(frozen=True)
class ModelConstants:
    """Empirical estimates of the constants the loss-decrease bounds consume.

    ``lipschitz`` bounds the gradient Lipschitz constant of every local
    loss, ``dissimilarity`` bounds |local grad| / |global grad| along the
    trajectory, and ``curvature`` is the magnitude of the most negative
    Hessian eigenvalue seen (0 for convex models: the estimator never
    claims strong convexity).  ``gamma_bar`` is the largest observed solver
    inexactness.
    """

    lipschitz: float
    dissimilarity: float
    curvature: float
    mu: float
    gamma_bar: float = 1.0

    @property
    def mu_prime(self) -> float:
        return self.mu - self.curvature

    def require_valid(self):
        if not self.mu_prime > 0:
            raise ValueError(
                f"mu - curvature = {self.mu_prime} must be positive before "
                "evaluating any bound"
            )


def estimate_constants(
    model,
    shards: list[DataShard],
    trajectory: list[np.ndarray],
    probes: int,
    rng: RngStream,
    mu: float,
    gamma_bar: float = 1.0,
) -> ModelConstants:
    """Estimate constants by probing gradients near a parameter trajectory.

    The Lipschitz estimate is the max gradient-difference ratio over
    consecutive trajectory pairs and random perturbation pairs; the
    dissimilarity estimate is the max per-device gradient-norm ratio at
    trajectory points; curvature comes from Hessian-vector central
    differences along random unit directions.  All maxima are conservative
    by construction: replaying any probe pair never exceeds the estimate.
    """
    if not trajectory:
        raise ValueError("trajectory must be nonempty")
    if probes < 1:
        raise ValueError("need at least one probe per trajectory point")
    gen = rng.generator()
    n = len(shards)

    steps = [
        l2_norm(b - a) for a, b in zip(trajectory, trajectory[1:]) if l2_norm(b - a) > 0
    ]
    radius = max(steps) if steps else 1e-3

    lipschitz = 0.0
    dissimilarity = 0.0
    min_rayleigh = math.inf

    for w in trajectory:
        grads = [model.gradient(w, shard) for shard in shards]
        total = np.zeros_like(grads[0])
        for g in grads:
            total = total + g
        global_grad = total / n
        gnorm = l2_norm(global_grad)
        if gnorm >= 1e-12:
            worst = max(l2_norm(g) for g in grads)
            dissimilarity = max(dissimilarity, worst / gnorm)

        h = 1e-5 * (1.0 + l2_norm(w))
        for _ in range(probes):
            u = gen.normal(size=w.shape)
            u = u / l2_norm(u)
            far = w + radius * u
            for k, shard in enumerate(shards):
                g_far = model.gradient(far, shard)
                lipschitz = max(lipschitz, l2_norm(g_far - grads[k]) / radius)
                g_plus = model.gradient(w + h * u, shard)
                g_minus = model.gradient(w - h * u, shard)
                min_rayleigh = min(min_rayleigh, dot(g_plus - g_minus, u) / (2.0 * h))

    for a, b in zip(trajectory, trajectory[1:]):
        gap = l2_norm(b - a)
        if gap < 1e-12:
            continue
        for shard in shards:
            diff = model.gradient(b, shard) - model.gradient(a, shard)
            lipschitz = max(lipschitz, l2_norm(diff) / gap)

    curvature = max(0.0, -min_rayleigh) if math.isfinite(min_rayleigh) else 0.0
    return ModelConstants(
        lipschitz=lipschitz,
        dissimilarity=max(dissimilarity, 1.0),
        curvature=curvature,
        mu=mu,
        gamma_bar=gamma_bar,
    )


# ---------------------------------------------------------------------------
# Right-hand-side evaluators


def penalty_coefficient(constants: ModelConstants, gamma: float | None = None) -> float:
    """Coefficient of |global grad|^2 in the averaging-family bounds."""
    g = constants.gamma_bar if gamma is None else gamma
    lip, b = constants.lipschitz, constants.dissimilarity
    mu, mup = constants.mu, constants.mu_prime
    return b * (
        lip * (g + 1.0) / (mu * mup)
        + g / mu
        + b * lip * (1.0 + g) ** 2 / (2.0 * mup * mup)
    )


def bound_rhs_averaging(
    constants: ModelConstants,
    f_value: float,
    expected_inner_sum: float,
    k: int,
    grad_norm_sq: float,
    gamma: float | None = None,
) -> float:
    """Guaranteed bound on E[f] after plain averaging of K sampled updates.

    ``expected_inner_sum`` is E of the sum over the sampled multiset of
    <global grad, local grad_k>.
    """
    constants.require_valid()
    return (
        f_value
        - expected_inner_sum / (k * constants.mu)
        + penalty_coefficient(constants, gamma) * grad_norm_sq
    )


def bound_rhs_sign_corrected(
    constants: ModelConstants,
    f_value: float,
    expected_abs_inner_sum: float,
    k: int,
    grad_norm_sq: float,
    gamma: float | None = None,
) -> float:
    """Same shape as the averaging bound but with absolute alignments,
    matching the sign-corrected aggregation rule."""
    constants.require_valid()
    return (
        f_value
        - expected_abs_inner_sum / (k * constants.mu)
        + penalty_coefficient(constants, gamma) * grad_norm_sq
    )


def bound_rhs_alignment_sampling(
    constants: ModelConstants,
    f_value: float,
    inner_products,
    probs,
    grad_norm_sq: float,
    gamma: float | None = None,
) -> float:
    """Bound attained by sampling from the alignment-proportional
    distribution; ``probs`` come from the selection module."""
    constants.require_valid()
    probs = getattr(probs, "probs", probs)
    if len(inner_products) != len(probs):
        raise ValueError("need one probability per inner product")
    decrease = 0.0
    for c, p in zip(inner_products, probs):
        decrease += abs(c) * p
    return (
        f_value
        - decrease / constants.mu
        + penalty_coefficient(constants, gamma) * grad_norm_sq
    )


def bound_rhs_single_set(
    constants: ModelConstants,
    f_value: float,
    inner_products,
    k: int,
    n: int,
    grad_norm_sq: float,
    gamma: float | None = None,
) -> float:
    """Bound for the single-set correlation-weighted rule under uniform
    sampling; the decrease term scales with K/N times the total absolute
    alignment."""
    constants.require_valid()
    total = 0.0
    for c in inner_products:
        total += abs(c)
    return (
        f_value
        - k * total / (constants.mu * n)
        + penalty_coefficient(constants, gamma) * grad_norm_sq
    )


def heterogeneity_discount(constants: ModelConstants, k: int) -> float:
    """The constant bundle multiplying gamma_k in the heterogeneity bound;
    in the simulator's aggregation rules it is replaced by the tunable psi."""
    constants.require_valid()
    lip, b = constants.lipschitz, constants.dissimilarity
    mu, mup = constants.mu, constants.mu_prime
    return b * (lip / (mu * mup) + 1.0 / mu + 3.0 * lip * b / (2.0 * k * mup * mup))


def bound_rhs_heterogeneous(
    constants: ModelConstants,
    f_value: float,
    inner_products,
    gammas,
    probs,
    k: int,
    grad_norm_sq: float,
) -> float:
    """Bound under per-device solver inexactness: each sampled device's
    alignment is discounted by its gamma_k, and the trailing penalty no
    longer depends on gamma."""
    constants.require_valid()
    probs = getattr(probs, "probs", probs)
    if not (len(inner_products) == len(gammas) == len(probs)):
        raise ValueError("inner products, gammas and probs must align")
    discount = heterogeneity_discount(constants, k)
    expected = 0.0
    for c, g, p in zip(inner_products, gammas, probs):
        expected += p * (c - discount * g * grad_norm_sq)
    expected *= k
    lip, b = constants.lipschitz, constants.dissimilarity
    mu, mup = constants.mu, constants.mu_prime
    trailing = (lip * b * b / (2.0 * mup * mup) + lip * b / (mu * mup)) * grad_norm_sq
    return f_value - expected / (k * mu) + trailing


# ---------------------------------------------------------------------------
# Sampling-identity oracle


def multiset_alignment_moments(
    local_grads,
    k: int,
    rng: RngStream | None = None,
    mc_samples: int = 20000,
    exhaustive_limit: int = 4096,
) -> dict:
    """Expectations of the two alignment statistics under uniform multiset
    sampling, computed three ways.

    For a sampled multiset S of size K with mean gradient m(S), the
    statistics are ``sum_{i in S} <g_i, m(S)>^2`` (squared) and
    ``sum_{i in S} <g_i, m(S)>`` (linear).  Returned values:

    * ``sq_exact`` / ``lin_exact``: the true expectation over all N^K
      ordered multisets (exhaustive when N^K <= exhaustive_limit, otherwise
      Monte Carlo with standard errors ``sq_se`` / ``lin_se``),
    * ``sq_indep`` / ``lin_indep``: the expectation under the
      independent-index expansion that treats every index combination as
      equiprobable (the step used in the supporting proof),
    * ``sq_target`` = (K/N) sum_k <mean grad, g_k>^2 and
      ``lin_target`` = (K/N) sum_k |<mean grad, g_k>|.

    The independent-index values satisfy ``sq_indep == sq_target`` and
    ``lin_indep <= lin_target`` identically; the exact values deviate for
    small K because repeated indices (diagonal terms) are not equiprobable
    with distinct ones.  The deviation is reported, never hidden.
    """
    grads = [np.asarray(g, dtype=np.float64) for g in local_grads]
    n = len(grads)
    if n < 1 or k < 1:
        raise ValueError("need at least one gradient and k >= 1")
    gram = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            gram[i, j] = gram[j, i] = dot(grads[i], grads[j])

    mean_grad = np.zeros_like(grads[0])
    for g in grads:
        mean_grad = mean_grad + g
    mean_grad = mean_grad / n
    inner = np.array([dot(mean_grad, g) for g in grads])

    sq_target = k / n * float(np.sum(inner**2))
    lin_target = k / n * float(np.sum(np.abs(inner)))

    rows = gram.sum(axis=1)
    sq_indep = k * float(np.sum(rows**2)) / n**3
    lin_indep = k * float(gram.sum()) / n**2

    def stats(multiset) -> tuple[float, float]:
        sums = gram[np.ix_(multiset, multiset)].sum(axis=1)
        return float(np.sum((sums / k) ** 2)), float(np.sum(sums / k))

    out = {
        "n": n,
        "k": k,
        "sq_indep": sq_indep,
        "sq_target": sq_target,
        "lin_indep": lin_indep,
        "lin_target": lin_target,
    }
    if n**k <= exhaustive_limit:
        sq_sum = 0.0
        lin_sum = 0.0
        for multiset in itertools.product(range(n), repeat=k):
            s, li = stats(list(multiset))
            sq_sum += s
            lin_sum += li
        out["sq_exact"] = sq_sum / n**k
        out["lin_exact"] = lin_sum / n**k
        out["exhaustive"] = True
    else:
        if rng is None:
            raise ValueError("instance too large to enumerate; supply an rng for Monte Carlo")
        gen = rng.generator()
        sq_vals = np.empty(mc_samples)
        lin_vals = np.empty(mc_samples)
        for r in range(mc_samples):
            multiset = gen.integers(0, n, size=k)
            sq_vals[r], lin_vals[r] = stats(multiset)
        out["sq_exact"] = float(sq_vals.mean())
        out["lin_exact"] = float(lin_vals.mean())
        out["sq_se"] = float(sq_vals.std(ddof=1) / math.sqrt(mc_samples))
        out["lin_se"] = float(lin_vals.std(ddof=1) / math.sqrt(mc_samples))
        out["exhaustive"] = False
    return out


# ---------------------------------------------------------------------------
# Bound checking along a recorded run


@dataclass(frozen=True)
class FullInfoRound:
    """Everything the bound check needs about one round: the state, every
    device's gradient and hypothetical local update, and the selection
    distribution the run used."""

    t: int
    params: np.ndarray
    f_value: float
    grads: list[np.ndarray]
    global_grad: np.ndarray
    grad_norm_sq: float
    updates: list[LocalUpdate]  # one per device, all N
    probs: np.ndarray


@dataclass(frozen=True)
class FullInfoRun:
    model: LossModel
    shards: list[DataShard]
    k_per_round: int
    rounds: list[FullInfoRound]


@dataclass(frozen=True)
class RoundBoundCheck:
    t: int
    skipped: bool
    measured: float = math.nan
    std_error: float = math.nan
    rhs: float = math.nan
    margin: float = math.nan
    holds: bool = True

    def to_dict(self) -> dict:
        if self.skipped:
            return {"t": self.t, "skipped": True, "measured": None, "rhs": None, "margin": None, "holds": True}
        return {
            "t": self.t,
            "skipped": False,
            "measured": self.measured,
            "rhs": self.rhs,
            "margin": self.margin,
            "holds": self.holds,
        }


@dataclass(frozen=True)
class BoundCheckReport:
    kind: str
    mc_rounds: int
    rounds: list[RoundBoundCheck]

    @property
    def all_hold(self) -> bool:
        return all(r.holds for r in self.rounds)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "mc_rounds": self.mc_rounds,
            "all_hold": self.all_hold,
            "rounds": [r.to_dict() for r in self.rounds],
        }


def _global_loss(model, shards, w) -> float:
    total = 0.0
    for shard in shards:
        total += model.loss(w, shard)
    return total / len(shards)


def check_bound_along_run(
    run: FullInfoRun,
    constants: ModelConstants,
    kind: str,
    mc_rounds: int,
    rng: RngStream,
    stationary_tol: float = 1e-10,
) -> BoundCheckReport:
    """Compare measured E[f(next params)] against a bound along a run.

    For every recorded round the expectation is estimated by ``mc_rounds``
    replays: each replay resamples the device multiset, applies the bound's
    aggregation rule to the recorded per-device updates, and evaluates the
    global loss.  A round passes when the Monte-Carlo mean does not exceed
    the bound by more than three standard errors.  Rounds at numeric
    stationarity are skipped, since the bounds presume a non-stationary
    state.
    """
    if kind not in BOUND_KINDS:
        raise ValueError(f"unknown bound kind {kind!r}; choose from {BOUND_KINDS}")
    constants.require_valid()
    if mc_rounds < 2:
        raise ValueError("need at least two replays for a standard error")

    model, shards, k = run.model, run.shards, run.k_per_round
    n = len(shards)
    checks = []
    for rnd in run.rounds:
        if math.sqrt(rnd.grad_norm_sq) < stationary_tol:
            checks.append(RoundBoundCheck(t=rnd.t, skipped=True))
            continue
        inner = [dot(rnd.global_grad, g) for g in rnd.grads]
        gammas = [u.gamma for u in rnd.updates]
        gsq = rnd.grad_norm_sq

        if kind == "thm1":
            probs = rnd.probs
            expected = k * sum(p * c for p, c in zip(probs, inner))
            rhs = bound_rhs_averaging(constants, rnd.f_value, expected, k, gsq)
        elif kind == "prop1":
            probs = rnd.probs
            expected = k * sum(p * abs(c) for p, c in zip(probs, inner))
            rhs = bound_rhs_sign_corrected(constants, rnd.f_value, expected, k, gsq)
        elif kind == "def1":
            probs = lb_near_optimal_distribution(rnd.grads, rnd.global_grad).probs
            rhs = bound_rhs_alignment_sampling(constants, rnd.f_value, inner, probs, gsq)
        elif kind == "prop2":
            probs = np.full(n, 1.0 / n)
            rhs = bound_rhs_single_set(constants, rnd.f_value, inner, k, n, gsq)
        else:  # thm3
            probs = rnd.probs
            rhs = bound_rhs_heterogeneous(
                constants, rnd.f_value, inner, gammas, probs, k, gsq
            )

        values = np.empty(mc_rounds)
        for r in range(mc_rounds):
            multiset = sample_categorical(probs, k, rng.child(rnd.t, r))
            chosen = [rnd.updates[i] for i in multiset]
            if kind == "prop1":
                report = aggregate_signed(rnd.params, chosen, rnd.global_grad)
            elif kind == "prop2":
                report = aggregate_folb_single(rnd.params, chosen)
            else:
                report = aggregate_average(rnd.params, chosen)
            values[r] = _global_loss(model, shards, report.params)
        measured = float(values.mean())
        se = float(values.std(ddof=1) / math.sqrt(mc_rounds))
        margin = float(rhs + 3.0 * se - measured)
        checks.append(
            RoundBoundCheck(
                t=rnd.t,
                skipped=False,
                measured=measured,
                std_error=se,
                rhs=float(rhs),
                margin=margin,
                holds=bool(margin >= 0.0),
            )
        )
    return BoundCheckReport(kind=kind, mc_rounds=mc_rounds, rounds=checks)

"""Simulated device-side optimization of the proximal local objective.

A device runs a budgeted number of (stochastic) gradient steps on its local
objective, then reports the update together with its measured inexactness
``gamma = |grad h(w_next, center)| / |grad h(center, center)|``.  The
denominator equals the local gradient at the center since the proximal term
vanishes there.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .data import DataShard
from .models import LossModel, ProximalObjective
from .numerics import RngStream, l2_norm

logger = logging.getLogger(__name__)

# sub-stream tags under each device's base stream
_BUDGET = 1
_SOLVE = 2


class ParticipationTimeout(Exception):
    """The device cannot fit any local work inside the round deadline."""


@dataclass(frozen=True)
class DeviceProfile:
    """Static per-device simulation parameters."""

    device_id: int
    shard: DataShard
    rng: RngStream
    comm_delay: float = 0.0  # round-trip communication bound, in time units
    steps_min: int = 1
    steps_max: int = 20
    learning_rate: float = 0.01
    batch_size: int = 0  # 0 = full batch
    step_cost: float = 1.0  # simulated time units per local step

    def __post_init__(self):
        if self.comm_delay < 0:
            raise ValueError("comm_delay must be nonnegative")
        if not (1 <= self.steps_min <= self.steps_max):
            raise ValueError("need 1 <= steps_min <= steps_max")
        if self.learning_rate <= 0 or self.step_cost <= 0:
            raise ValueError("learning_rate and step_cost must be positive")


@dataclass(frozen=True)
class LocalUpdate:
    """One device's round output."""

    device_id: int
    w_next: np.ndarray
    delta: np.ndarray  # w_next - center, exactly
    grad_at_center: np.ndarray
    gamma: float
    steps: int
    elapsed: float  # comm_delay + steps * step_cost


def draw_step_budget(profile: DeviceProfile, round_idx: int, rng: RngStream | None = None) -> int:
    """Uniform step budget in [steps_min, steps_max], keyed by (device, round).

    The draw depends only on the device stream and round index, never on
    which strategy selected the device, so compared strategies sharing a
    seed see identical budget sequences.
    """
    stream = rng if rng is not None else profile.rng.child(_BUDGET, round_idx)
    gen = stream.generator()
    return int(gen.integers(profile.steps_min, profile.steps_max + 1))


def local_solve(
    model: LossModel,
    profile: DeviceProfile,
    center: np.ndarray,
    mu: float,
    tau: float = math.inf,
    round_idx: int = 0,
    steps: int | None = None,
) -> LocalUpdate:
    """Run one device's round: budgeted gradient descent on the local
    proximal objective starting from ``center``.

    The executed step count is min(budget draw, steps fitting in
    ``tau - comm_delay``).  Raises :class:`ParticipationTimeout` when the
    deadline leaves no room for even one step (the caller drops the device
    from the round).  ``steps`` overrides the budget draw, mainly so tests
    can exercise exact step counts, including zero.
    """
    if tau <= profile.comm_delay:
        raise ParticipationTimeout(
            f"device {profile.device_id}: deadline {tau} <= comm delay {profile.comm_delay}"
        )
    if steps is None:
        budget = draw_step_budget(profile, round_idx)
        time_left = tau - profile.comm_delay
        affordable = budget if math.isinf(time_left) else int(time_left // profile.step_cost)
        n_steps = min(budget, affordable)
        if n_steps <= 0:
            raise ParticipationTimeout(
                f"device {profile.device_id}: {time_left} time units fit no step"
            )
    else:
        n_steps = int(steps)

    shard = profile.shard
    objective = ProximalObjective(model, center, mu)
    grad_at_center = model.gradient(center, shard)
    denom = l2_norm(grad_at_center)

    w = center.copy()
    gen = profile.rng.child(_SOLVE, round_idx).generator()
    batch = profile.batch_size
    for _ in range(n_steps):
        if 0 < batch < len(shard):
            idx = gen.choice(len(shard), size=batch, replace=False)
            g = model.gradient(w, shard.subset(idx)) + mu * (w - center)
        else:
            g = objective.gradient(w, shard)
        w = w - profile.learning_rate * g

    if denom == 0.0:
        gamma = 0.0  # already at a local stationary point
    else:
        gamma = l2_norm(objective.gradient(w, shard)) / denom
    if gamma > 1.0 + 1e-9:
        logger.warning(
            "device %d round %d: inexactness gamma=%.6f exceeds 1 (noisy local steps?)",
            profile.device_id,
            round_idx,
            gamma,
        )

    return LocalUpdate(
        device_id=profile.device_id,
        w_next=w,
        delta=w - center,
        grad_at_center=grad_at_center,
        gamma=float(gamma),
        steps=n_steps,
        elapsed=profile.comm_delay + n_steps * profile.step_cost,
    )

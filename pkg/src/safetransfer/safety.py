"""Torque-limit controller that keeps predicted expected damage under budget.

Each iteration measures the unsafety rate of the latest batch, adds worst-case
increases for widening the torque limit (``delta_pu1``) and for the policy
update (``delta_pu2``), then sets the next limit so that
``p_u_pred * t_lim_next <= d_safe``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from enum import Enum
from typing import Callable

import numpy as np
from scipy.special import ndtr

from .gauss import tail_mass_array
from .learner import RolloutBatch
from .policy import PolicyParams, act_dist


class Variant(str, Enum):
    FULL = "full"
    NO_DPU1 = "v2_no_dpu1"
    NO_DPU2 = "v3_no_dpu2"
    NEITHER = "v4_neither"
    FIXED = "fixed_limit"


def linear_damage(t_lim: float) -> float:
    """Worst-case damage of one unsafe step at limit ``t_lim`` (unit slope)."""
    return t_lim


def linear_damage_inverse(budget: float) -> float:
    return budget


@dataclass(frozen=True)
class SafetyConfig:
    d_safe: float = 0.5
    t_min: float = 0.1
    t_max: float = 3.0
    growth_cap: float = 1.05
    pu_floor: float = 1e-3
    variant: Variant = Variant.FULL

    def __post_init__(self) -> None:
        object.__setattr__(self, "variant", Variant(self.variant))
        if not 0.0 < self.t_min < self.t_max:
            raise ValueError(f"need 0 < t_min < t_max, got {self.t_min}, {self.t_max}")
        if not self.t_min < self.d_safe:
            raise ValueError(f"t_min ({self.t_min}) must be below d_safe ({self.d_safe})")
        if not self.growth_cap > 1.0:
            raise ValueError("growth_cap must be > 1")
        if not 0.0 < self.pu_floor <= 1.0:
            raise ValueError("pu_floor must lie in (0, 1]")


@dataclass(frozen=True)
class SafetyReport:
    p_u: float
    delta_pu1: float
    delta_pu2: float
    p_u_pred: float
    t_lim: float
    t_lim_next: float
    expected_damage: float

    def as_dict(self) -> dict:
        return asdict(self)


def empirical_unsafety(batch: RolloutBatch) -> float:
    bad = sum(int(tr.violation.sum()) + tr.fault_steps for tr in batch.trajectories)
    total = sum(len(tr) + tr.fault_steps for tr in batch.trajectories)
    if total == 0:
        raise ValueError("empty batch")
    return bad / total


def delta_pu1(batch: RolloutBatch, policy: PolicyParams, t_lim: float) -> float:
    """Mean over visited states of the torque mass at or beyond ``t_lim``.

    Joints combine by union bound, capped at one per state.
    """
    dist = act_dist(policy, batch.features)
    per_joint = tail_mass_array(dist.mean, dist.std, t_lim)
    per_state = np.minimum(1.0, per_joint.sum(axis=-1))
    return float(np.clip(per_state.mean(), 0.0, 1.0))


def delta_pu2(batch: RolloutBatch, sigma_by_state: np.ndarray, delta_kl: float) -> float:
    """Worst-case probability mass moved by a policy update bounded by ``delta_kl``.

    ``sigma_by_state`` has one row per visited state and one column per joint.
    The KL budget is split evenly over joints; the equal-variance overlap is
    then the same at every state, but it is still averaged per state so that a
    state-dependent variance would slot in unchanged.
    """
    if delta_kl < 0.0:
        raise ValueError("delta_kl must be >= 0")
    sig = np.atleast_2d(np.asarray(sigma_by_state, dtype=float))
    if np.any(sig <= 0.0):
        raise ValueError("sigma must be > 0")
    if delta_kl == 0.0:
        return 0.0
    n_joints = sig.shape[1]
    # overlap 2 * Phi(-sqrt(kl_joint / 2)) is scale-free in sigma
    kl_joint = delta_kl / n_joints
    non_overlap = np.broadcast_to(1.0 - 2.0 * ndtr(-np.sqrt(kl_joint / 2.0)), sig.shape)
    per_state = np.minimum(1.0, non_overlap.sum(axis=1))
    return float(np.clip(per_state.mean(), 0.0, 1.0))


def predict_unsafety(p_u: float, dpu1: float, dpu2: float, variant: Variant | str, pu_floor: float = 1e-3) -> float:
    variant = Variant(variant)
    if variant is Variant.NO_DPU1:
        pred = p_u + dpu2
    elif variant is Variant.NO_DPU2:
        pred = p_u + dpu1
    elif variant is Variant.NEITHER:
        pred = p_u
    else:
        pred = p_u + dpu1 + dpu2
    return float(min(1.0, max(pu_floor, pred)))


def update_torque_limit(
    p_u_pred: float,
    t_lim_current: float,
    cfg: SafetyConfig,
    damage_inverse: Callable[[float], float] = linear_damage_inverse,
) -> float:
    """Largest limit whose worst-case damage fits the budget at ``p_u_pred``.

    Increases are capped at ``growth_cap`` per iteration; decreases are not.
    """
    if cfg.variant is Variant.FIXED:
        return t_lim_current
    raw = damage_inverse(cfg.d_safe / p_u_pred)
    capped = min(raw, cfg.growth_cap * t_lim_current)
    return float(min(cfg.t_max, max(cfg.t_min, capped)))


def expected_damage(p_u: float, t_lim: float, damage: Callable[[float], float] = linear_damage) -> float:
    return p_u * damage(t_lim)


def run_iteration(
    policy: PolicyParams, batch: RolloutBatch, t_lim: float, cfg: SafetyConfig, delta_kl: float
) -> SafetyReport:
    """Safety half of one transfer iteration.

    ``batch`` was collected at ``t_lim`` before the update; ``policy`` is the
    updated policy about to act next.
    """
    p_u = empirical_unsafety(batch)
    dpu1 = delta_pu1(batch, policy, t_lim)
    sigma = act_dist(policy, batch.features).std
    dpu2 = delta_pu2(batch, sigma, delta_kl)
    pred = predict_unsafety(p_u, dpu1, dpu2, cfg.variant, cfg.pu_floor)
    nxt = update_torque_limit(pred, t_lim, cfg)
    return SafetyReport(
        p_u=p_u,
        delta_pu1=dpu1,
        delta_pu2=dpu2,
        p_u_pred=pred,
        t_lim=t_lim,
        t_lim_next=nxt,
        expected_damage=expected_damage(p_u, t_lim),
    )

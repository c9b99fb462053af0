"""Two-link planar arm hanging under gravity, plus a 1-D point-mass toy task.

States are batched: ``angles`` and ``velocities`` carry a leading episode axis
so a whole rollout batch advances with one call. A single state is just a batch
of shape ``(2,)``.

Joint angles are measured from straight down. The task is a swirl: the
upper arm sweeps one full turn per episode so the end-effector traces a circle
of radius 0.15 m, while the forearm (carrying the "cup") should stay hanging
vertically. The forearm's tilt from vertical is the safety value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

HORIZON = 200
MAX_VELOCITY = 50.0
CIRCLE_CENTER = (0.0, -0.3)
CIRCLE_RADIUS = 0.15


@dataclass(frozen=True)
class ArmModel:
    link_masses: tuple[float, float] = (1.0, 0.5)
    link_lengths: tuple[float, float] = (0.15, 0.3)
    damping: tuple[float, float] = (0.05, 0.05)
    inertia_scale: float = 1.0
    # rotor inertia reflected at each joint; not a link property, so the
    # train/test mismatch factors leave it alone
    armature: tuple[float, float] = (0.01, 0.01)
    gravity: float = 9.81
    dt: float = 0.05
    substeps: int = 5

    def __post_init__(self) -> None:
        vals = (*self.link_masses, *self.link_lengths, self.inertia_scale, self.dt)
        if any(not v > 0.0 for v in vals):
            raise ValueError(f"masses, lengths, inertia_scale and dt must be positive: {self}")
        if min(*self.damping, *self.armature, self.gravity) < 0.0 or self.substeps < 1:
            raise ValueError(f"damping, armature and gravity must be >= 0, substeps >= 1: {self}")


@dataclass(frozen=True)
class EnvState:
    angles: np.ndarray
    velocities: np.ndarray
    t: int = 0

    def observation(self) -> np.ndarray:
        """Policy-facing view of the arm.

        ``[sin, cos]`` of the upper-arm and forearm angles (both from straight
        down), the two joint velocities, and ``[sin, cos]`` of how far the upper
        arm lags the swirl reference.
        """
        a1 = self.angles[..., 0]
        link2 = a1 + self.angles[..., 1]
        lag = 2.0 * math.pi * self.t / HORIZON - a1
        v = self.velocities
        return np.stack(
            [np.sin(a1), np.cos(a1), np.sin(link2), np.cos(link2), v[..., 0], v[..., 1], np.sin(lag), np.cos(lag)],
            axis=-1,
        )

    def __len__(self) -> int:
        return 1 if self.angles.ndim == 1 else self.angles.shape[0]


@dataclass(frozen=True)
class SafetySpec:
    u_lim: float = 0.2
    u_prime_lim: float = 0.0
    lambda_penalty: float = 0.001

    def __post_init__(self) -> None:
        if not 0.0 <= self.u_prime_lim <= self.u_lim:
            raise ValueError(f"need 0 <= u_prime_lim <= u_lim, got {self}")
        if self.lambda_penalty < 0.0:
            raise ValueError("lambda_penalty must be >= 0")


def make_train_model() -> ArmModel:
    return ArmModel()


def make_test_model(
    mass_factor: float = 10.0, damping_factor: float = 10.0, inertia_factor: float = 10.0
) -> ArmModel:
    """Lighter, less damped copy of the training arm."""
    if min(mass_factor, damping_factor, inertia_factor) < 1.0:
        raise ValueError("mismatch factors must be >= 1")
    base = make_train_model()
    return replace(
        base,
        link_masses=tuple(m / mass_factor for m in base.link_masses),
        damping=tuple(d / damping_factor for d in base.damping),
        inertia_scale=base.inertia_scale / inertia_factor,
    )


def reset(rng: np.random.Generator, angle_range: float, n: int | None = None) -> EnvState:
    if angle_range < 0.0:
        raise ValueError("angle_range must be >= 0")
    shape = (2,) if n is None else (n, 2)
    angles = rng.uniform(-angle_range, angle_range, size=shape)
    return EnvState(angles=angles, velocities=np.zeros(shape), t=0)


def _inertia_constants(model: ArmModel):
    m1, m2 = model.link_masses
    l1, l2 = model.link_lengths
    c1, c2 = l1 / 2.0, l2 / 2.0
    i1 = model.inertia_scale * m1 * l1 * l1 / 12.0
    i2 = model.inertia_scale * m2 * l2 * l2 / 12.0
    a = i1 + i2 + m1 * c1 * c1 + m2 * (l1 * l1 + c2 * c2) + model.armature[0]
    b = m2 * l1 * c2
    d = i2 + m2 * c2 * c2
    g1 = model.gravity * (m1 * c1 + m2 * l1)
    g2 = model.gravity * m2 * c2
    return a, b, d, d + model.armature[1], g1, g2


def _velocity_update(consts, damping, h, q1, q2, v1, v2, tau1, tau2):
    """One semi-implicit Euler velocity update, damping taken implicitly.

    Solves ``(M + h D) v' = M v + h (tau - C(q, v) v - G(q))`` so that stiff
    damping on light links cannot destabilise the step.
    """
    a, b, d, d22, g1, g2 = consts
    cos2, sin2 = np.cos(q2), np.sin(q2)
    m11 = a + 2.0 * b * cos2
    m12 = d + b * cos2
    hc = b * sin2
    s12 = np.sin(q1 + q2)
    r1 = tau1 + hc * v2 * (2.0 * v1 + v2) - g1 * np.sin(q1) - g2 * s12
    r2 = tau2 - hc * v1 * v1 - g2 * s12
    rhs1 = m11 * v1 + m12 * v2 + h * r1
    rhs2 = m12 * v1 + d22 * v2 + h * r2
    k11 = m11 + h * damping[0]
    k22 = d22 + h * damping[1]
    det = k11 * k22 - m12 * m12
    return (k22 * rhs1 - m12 * rhs2) / det, (k11 * rhs2 - m12 * rhs1) / det


def energy(model: ArmModel, state: EnvState) -> np.ndarray:
    """Kinetic plus gravitational energy (zero potential at the shoulder)."""
    a, b, d, d22, g1, g2 = _inertia_constants(model)
    q1, q2 = state.angles[..., 0], state.angles[..., 1]
    v1, v2 = state.velocities[..., 0], state.velocities[..., 1]
    cos2 = np.cos(q2)
    kin = 0.5 * ((a + 2.0 * b * cos2) * v1 * v1 + 2.0 * (d + b * cos2) * v1 * v2 + d22 * v2 * v2)
    return kin - g1 * np.cos(q1) - g2 * np.cos(q1 + q2)


def end_effector(model: ArmModel, angles: np.ndarray) -> np.ndarray:
    l1, l2 = model.link_lengths
    a1 = angles[..., 0]
    a12 = a1 + angles[..., 1]
    x = l1 * np.sin(a1) + l2 * np.sin(a12)
    y = -l1 * np.cos(a1) - l2 * np.cos(a12)
    return np.stack([x, y], axis=-1)


def reference(t: int) -> np.ndarray:
    """Circle target: one revolution per episode, starting at the bottom."""
    phase = 2.0 * math.pi * t / HORIZON
    return np.array(
        [CIRCLE_CENTER[0] + CIRCLE_RADIUS * math.sin(phase), CIRCLE_CENTER[1] - CIRCLE_RADIUS * math.cos(phase)]
    )


def step_batch(model: ArmModel, state: EnvState, applied: np.ndarray):
    """Advance one control step with ``model.substeps`` semi-implicit Euler substeps.

    Returns ``(next_state, base_reward, faulted)``; ``faulted`` marks entries
    whose integration went non-finite. Their state is left as it was.
    """
    tau = np.asarray(applied, dtype=float)
    consts = _inertia_constants(model)
    h = model.dt / model.substeps
    q1, q2 = state.angles[..., 0], state.angles[..., 1]
    v1, v2 = state.velocities[..., 0], state.velocities[..., 1]
    with np.errstate(all="ignore"):
        for _ in range(model.substeps):
            v1, v2 = _velocity_update(consts, model.damping, h, q1, q2, v1, v2, tau[..., 0], tau[..., 1])
            v1 = np.clip(v1, -MAX_VELOCITY, MAX_VELOCITY)
            v2 = np.clip(v2, -MAX_VELOCITY, MAX_VELOCITY)
            q1 = q1 + h * v1
            q2 = q2 + h * v2
    q = np.stack([q1, q2], axis=-1)
    qd = np.stack([v1, v2], axis=-1)
    faulted = ~(np.isfinite(q).all(axis=-1) & np.isfinite(qd).all(axis=-1))
    if faulted.any():
        q = np.where(faulted[..., None], state.angles, q)
        qd = np.where(faulted[..., None], state.velocities, qd)
    nxt = EnvState(angles=q, velocities=qd, t=state.t + 1)
    err = end_effector(model, q) - reference(nxt.t)
    reward = -np.sum(err * err, axis=-1)
    return nxt, reward, faulted


def step(model: ArmModel, state: EnvState, applied: np.ndarray) -> tuple[EnvState, float]:
    """Single-state step; raises ``FloatingPointError`` on a non-finite result."""
    nxt, reward, faulted = step_batch(model, state, applied)
    if np.any(faulted):
        raise FloatingPointError("arm integration produced a non-finite state")
    return nxt, float(reward) if np.ndim(reward) == 0 else reward


def safety_value(state: EnvState) -> np.ndarray | float:
    """Tilt of the distal link from vertical, wrapped into [0, pi]."""
    tilt = state.angles[..., 0] + state.angles[..., 1]
    wrapped = np.abs(np.mod(tilt + math.pi, 2.0 * math.pi) - math.pi)
    return float(wrapped) if np.ndim(wrapped) == 0 else wrapped


def is_violation(u, spec: SafetySpec):
    return np.asarray(u) > spec.u_lim if np.ndim(u) else bool(u > spec.u_lim)


def penalized_reward(r, u, spec: SafetySpec):
    excess = np.maximum(0.0, np.asarray(u, dtype=float) - spec.u_prime_lim)
    out = r - spec.lambda_penalty * excess * excess
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# Point mass: a fast, well-conditioned task for learner smoke tests.


@dataclass(frozen=True)
class PointMassModel:
    mass: float = 1.0
    damping: float = 0.5
    dt: float = 0.05
    target: float = 1.0


@dataclass(frozen=True)
class PointMassState:
    pos: np.ndarray
    vel: np.ndarray
    t: int = 0

    def observation(self) -> np.ndarray:
        return np.stack([self.pos, self.vel], axis=-1)


@dataclass(frozen=True)
class ArmTask:
    """Bundles the arm functions behind the interface the learner drives."""

    model: ArmModel = field(default_factory=make_train_model)
    angle_range: float = 0.1
    action_dim: int = 2

    @property
    def obs_dim(self) -> int:
        return 8

    def reset(self, rng: np.random.Generator, n: int) -> EnvState:
        return reset(rng, self.angle_range, n)

    def step(self, state: EnvState, applied: np.ndarray):
        return step_batch(self.model, state, applied)

    def safety_value(self, state: EnvState) -> np.ndarray:
        return safety_value(state)


@dataclass(frozen=True)
class PointMassTask:
    """Push a damped unit mass to ``target``; speed above ``u_lim`` is unsafe."""

    model: PointMassModel = field(default_factory=PointMassModel)
    start_range: float = 0.1
    action_dim: int = 1

    @property
    def obs_dim(self) -> int:
        return 2

    def reset(self, rng: np.random.Generator, n: int) -> PointMassState:
        return PointMassState(pos=rng.uniform(-self.start_range, self.start_range, size=n), vel=np.zeros(n))

    def step(self, state: PointMassState, applied: np.ndarray):
        m = self.model
        force = applied[..., 0]
        vel = state.vel + m.dt * (force / m.mass - m.damping * state.vel)
        pos = state.pos + m.dt * vel
        faulted = ~(np.isfinite(pos) & np.isfinite(vel))
        reward = -((pos - m.target) ** 2)
        return PointMassState(pos=pos, vel=vel, t=state.t + 1), reward, faulted

    def safety_value(self, state: PointMassState) -> np.ndarray:
        return np.abs(state.vel)

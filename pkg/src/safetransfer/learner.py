"""Rollouts, GAE with a linear baseline, and a KL-bounded policy-gradient step."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .env import SafetySpec, is_violation, penalized_reward
from .policy import (
    PolicyParams,
    act_dist,
    clamp,
    features,
    grad_log_prob_batch,
    kl_per_state,
    log_prob,
    sample_raw,
)

MAX_HALVINGS = 30


@dataclass
class Trajectory:
    features: np.ndarray  # (T, F)
    raw: np.ndarray  # (T, A)
    applied: np.ndarray  # (T, A)
    reward: np.ndarray  # shaped reward r', (T,)
    base_reward: np.ndarray  # (T,)
    u: np.ndarray  # (T,)
    violation: np.ndarray  # (T,) bool
    t_lim: float
    # steps lost to a numerical fault; each counts as a violation
    fault_steps: int = 0

    def __len__(self) -> int:
        return len(self.reward)


@dataclass
class RolloutBatch:
    trajectories: list[Trajectory]
    t_lim: float | None = None
    seed: int | None = None
    policy_id: str | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.trajectories:
            raise ValueError("a rollout batch needs at least one trajectory")

    @cached_property
    def features(self) -> np.ndarray:
        return np.concatenate([tr.features for tr in self.trajectories])

    @cached_property
    def raw(self) -> np.ndarray:
        return np.concatenate([tr.raw for tr in self.trajectories])

    @cached_property
    def timesteps(self) -> np.ndarray:
        return np.concatenate([np.arange(len(tr)) for tr in self.trajectories])

    @property
    def n_steps(self) -> int:
        return sum(len(tr) for tr in self.trajectories)

    def mean_return(self) -> float:
        return float(np.mean([tr.reward.sum() for tr in self.trajectories]))

    def mean_base_return(self) -> float:
        return float(np.mean([tr.base_reward.sum() for tr in self.trajectories]))


@dataclass(frozen=True)
class GaeConfig:
    gamma: float = 0.95
    lambda_gae: float = 0.98

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma <= 1.0 or not 0.0 <= self.lambda_gae <= 1.0:
            raise ValueError(f"gamma and lambda_gae must lie in [0, 1]: {self}")


def collect(
    policy: PolicyParams,
    task,
    spec: SafetySpec,
    t_lim,
    n_episodes: int,
    horizon: int,
    rng: np.random.Generator,
) -> RolloutBatch:
    """Run ``n_episodes`` episodes side by side.

    ``t_lim`` is either one limit for the whole batch or one per episode. The
    safety value and penalty are read off the state reached after each action.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    shared = np.ndim(t_lim) == 0
    tl = np.broadcast_to(np.asarray(t_lim, dtype=float), (n_episodes,)).copy()

    state = task.reset(rng, n_episodes)
    alive = np.ones(n_episodes, dtype=bool)
    fault_at = np.full(n_episodes, horizon)
    cols: dict[str, list] = {k: [] for k in ("f", "raw", "app", "r", "rb", "u", "v")}
    for t in range(horizon):
        f = features(state, tl)
        raw = sample_raw(act_dist(policy, f), rng)
        app = clamp(raw, tl)
        state, base, faulted = task.step(state, app)
        newly = faulted & alive
        fault_at[newly] = t
        alive &= ~faulted
        u = task.safety_value(state)
        cols["f"].append(f)
        cols["raw"].append(raw)
        cols["app"].append(app)
        cols["rb"].append(base)
        cols["u"].append(u)
        cols["r"].append(penalized_reward(base, u, spec))
        cols["v"].append(is_violation(u, spec))

    stacked = {k: np.stack(v, axis=1) for k, v in cols.items()}
    trajs = []
    for i in range(n_episodes):
        n = int(fault_at[i])
        trajs.append(
            Trajectory(
                features=stacked["f"][i, :n],
                raw=stacked["raw"][i, :n],
                applied=stacked["app"][i, :n],
                reward=stacked["r"][i, :n],
                base_reward=stacked["rb"][i, :n],
                u=stacked["u"][i, :n],
                violation=np.asarray(stacked["v"][i, :n], dtype=bool),
                t_lim=float(tl[i]),
                fault_steps=horizon - n,
            )
        )
    return RolloutBatch(trajectories=trajs, t_lim=float(tl[0]) if shared else None)


def discounted_cumsum(x: np.ndarray, discount: float) -> np.ndarray:
    out = np.empty(len(x))
    acc = 0.0
    for i in range(len(x) - 1, -1, -1):
        acc = x[i] + discount * acc
        out[i] = acc
    return out


@dataclass(frozen=True)
class LinearBaseline:
    """Ridge fit of return-to-go on ``[features, t, t^2, 1]`` (t scaled by horizon)."""

    coef: np.ndarray
    horizon: int

    def design(self, feats: np.ndarray, t: np.ndarray) -> np.ndarray:
        return _baseline_design(feats, t, self.horizon)

    def predict(self, feats: np.ndarray, t: np.ndarray) -> np.ndarray:
        return self.design(np.atleast_2d(feats), np.atleast_1d(t)) @ self.coef


def _baseline_design(feats: np.ndarray, t: np.ndarray, horizon: int) -> np.ndarray:
    ts = np.asarray(t, dtype=float)[:, None] / horizon
    return np.concatenate([feats, ts, ts * ts, np.ones_like(ts)], axis=1)


def fit_linear_baseline(
    batch: RolloutBatch, cfg: GaeConfig, horizon: int | None = None, ridge: float = 1e-5
) -> LinearBaseline:
    horizon = horizon or max(len(tr) + tr.fault_steps for tr in batch.trajectories)
    x = _baseline_design(batch.features, batch.timesteps, horizon)
    y = np.concatenate([discounted_cumsum(tr.reward, cfg.gamma) for tr in batch.trajectories])
    coef = np.linalg.solve(x.T @ x + ridge * np.eye(x.shape[1]), x.T @ y)
    return LinearBaseline(coef=coef, horizon=horizon)


def predict(baseline: LinearBaseline | None, feats: np.ndarray, t: np.ndarray) -> np.ndarray:
    if baseline is None:
        return np.zeros(len(np.atleast_1d(t)))
    return baseline.predict(feats, t)


def gae_advantages(
    batch: RolloutBatch, cfg: GaeConfig, baseline: LinearBaseline | None = None, normalize: bool = True
) -> np.ndarray:
    """GAE(gamma, lambda) over every step of the batch, concatenated in batch order.

    Episodes end at their last recorded step; the value after it is taken as 0.
    """
    out = []
    for tr in batch.trajectories:
        v = predict(baseline, tr.features, np.arange(len(tr)))
        v_next = np.append(v[1:], 0.0)
        deltas = tr.reward + cfg.gamma * v_next - v
        out.append(discounted_cumsum(deltas, cfg.gamma * cfg.lambda_gae))
    adv = np.concatenate(out)
    if normalize:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return adv


def policy_gradient(batch: RolloutBatch, advantages: np.ndarray, policy: PolicyParams) -> np.ndarray:
    """Gradient of the importance-weighted surrogate at ``policy`` (= the sampling policy)."""
    scores = grad_log_prob_batch(policy, batch.features, batch.raw)
    return (scores * np.asarray(advantages)[:, None]).mean(axis=0)


def surrogate(policy: PolicyParams, old: PolicyParams, batch: RolloutBatch, advantages: np.ndarray) -> float:
    ratio = np.exp(
        log_prob(act_dist(policy, batch.features), batch.raw) - log_prob(act_dist(old, batch.features), batch.raw)
    )
    return float(np.mean(ratio * advantages))


def _quadratic_kl(policy: PolicyParams, direction: np.ndarray, feats: np.ndarray) -> float:
    """Second-order KL change per unit step along ``direction``."""
    a, f = policy.action_dim, policy.feature_dim
    dw = direction[: a * f].reshape(a, f)
    db = direction[a * f : a * f + a]
    dls = direction[a * f + a :]
    d_mean = feats @ dw.T + db
    std = np.exp(policy.log_std)
    return float(np.mean(np.sum(0.5 * (d_mean / std) ** 2, axis=1)) + np.sum(dls * dls))


def natural_direction(policy: PolicyParams, gradient: np.ndarray, feats: np.ndarray, damping: float = 1e-4) -> np.ndarray:
    """Solve ``F d = gradient`` with the exact Fisher matrix of the policy.

    For a linear mean and state-independent log-std the Fisher splits into one
    ``E[phi phi^T] / sigma_j^2`` block per joint (``phi`` = features plus the
    bias input) and a constant 2 for each log-std.
    """
    a, f = policy.action_dim, policy.feature_dim
    phi = np.concatenate([feats, np.ones((len(feats), 1))], axis=1)
    gram = phi.T @ phi / len(phi)
    gram += (damping * np.trace(gram) / len(gram) + 1e-12) * np.eye(len(gram))
    gw = gradient[: a * f].reshape(a, f)
    gb = gradient[a * f : a * f + a]
    var = np.exp(2.0 * policy.log_std)
    sol = np.linalg.solve(gram, np.concatenate([gw, gb[:, None]], axis=1).T).T * var[:, None]
    return np.concatenate([sol[:, :f].ravel(), sol[:, f], gradient[a * f + a :] / 2.0])


def kl_constrained_update(
    policy: PolicyParams,
    gradient: np.ndarray,
    batch: RolloutBatch,
    delta_kl: float,
    natural: bool = True,
) -> tuple[PolicyParams, float]:
    """Ascent step from ``policy``, halved until the batch mean KL is within ``delta_kl``.

    With ``natural=True`` the step follows the Fisher-preconditioned gradient
    and the first trial sits on the trust-region boundary of the local
    quadratic KL model. Otherwise it follows the raw gradient from
    ``alpha = 0.1 / |g|``. If 30 halvings still overshoot, the old policy comes
    back with KL 0.
    """
    if not delta_kl > 0.0:
        raise ValueError("delta_kl must be > 0")
    gradient = np.asarray(gradient, dtype=float)
    if not np.any(gradient):
        return policy, 0.0
    feats = batch.features
    if natural:
        direction = natural_direction(policy, gradient, feats)
        curv = _quadratic_kl(policy, direction, feats)
        if curv <= 0.0 or not math.isfinite(curv):
            return policy, 0.0
        alpha = math.sqrt(delta_kl / curv)
    else:
        direction = gradient
        alpha = 0.1 / (float(np.linalg.norm(gradient)) + 1e-8)
    theta = policy.flat()
    for _ in range(MAX_HALVINGS + 1):
        cand = policy.with_flat(theta + alpha * direction)
        kl = float(np.mean(kl_per_state(policy, cand, feats)))
        if kl <= delta_kl:
            return cand, kl
        alpha *= 0.5
    return policy, 0.0


def train_step(
    policy: PolicyParams, batch: RolloutBatch, cfg: GaeConfig, delta_kl: float
) -> tuple[PolicyParams, float]:
    """One learner update: baseline fit, advantages, gradient, trust-region step."""
    baseline = fit_linear_baseline(batch, cfg)
    adv = gae_advantages(batch, cfg, baseline)
    grad = policy_gradient(batch, adv, policy)
    return kl_constrained_update(policy, grad, batch, delta_kl)

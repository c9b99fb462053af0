"""Linear-in-features diagonal Gaussian policy over joint torques."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LOG_STD_FLOOR = math.log(1e-4)
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ActionDist:
    mean: np.ndarray
    std: np.ndarray


@dataclass(frozen=True, eq=False)
class PolicyParams:
    weights: np.ndarray  # (action_dim, feature_dim)
    bias: np.ndarray  # (action_dim,)
    log_std: np.ndarray  # (action_dim,)

    def __post_init__(self) -> None:
        w = np.array(self.weights, dtype=float, ndmin=2)
        b = np.array(self.bias, dtype=float).reshape(-1)
        ls = np.array(self.log_std, dtype=float).reshape(-1)
        if b.shape[0] != w.shape[0] or ls.shape[0] != w.shape[0]:
            raise ValueError(f"inconsistent shapes: weights {w.shape}, bias {b.shape}, log_std {ls.shape}")
        if not (np.isfinite(w).all() and np.isfinite(b).all() and np.isfinite(ls).all()):
            raise ValueError("policy parameters must be finite")
        for arr in (w, b, ls):
            arr.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)
        object.__setattr__(self, "log_std", ls)

    @property
    def action_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def size(self) -> int:
        return self.action_dim * (self.feature_dim + 1) + self.action_dim

    @classmethod
    def zeros(cls, action_dim: int, feature_dim: int, init_std: float = 1.0) -> PolicyParams:
        return cls(
            weights=np.zeros((action_dim, feature_dim)),
            bias=np.zeros(action_dim),
            log_std=np.full(action_dim, math.log(init_std)),
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([self.weights.ravel(), self.bias, self.log_std])

    def with_flat(self, vec: np.ndarray) -> PolicyParams:
        """Rebuild from a flat vector laid out like :meth:`flat`."""
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.size,):
            raise ValueError(f"expected flat vector of length {self.size}, got {vec.shape}")
        a, f = self.action_dim, self.feature_dim
        nw = a * f
        return PolicyParams(
            weights=vec[:nw].reshape(a, f),
            bias=vec[nw : nw + a],
            log_std=np.maximum(vec[nw + a :], LOG_STD_FLOOR),
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PolicyParams):
            return NotImplemented
        return self.weights.shape == other.weights.shape and np.array_equal(self.flat(), other.flat())

    def to_json(self) -> dict:
        return {
            "dims": {"action_dim": self.action_dim, "feature_dim": self.feature_dim},
            "weights": self.weights.ravel().tolist(),
            "bias": self.bias.tolist(),
            "log_std": self.log_std.tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> PolicyParams:
        a = int(doc["dims"]["action_dim"])
        f = int(doc["dims"]["feature_dim"])
        return cls(
            weights=np.asarray(doc["weights"], dtype=float).reshape(a, f),
            bias=np.asarray(doc["bias"], dtype=float),
            log_std=np.asarray(doc["log_std"], dtype=float),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: str | Path) -> PolicyParams:
        return cls.from_json(json.loads(Path(path).read_text()))


def features(state, t_lim) -> np.ndarray:
    """State observation with the torque limit and a constant appended.

    ``t_lim`` may be a scalar or one value per batched state.
    """
    obs = state.observation()
    lead = obs.shape[:-1]
    tl = np.broadcast_to(np.asarray(t_lim, dtype=float), lead)
    return np.concatenate([obs, tl[..., None], np.ones((*lead, 1))], axis=-1)


def act_dist(params: PolicyParams, feats: np.ndarray) -> ActionDist:
    feats = np.asarray(feats, dtype=float)
    if feats.shape[-1] != params.feature_dim:
        raise ValueError(f"feature length {feats.shape[-1]} != policy feature_dim {params.feature_dim}")
    mean = feats @ params.weights.T + params.bias
    std = np.broadcast_to(np.exp(params.log_std), mean.shape)
    return ActionDist(mean=mean, std=std)


def sample_raw(dist: ActionDist, rng: np.random.Generator) -> np.ndarray:
    return dist.mean + dist.std * rng.standard_normal(dist.mean.shape)


def clamp(raw: np.ndarray, t_lim) -> np.ndarray:
    """Clip each torque component to ``[-t_lim, t_lim]``; ``t_lim`` broadcasts over leading axes."""
    tl = np.asarray(t_lim, dtype=float)
    if np.any(tl <= 0.0):
        raise ValueError("t_lim must be > 0")
    if tl.ndim:
        tl = tl[..., None]
    return np.clip(raw, -tl, tl)


def log_prob(dist: ActionDist, raw: np.ndarray) -> np.ndarray | float:
    z = (np.asarray(raw) - dist.mean) / dist.std
    out = np.sum(-0.5 * z * z - np.log(dist.std) - 0.5 * _LOG_2PI, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def grad_log_prob_batch(params: PolicyParams, feats: np.ndarray, raw: np.ndarray) -> np.ndarray:
    """Per-sample score vectors, shape ``(n, params.size)``."""
    feats = np.atleast_2d(feats)
    raw = np.atleast_2d(raw)
    dist = act_dist(params, feats)
    var = dist.std**2
    diff = raw - dist.mean
    d_mean = diff / var
    d_w = d_mean[:, :, None] * feats[:, None, :]
    d_logstd = diff * diff / var - 1.0
    return np.concatenate([d_w.reshape(len(feats), -1), d_mean, d_logstd], axis=1)


def grad_log_prob(params: PolicyParams, feats: np.ndarray, raw: np.ndarray) -> np.ndarray:
    """Gradient of ``log_prob`` with respect to ``params.flat()`` for one sample."""
    return grad_log_prob_batch(params, feats, raw)[0]


def kl_per_state(old: PolicyParams, new: PolicyParams, feats: np.ndarray) -> np.ndarray:
    d_old = act_dist(old, feats)
    d_new = act_dist(new, feats)
    s1, s2 = d_old.std, d_new.std
    kl = np.log(s2 / s1) + (s1 * s1 + (d_old.mean - d_new.mean) ** 2) / (2.0 * s2 * s2) - 0.5
    return kl.sum(axis=-1)


def mean_kl(old: PolicyParams, new: PolicyParams, states_features) -> float:
    """Average over states of the summed per-joint KL(old || new)."""
    feats = np.asarray(states_features, dtype=float)
    if feats.size == 0:
        raise ValueError("mean_kl needs at least one state")
    if old == new:
        return 0.0
    return float(np.mean(kl_per_state(old, new, np.atleast_2d(feats))))

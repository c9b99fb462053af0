"""Experiment configuration: defaults, presets, JSON load/validate."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .safety import SafetyConfig, Variant


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field path."""


@dataclass(frozen=True)
class EnvConfig:
    task: str = "arm"
    mass_factor: float = 10.0
    damping_factor: float = 10.0
    inertia_factor: float = 10.0
    u_lim: float = 0.2
    u_prime_lim: float = 0.0
    lambda_penalty: float = 0.05
    horizon: int = 200
    angle_range: float = 0.1


@dataclass(frozen=True)
class LearnerConfig:
    gamma: float = 0.95
    lambda_gae: float = 0.98
    delta_kl_pretrain: float = 0.01
    delta_kl_finetune: float = 0.05
    episodes_per_batch_pretrain: int = 50
    episodes_per_batch_finetune: int = 5
    pretrain_iterations: int = 150
    finetune_iterations: int = 100
    init_std: float = 0.3


@dataclass(frozen=True)
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    safety: SafetyConfig = field(default_factory=SafetyConfig)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    # one run per (variant, d_safe, seed); empty d_safe_values means safety.d_safe only
    variants: tuple[str, ...] = ("full",)
    d_safe_values: tuple[float, ...] = ()
    preset: str | None = None

    def to_json(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["safety"]["variant"] = Variant(self.safety.variant).value
        doc["seeds"] = list(self.seeds)
        doc["variants"] = list(self.variants)
        doc["d_safe_values"] = list(self.d_safe_values)
        return doc

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")


PRESETS: dict[str, dict[str, Any]] = {
    "default": {},
    "adaptive_vs_fixed": {"variants": ["full", "fixed_limit"]},
    "ablation": {"variants": ["full", "v2_no_dpu1", "v3_no_dpu2", "v4_neither"]},
    # sweep values are this package's choice
    "dsafe_sweep": {"variants": ["full"], "d_safe_values": [0.25, 0.5, 1.0, 2.0]},
    "large_batch": {"variants": ["full"], "learner": {"episodes_per_batch_finetune": 50}},
    "pointmass": {
        "env": {"task": "pointmass", "u_lim": 1.0, "angle_range": 0.1},
        "learner": {
            "pretrain_iterations": 0,
            "finetune_iterations": 50,
            "episodes_per_batch_finetune": 20,
            "init_std": 1.0,
        },
    },
}


def _merge(base: dict, over: dict, path: str) -> dict:
    out = dict(base)
    for key, val in over.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"{where}: unknown field")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{where}: expected an object")
            out[key] = _merge(base[key], val, where)
        else:
            out[key] = val
    return out


def _build(cls, doc: dict, path: str):
    kwargs = {}
    for f in dataclasses.fields(cls):
        val = doc[f.name]
        where = f"{path}.{f.name}" if path else f.name
        default = getattr(cls(), f.name) if f.name not in ("env", "learner", "safety") else None
        if isinstance(default, bool) or default is None:
            kwargs[f.name] = val
            continue
        try:
            if isinstance(default, int) and not isinstance(val, bool):
                if isinstance(val, float) and not val.is_integer():
                    raise TypeError
                val = int(val)
            elif isinstance(default, float):
                val = float(val)
            elif isinstance(default, tuple):
                val = tuple(val)
        except (TypeError, ValueError):
            raise ConfigError(f"{where}: bad value {val!r}") from None
        kwargs[f.name] = val
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _validate(cfg: ExperimentConfig) -> None:
    env, lrn = cfg.env, cfg.learner
    if env.task not in ("arm", "pointmass"):
        raise ConfigError(f"env.task: unknown task {env.task!r}")
    if min(env.mass_factor, env.damping_factor, env.inertia_factor) < 1.0:
        raise ConfigError("env: mismatch factors must be >= 1")
    if env.horizon < 1:
        raise ConfigError("env.horizon: must be >= 1")
    if not 0.0 <= env.u_prime_lim <= env.u_lim:
        raise ConfigError("env.u_prime_lim: need 0 <= u_prime_lim <= u_lim")
    if env.angle_range < 0.0:
        raise ConfigError("env.angle_range: must be >= 0")
    if not (0.0 < lrn.gamma <= 1.0):
        raise ConfigError("learner.gamma: must lie in (0, 1]")
    if not (0.0 <= lrn.lambda_gae <= 1.0):
        raise ConfigError("learner.lambda_gae: must lie in [0, 1]")
    for name in ("delta_kl_pretrain", "delta_kl_finetune", "init_std"):
        if not getattr(lrn, name) > 0.0:
            raise ConfigError(f"learner.{name}: must be > 0")
    for name in ("episodes_per_batch_pretrain", "episodes_per_batch_finetune"):
        if getattr(lrn, name) < 1:
            raise ConfigError(f"learner.{name}: must be >= 1")
    if lrn.pretrain_iterations < 0 or lrn.finetune_iterations < 0:
        raise ConfigError("learner: iteration counts must be >= 0")
    if not cfg.seeds:
        raise ConfigError("seeds: need at least one seed")
    if not cfg.variants:
        raise ConfigError("variants: need at least one variant")
    for i, v in enumerate(cfg.variants):
        try:
            Variant(v)
        except ValueError:
            raise ConfigError(f"variants[{i}]: unknown variant {v!r}") from None
    for i, d in enumerate(cfg.d_safe_values):
        if not d > cfg.safety.t_min:
            raise ConfigError(f"d_safe_values[{i}]: must exceed safety.t_min")


def load_config(source: str | Path | dict | None = None, preset: str | None = None, seeds=None) -> ExperimentConfig:
    """Defaults, then the preset, then the file/dict, then explicit seeds."""
    doc = ExperimentConfig().to_json()
    if source is not None and not isinstance(source, dict):
        try:
            source = json.loads(Path(source).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"<file>: invalid JSON ({exc})") from None
    preset = preset or (source or {}).get("preset")
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"preset: unknown preset {preset!r}")
        doc = _merge(doc, PRESETS[preset], "")
        doc["preset"] = preset
    if source:
        doc = _merge(doc, {k: v for k, v in source.items() if k != "preset"}, "")
    if seeds is not None:
        doc["seeds"] = list(seeds)
    cfg = ExperimentConfig(
        env=_build(EnvConfig, doc["env"], "env"),
        learner=_build(LearnerConfig, doc["learner"], "learner"),
        safety=_build(SafetyConfig, doc["safety"], "safety"),
        seeds=tuple(int(s) for s in doc["seeds"]),
        variants=tuple(doc["variants"]),
        d_safe_values=tuple(float(d) for d in doc["d_safe_values"]),
        preset=doc["preset"],
    )
    _validate(cfg)
    return cfg

"""Pre-train then transfer, one job per (variant, d_safe, seed).

Every iteration draws its randomness from ``SeedSequence([seed, phase,
iteration])``, so a job resumed from its last checkpoint replays exactly what an
uninterrupted job would have done.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .env import ArmTask, PointMassTask, SafetySpec, make_test_model, make_train_model
from .learner import GaeConfig, collect, train_step
from .policy import PolicyParams
from .safety import SafetyConfig, Variant, run_iteration

log = logging.getLogger(__name__)

WORKERS_ENV = "SAFETRANSFER_WORKERS"
PRETRAIN, FINETUNE = 0, 1
RECORDS = "records.jsonl"
STATE = "state.json"


@dataclass(frozen=True)
class Job:
    run_id: str
    seed: int
    variant: str
    d_safe: float


def iteration_rng(seed: int, phase: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, phase, iteration]))


def make_tasks(cfg: ExperimentConfig):
    """(train task, test task) for the configured environment."""
    env = cfg.env
    if env.task == "pointmass":
        task = PointMassTask(start_range=env.angle_range)
        return task, task
    train = ArmTask(model=make_train_model(), angle_range=env.angle_range)
    test = ArmTask(
        model=make_test_model(env.mass_factor, env.damping_factor, env.inertia_factor), angle_range=env.angle_range
    )
    return train, test


def safety_spec(cfg: ExperimentConfig) -> SafetySpec:
    return SafetySpec(u_lim=cfg.env.u_lim, u_prime_lim=cfg.env.u_prime_lim, lambda_penalty=cfg.env.lambda_penalty)


def initial_policy(cfg: ExperimentConfig, task) -> PolicyParams:
    return PolicyParams.zeros(task.action_dim, task.obs_dim + 2, init_std=cfg.learner.init_std)


def expand_jobs(cfg: ExperimentConfig) -> list[Job]:
    d_values = cfg.d_safe_values or (cfg.safety.d_safe,)
    jobs = []
    for variant in cfg.variants:
        for d in d_values:
            for seed in cfg.seeds:
                tag = f"{variant}_seed{seed}" if len(d_values) == 1 else f"{variant}_dsafe{d:g}_seed{seed}"
                jobs.append(Job(run_id=tag, seed=seed, variant=variant, d_safe=d))
    return jobs


def _write_json_atomic(path: Path, doc: dict) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc))
    os.replace(tmp, path)


def pretrain(cfg: ExperimentConfig, seed: int, ckpt_dir: Path) -> PolicyParams:
    """Train on the nominal model with a per-episode random torque limit."""
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    final = ckpt_dir / f"pretrain_seed{seed}.json"
    if final.exists():
        return PolicyParams.load(final)
    partial = ckpt_dir / f"pretrain_seed{seed}.partial.json"
    train_task, _ = make_tasks(cfg)
    spec = safety_spec(cfg)
    gae = GaeConfig(cfg.learner.gamma, cfg.learner.lambda_gae)
    lrn, s = cfg.learner, cfg.safety
    policy, start = initial_policy(cfg, train_task), 0
    if partial.exists():
        doc = json.loads(partial.read_text())
        policy, start = PolicyParams.from_json(doc["policy"]), doc["iteration"]
    for it in range(start, lrn.pretrain_iterations):
        rng = iteration_rng(seed, PRETRAIN, it)
        n = lrn.episodes_per_batch_pretrain
        limits = rng.uniform(s.t_min, s.t_max, size=n)
        batch = collect(policy, train_task, spec, limits, n, cfg.env.horizon, rng)
        policy, _ = train_step(policy, batch, gae, lrn.delta_kl_pretrain)
        _write_json_atomic(partial, {"iteration": it + 1, "policy": policy.to_json()})
        if it % 25 == 0:
            log.info("pretrain seed=%d it=%d return=%.3f", seed, it, batch.mean_return())
    policy.save(final)
    partial.unlink(missing_ok=True)
    return policy


def finetune(cfg: ExperimentConfig, job: Job, start_policy: PolicyParams, run_dir: Path) -> Path:
    """Transfer loop with the torque-limit controller; appends one record per iteration."""
    run_dir.mkdir(parents=True, exist_ok=True)
    records = run_dir / RECORDS
    state_path = run_dir / STATE
    _, test_task = make_tasks(cfg)
    spec = safety_spec(cfg)
    gae = GaeConfig(cfg.learner.gamma, cfg.learner.lambda_gae)
    scfg = replace(cfg.safety, d_safe=job.d_safe, variant=Variant(job.variant))
    delta = cfg.learner.delta_kl_finetune
    n_eps = cfg.learner.episodes_per_batch_finetune

    policy = start_policy
    t_lim = scfg.t_max if scfg.variant is Variant.FIXED else scfg.t_min
    start = 0
    if state_path.exists():
        st = json.loads(state_path.read_text())
        policy, t_lim, start = PolicyParams.from_json(st["policy"]), st["t_lim"], st["iteration"]
    # drop any record written after the last checkpoint
    lines = records.read_text().splitlines(keepends=True)[:start] if records.exists() else []
    records.write_text("".join(lines))

    with records.open("a", encoding="utf-8", newline="\n") as fh:
        for it in range(start, cfg.learner.finetune_iterations):
            rng = iteration_rng(job.seed, FINETUNE, it)
            batch = collect(policy, test_task, spec, t_lim, n_eps, cfg.env.horizon, rng)
            new_policy, kl = train_step(policy, batch, gae, delta)
            rep = run_iteration(new_policy, batch, t_lim, scfg, delta)
            rec = {
                "run_id": job.run_id,
                "seed": job.seed,
                "variant": scfg.variant.value,
                "d_safe": scfg.d_safe,
                "iteration": it,
                "t_lim": t_lim,
                "p_u": rep.p_u,
                "delta_pu1": rep.delta_pu1,
                "delta_pu2": rep.delta_pu2,
                "p_u_pred": rep.p_u_pred,
                "t_lim_next": rep.t_lim_next,
                "expected_damage": rep.expected_damage,
                "mean_return": batch.mean_return(),
                "mean_base_return": batch.mean_base_return(),
                "achieved_kl": kl,
                "delta_kl": delta,
            }
            fh.write(json.dumps(rec) + "\n")
            fh.flush()
            policy, t_lim = new_policy, rep.t_lim_next
            _write_json_atomic(state_path, {"iteration": it + 1, "t_lim": t_lim, "policy": policy.to_json()})
    return run_dir


def _pretrain_job(args):
    cfg, seed, ckpt_dir = args
    return seed, pretrain(cfg, seed, ckpt_dir).to_json()


def _finetune_job(args):
    cfg, job, policy_doc, run_dir = args
    finetune(cfg, job, PolicyParams.from_json(policy_doc), run_dir)
    return job.run_id


def worker_count() -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _map(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


def run(cfg: ExperimentConfig, out: str | Path, workers: int | None = None) -> Path:
    """Execute every job of ``cfg`` under ``out``; existing progress is resumed."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.json")
    workers = worker_count() if workers is None else workers
    ckpt_dir = out / "checkpoints"
    pre = dict(_map(_pretrain_job, [(cfg, s, ckpt_dir) for s in cfg.seeds], workers))
    jobs = expand_jobs(cfg)
    _map(_finetune_job, [(cfg, j, pre[j.seed], out / "runs" / j.run_id) for j in jobs], workers)
    return out

"""CSV emission and constraint audit over a run directory."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .runner import RECORDS

CSV_HEADER = (
    "run_id,seed,variant,iteration,t_lim,p_u,delta_pu1,delta_pu2,"
    "p_u_pred,expected_damage,mean_return,achieved_kl"
)
SUMMARY_HEADER = "variant,d_safe,iteration,n_seeds,metric,mean,variance"
SUMMARY_METRICS = ("t_lim", "expected_damage", "p_u", "mean_return")
TOL = 1e-12


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def read_records(run_dir: Path) -> list[dict]:
    path = Path(run_dir) / RECORDS
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def run_dirs(root: str | Path) -> list[Path]:
    """Run directories under an experiment dir, or ``[root]`` if it is one."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"no run directory at {root}")
    if (root / RECORDS).exists():
        return [root]
    runs = root / "runs"
    return sorted(p for p in runs.iterdir() if p.is_dir()) if runs.is_dir() else []


def write_iterations_csv(run_dir: Path) -> Path:
    out = Path(run_dir) / "iterations.csv"
    cols = CSV_HEADER.split(",")
    with out.open("w", encoding="utf-8", newline="") as fh:
        fh.write(CSV_HEADER + "\n")
        for rec in read_records(run_dir):
            fh.write(",".join(_fmt(rec[c]) for c in cols) + "\n")
    return out


def write_summary_csv(root: Path, dirs: list[Path]) -> Path:
    groups: dict[tuple, dict[int, list[dict]]] = {}
    for d in dirs:
        for rec in read_records(d):
            key = (rec["variant"], rec.get("d_safe"))
            groups.setdefault(key, {}).setdefault(rec["iteration"], []).append(rec)
    out = Path(root) / "summary.csv"
    with out.open("w", encoding="utf-8", newline="") as fh:
        fh.write(SUMMARY_HEADER + "\n")
        for (variant, d_safe), by_it in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1] or 0.0)):
            for it in sorted(by_it):
                recs = by_it[it]
                for m in SUMMARY_METRICS:
                    vals = np.array([r[m] for r in recs], dtype=float)
                    fh.write(
                        f"{variant},{_fmt(d_safe)},{it},{len(recs)},{m},"
                        f"{_fmt(float(vals.mean()))},{_fmt(float(vals.var()))}\n"
                    )
    return out


def emit_csv(root: str | Path) -> list[Path]:
    """Write ``iterations.csv`` in every run dir and ``summary.csv`` at ``root``."""
    dirs = run_dirs(root)
    written = [write_iterations_csv(d) for d in dirs]
    written.append(write_summary_csv(Path(root), dirs))
    return written


@dataclass
class RunAudit:
    run_id: str
    variant: str
    d_safe: float
    iterations: int
    within_budget: float  # fraction of iterations with p_u * t_lim <= d_safe
    violations: int
    constructive_ok: bool  # p_u_pred * t_lim_next <= d_safe at every iteration
    max_growth: float
    max_kl_excess: float


@dataclass
class Audit:
    runs: list[RunAudit] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        """Whether every full-variant run kept the constructive bound."""
        return all(r.constructive_ok for r in self.runs if r.variant == "full")

    def lines(self) -> list[str]:
        out = []
        for r in self.runs:
            out.append(
                f"{r.run_id}: variant={r.variant} d_safe={r.d_safe:g} iters={r.iterations} "
                f"within_budget={r.within_budget:.3f} violations={r.violations} "
                f"constructive={'ok' if r.constructive_ok else 'FAIL'} "
                f"max_growth={r.max_growth:.6f} max_kl_excess={r.max_kl_excess:.3g}"
            )
        out.append("constructive invariant: " + ("PASS" if self.ok else "FAIL"))
        return out


def audit_run(run_dir: Path, d_safe: float | None = None) -> RunAudit:
    recs = read_records(run_dir)
    variant = recs[0]["variant"] if recs else "unknown"
    budget = d_safe if d_safe is not None else (recs[0]["d_safe"] if recs else float("nan"))
    dmg = np.array([r["expected_damage"] for r in recs], dtype=float)
    pred = np.array([r["p_u_pred"] * r["t_lim_next"] for r in recs], dtype=float)
    growth = [r["t_lim_next"] / r["t_lim"] for r in recs]
    kl_excess = [r["achieved_kl"] - r["delta_kl"] for r in recs]
    return RunAudit(
        run_id=Path(run_dir).name,
        variant=variant,
        d_safe=budget,
        iterations=len(recs),
        within_budget=float(np.mean(dmg <= budget)) if recs else 1.0,
        violations=int(np.sum(dmg > budget)),
        constructive_ok=bool(np.all(pred <= budget + TOL)),
        max_growth=max(growth, default=1.0),
        max_kl_excess=max(kl_excess, default=0.0),
    )


def verify(root: str | Path, d_safe: float | None = None) -> Audit:
    """Audit every run; ``d_safe`` overrides the budget stored in the records."""
    return Audit(runs=[audit_run(d, d_safe) for d in run_dirs(root)])


def load_summary(path: str | Path) -> list[dict]:
    with Path(path).open(encoding="utf-8") as fh:
        return list(csv.DictReader(fh))

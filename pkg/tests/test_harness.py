import json
import shutil
import subprocess
import sys

import pytest

from safetransfer import runner
from safetransfer.cli import main
from safetransfer.config import ConfigError, ExperimentConfig, load_config
from safetransfer.report import CSV_HEADER, emit_csv, load_summary, read_records, verify
from safetransfer.runner import expand_jobs, run, worker_count

GOLDEN_HEADER = (
    "run_id,seed,variant,iteration,t_lim,p_u,delta_pu1,delta_pu2,p_u_pred,expected_damage,mean_return,achieved_kl"
)

TINY = {
    "env": {"horizon": 20},
    "learner": {
        "pretrain_iterations": 2,
        "finetune_iterations": 4,
        "episodes_per_batch_pretrain": 2,
        "episodes_per_batch_finetune": 2,
    },
    "seeds": [0, 1],
    "variants": ["full", "fixed_limit"],
}


def tiny(**over):
    doc = json.loads(json.dumps(TINY))
    for k, v in over.items():
        if isinstance(v, dict):
            doc.setdefault(k, {}).update(v)
        else:
            doc[k] = v
    return load_config(doc)


def csv_bytes(out):
    return {p.parent.name: p.read_bytes() for p in sorted(out.glob("runs/*/iterations.csv"))}


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    run(tiny(), out, workers=1)
    emit_csv(out)
    return out


class TestConfig:
    def test_defaults(self):
        cfg = load_config()
        assert cfg.learner.gamma == 0.95 and cfg.learner.lambda_gae == 0.98
        assert (cfg.learner.delta_kl_pretrain, cfg.learner.delta_kl_finetune) == (0.01, 0.05)
        assert (cfg.learner.episodes_per_batch_pretrain, cfg.learner.episodes_per_batch_finetune) == (50, 5)
        assert cfg.env.horizon == 200
        s = cfg.safety
        assert (s.t_min, s.t_max, s.d_safe, s.growth_cap) == (0.1, 3.0, 0.5, 1.05)

    def test_file_round_trip(self, tmp_path):
        cfg = tiny(seeds=[3, 7])
        cfg.dump(tmp_path / "c.json")
        assert load_config(tmp_path / "c.json") == cfg

    def test_seeds_override(self):
        assert load_config(TINY, seeds=[9]).seeds == (9,)

    @pytest.mark.parametrize(
        "doc, where",
        [
            ({"learner": {"gamma": 1.5}}, "learner.gamma"),
            ({"learner": {"nope": 1}}, "learner.nope"),
            ({"env": {"horizon": "long"}}, "env.horizon"),
            ({"env": {"horizon": 2.5}}, "env.horizon"),
            ({"env": 3}, "env"),
            ({"variants": ["full", "v9"]}, "variants[1]"),
            ({"d_safe_values": [0.5, 0.05]}, "d_safe_values[1]"),
            ({"safety": {"t_min": -1.0}}, "safety"),
            ({"env": {"task": "cartpole"}}, "env.task"),
            ({"preset": "huge"}, "preset"),
            ({"seeds": []}, "seeds"),
        ],
    )
    def test_errors_name_the_field(self, doc, where):
        with pytest.raises(ConfigError) as exc:
            load_config(doc)
        assert str(exc.value).startswith(where)

    def test_bad_json(self, tmp_path):
        (tmp_path / "c.json").write_text("{oops")
        with pytest.raises(ConfigError):
            load_config(tmp_path / "c.json")


class TestPresets:
    def test_adaptive_vs_fixed(self):
        # [PAPER] 5 seeds, adaptive plus fixed at 3
        jobs = expand_jobs(load_config(preset="adaptive_vs_fixed"))
        assert len(jobs) == 10
        assert sorted({j.variant for j in jobs}) == ["fixed_limit", "full"]

    def test_ablation(self):
        jobs = expand_jobs(load_config(preset="ablation"))
        assert len(jobs) == 20
        assert {j.variant for j in jobs} == {"full", "v2_no_dpu1", "v3_no_dpu2", "v4_neither"}

    def test_dsafe_sweep(self):
        jobs = expand_jobs(load_config(preset="dsafe_sweep"))
        assert len(jobs) == 4 * 5
        assert sorted({j.d_safe for j in jobs}) == [0.25, 0.5, 1.0, 2.0]
        assert len({j.run_id for j in jobs}) == 20

    def test_file_overrides_preset(self):
        cfg = load_config({"preset": "large_batch", "seeds": [1]})
        assert cfg.learner.episodes_per_batch_finetune == 50 and cfg.seeds == (1,)


class TestRun:
    def test_layout(self, tiny_run):
        names = sorted(p.name for p in (tiny_run / "runs").iterdir())
        assert names == ["fixed_limit_seed0", "fixed_limit_seed1", "full_seed0", "full_seed1"]
        assert sorted(p.name for p in (tiny_run / "checkpoints").iterdir()) == [
            "pretrain_seed0.json",
            "pretrain_seed1.json",
        ]
        assert load_config(tiny_run / "config.json") == tiny()

    def test_one_record_per_iteration(self, tiny_run):
        recs = read_records(tiny_run / "runs" / "full_seed0")
        assert [r["iteration"] for r in recs] == [0, 1, 2, 3]
        # the limit carried forward is the one used next
        assert all(a["t_lim_next"] == b["t_lim"] for a, b in zip(recs, recs[1:]))
        assert recs[0]["t_lim"] == 0.1

    def test_fixed_limit_stays(self, tiny_run):
        recs = read_records(tiny_run / "runs" / "fixed_limit_seed1")
        assert {r["t_lim"] for r in recs} == {3.0}

    def test_byte_identical_rerun(self, tiny_run, tmp_path):
        run(tiny(), tmp_path, workers=1)
        emit_csv(tmp_path)
        assert csv_bytes(tmp_path) == csv_bytes(tiny_run)

    def test_parallel_matches_serial(self, tiny_run, tmp_path):
        run(tiny(), tmp_path, workers=2)
        emit_csv(tmp_path)
        assert csv_bytes(tmp_path) == csv_bytes(tiny_run)

    def test_resume_equals_fresh(self, tiny_run, tmp_path, monkeypatch):
        real = runner.collect
        calls = {"n": 0}

        def flaky(*a, **k):
            calls["n"] += 1
            if calls["n"] == 8:  # 2 seeds x 2 pretrain its, then partway into fine-tuning
                raise KeyboardInterrupt
            return real(*a, **k)

        monkeypatch.setattr(runner, "collect", flaky)
        with pytest.raises(KeyboardInterrupt):
            run(tiny(), tmp_path, workers=1)
        monkeypatch.setattr(runner, "collect", real)
        # a record written after the last checkpoint must be discarded
        partial = next(p for p in (tmp_path / "runs").iterdir() if (p / "records.jsonl").exists())
        with (partial / "records.jsonl").open("a") as fh:
            fh.write(json.dumps({"iteration": 99}) + "\n")
        run(tiny(), tmp_path, workers=1)
        emit_csv(tmp_path)
        assert csv_bytes(tmp_path) == csv_bytes(tiny_run)

    def test_pretrain_resume(self, tiny_run, tmp_path, monkeypatch):
        real = runner.collect
        calls = {"n": 0}

        def flaky(*a, **k):
            calls["n"] += 1
            if calls["n"] == 2:
                raise KeyboardInterrupt
            return real(*a, **k)

        monkeypatch.setattr(runner, "collect", flaky)
        with pytest.raises(KeyboardInterrupt):
            run(tiny(), tmp_path, workers=1)
        assert (tmp_path / "checkpoints" / "pretrain_seed0.partial.json").exists()
        monkeypatch.setattr(runner, "collect", real)
        run(tiny(), tmp_path, workers=1)
        a = (tmp_path / "checkpoints" / "pretrain_seed0.json").read_bytes()
        assert a == (tiny_run / "checkpoints" / "pretrain_seed0.json").read_bytes()

    def test_pointmass_runs(self, tmp_path):
        cfg = load_config(
            {"preset": "pointmass", "seeds": [0], "learner": {"finetune_iterations": 2}, "env": {"horizon": 10}}
        )
        run(cfg, tmp_path, workers=1)
        assert len(read_records(tmp_path / "runs" / "full_seed0")) == 2


class TestWorkers:
    def test_env_caps(self, monkeypatch):
        monkeypatch.setenv("SAFETRANSFER_WORKERS", "3")
        assert worker_count() == 3
        monkeypatch.setenv("SAFETRANSFER_WORKERS", "0")
        assert worker_count() == 1

    def test_default_is_cpu_count(self, monkeypatch):
        monkeypatch.delenv("SAFETRANSFER_WORKERS", raising=False)
        assert worker_count() >= 1


class TestEmitCsv:
    def test_golden_header(self, tiny_run):
        assert CSV_HEADER == GOLDEN_HEADER
        for p in tiny_run.glob("runs/*/iterations.csv"):
            assert p.read_text(encoding="utf-8").splitlines()[0] == GOLDEN_HEADER

    def test_rows_and_line_endings(self, tiny_run):
        raw = (tiny_run / "runs" / "full_seed1" / "iterations.csv").read_bytes()
        assert b"\r" not in raw
        lines = raw.decode().splitlines()
        assert len(lines) == 1 + 4
        assert all(len(line.split(",")) == 12 for line in lines)
        assert lines[1].startswith("full_seed1,1,full,0,0.1,")

    def test_empty_run_is_header_only(self, tmp_path):
        (tmp_path / "records.jsonl").write_text("")
        emit_csv(tmp_path)
        assert (tmp_path / "iterations.csv").read_text() == GOLDEN_HEADER + "\n"

    def test_summary_counts(self, tiny_run):
        rows = load_summary(tiny_run / "summary.csv")
        full = [r for r in rows if r["variant"] == "full" and r["metric"] == "t_lim"]
        assert len(full) == 4 and all(r["n_seeds"] == "2" for r in full)

    def test_identical_series_zero_variance(self, tiny_run, tmp_path):
        shutil.copytree(tiny_run / "runs" / "full_seed0", tmp_path / "runs" / "a")
        shutil.copytree(tiny_run / "runs" / "full_seed0", tmp_path / "runs" / "b")
        emit_csv(tmp_path)
        rows = load_summary(tmp_path / "summary.csv")
        assert rows and all(float(r["variance"]) == 0.0 for r in rows)

    def test_missing_dir(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            emit_csv(tmp_path / "absent")


class TestVerify:
    def test_full_holds(self, tiny_run):
        audit = verify(tiny_run)
        assert audit.ok
        for r in audit.runs:
            assert r.iterations == 4
            if r.variant == "full":
                assert r.constructive_ok and r.max_growth <= 1.05 + 1e-12
            assert r.max_kl_excess <= 0.0

    def test_fixed_limit_early_damage(self, tiny_run):
        # an untrained-on-test policy at 3 N m spends damage above the budget
        audit = verify(tiny_run)
        fixed = [r for r in audit.runs if r.variant == "fixed_limit"]
        assert any(r.violations > 0 for r in fixed)

    def test_tampered_record_fails(self, tiny_run, tmp_path):
        shutil.copytree(tiny_run, tmp_path / "x")
        path = tmp_path / "x" / "runs" / "full_seed0" / "records.jsonl"
        recs = [json.loads(line) for line in path.read_text().splitlines()]
        recs[2]["p_u_pred"] = 1.0
        recs[2]["t_lim_next"] = 0.6
        path.write_text("".join(json.dumps(r) + "\n" for r in recs))
        assert not verify(tmp_path / "x").ok


class TestCli:
    def test_run_emit_verify(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("SAFETRANSFER_WORKERS", "1")
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps(TINY))
        out = tmp_path / "out"
        assert main(["run", "--config", str(cfg), "--seeds", "4", "--out", str(out)]) == 0
        printed = capsys.readouterr().out.split()
        assert str(out / "summary.csv") in printed
        assert sorted(p.name for p in (out / "runs").iterdir()) == ["fixed_limit_seed4", "full_seed4"]
        assert main(["emit-csv", "--run", str(out)]) == 0
        capsys.readouterr()
        assert main(["verify", "--run", str(out), "--d-safe", "0.5"]) == 0
        assert capsys.readouterr().out.splitlines()[-1] == "constructive invariant: PASS"
        # a tighter budget than the run used breaks the constructive check
        assert main(["verify", "--run", str(out), "--d-safe", "0.01"]) == 1

    def test_config_error_exit(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"learner": {"gamma": 0}}))
        assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
        assert "learner.gamma" in capsys.readouterr().err

    def test_missing_run_exit(self, tmp_path):
        assert main(["verify", "--run", str(tmp_path / "nope"), "--d-safe", "0.5"]) == 2

    def test_module_entry_point(self):
        proc = subprocess.run(
            [sys.executable, "-m", "safetransfer", "--help"], capture_output=True, text=True, check=False
        )
        assert proc.returncode == 0 and "emit-csv" in proc.stdout


def test_default_config_is_valid():
    assert isinstance(load_config(), ExperimentConfig)

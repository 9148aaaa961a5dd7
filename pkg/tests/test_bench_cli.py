"""Runner, cache, ablation bookkeeping and CLI exit codes on a config small enough to train in a second."""
import json
from pathlib import Path

import pytest

from promptcl import bench, cli
from promptcl.bench import (CacheError, ResultCollisionError, SanityGateError, directional_checks,
                            get_backbone, probe_threshold, read_rows, result_hash, run_ablation_matrix,
                            run_experiment, summarize_rows)
from promptcl.config import load_config

TINY = Path(__file__).parent / "tiny.yaml"


@pytest.fixture
def cfg():
    return load_config(TINY)


@pytest.fixture
def cache(tmp_path, monkeypatch):
    d = tmp_path / "cache"
    monkeypatch.setenv(bench.CACHE_ENV, str(d))
    return d


def _hashed_bytes(run_dir):
    return {n: (run_dir / n).read_bytes() for n in bench.HASHED_FILES if (run_dir / n).exists()}


def test_probe_threshold():
    assert probe_threshold(20) == pytest.approx(0.25)
    assert probe_threshold(6) == pytest.approx(0.5 * (1 + 1 / 6))
    assert probe_threshold(2) < 1.0


def test_run_layout_and_determinism(cfg, cache, tmp_path):
    a = run_experiment(cfg, tmp_path / "a")
    b = run_experiment(cfg, tmp_path / "b")
    assert not a.cache_hit and b.cache_hit
    assert a.path.name == cfg.run_name() == b.path.name
    assert a.result_hash == b.result_hash
    assert _hashed_bytes(a.path) == _hashed_bytes(b.path)
    for name in ("config.yaml", "summary.json", "sanity.json", "final.ckpt", "manifest.json", "task_log.json"):
        assert (a.path / name).exists(), name
    manifest = json.loads((a.path / "manifest.json").read_text())
    assert manifest["result_hash"] == result_hash(a.path)
    assert not [p for p in (tmp_path / "a").iterdir() if p.name.startswith(".")]


def test_cache_hit_is_bit_identical(cfg, cache):
    b1, _, hit1 = get_backbone(cfg)
    b2, _, hit2 = get_backbone(cfg)
    assert (hit1, hit2) == (False, True)
    assert b1.content_hash() == b2.content_hash()
    assert len(list(cache.iterdir())) == 1


def test_cache_rejects_corruption_and_foreign_keys(cfg, cache):
    get_backbone(cfg)
    (path,) = cache.iterdir()
    raw = bytearray(path.read_bytes())
    raw[-3] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CacheError, match="corrupt"):
        get_backbone(cfg)
    path.unlink()
    get_backbone(cfg.with_seed(1))
    (other,) = cache.iterdir()
    other.rename(path)
    with pytest.raises(CacheError, match="different config"):
        get_backbone(cfg)


def test_seeds_share_prefix(cfg, cache, tmp_path):
    a = run_experiment(cfg, tmp_path)
    b = run_experiment(cfg, tmp_path, seed=1)
    assert a.path.name.split("_")[0] == b.path.name.split("_")[0]
    assert a.result_hash != b.result_hash


def test_identical_rerun_keeps_target_and_collision_refuses(cfg, cache, tmp_path):
    first = run_experiment(cfg, tmp_path)
    again = run_experiment(cfg, tmp_path)
    assert again.result_hash == first.result_hash
    summary = first.path / "summary.json"
    summary.write_text(summary.read_text().replace('"last"', '"last" ', 1))
    tampered = summary.read_bytes()
    with pytest.raises(ResultCollisionError):
        run_experiment(cfg, tmp_path)
    assert summary.read_bytes() == tampered


def test_reuse_skips_training(cfg, cache, tmp_path, monkeypatch):
    first = run_experiment(cfg, tmp_path)
    monkeypatch.setattr(bench, "run_stream", lambda *a, **k: pytest.fail("retrained"))
    res = run_experiment(cfg, tmp_path, reuse=True)
    assert res.reused and res.result_hash == first.result_hash and res.summary == first.summary


def test_probe_gate_blocks_training(cfg, cache, tmp_path, monkeypatch):
    monkeypatch.setattr(bench, "linear_probe_accuracy", lambda *a, **k: 0.2)
    monkeypatch.setattr(bench, "run_stream", lambda *a, **k: pytest.fail("trained past the gate"))
    with pytest.raises(SanityGateError):
        run_experiment(cfg, tmp_path)


def test_ablation_rows_summary_and_files(cfg, cache, tmp_path):
    res = run_ablation_matrix(cfg, seeds=[0, 1], variants=["backbone", "full", "til"], out_root=tmp_path)
    assert len(res.rows) == 4
    assert [(r["variant"], r["seed"]) for r in res.rows] == [("backbone", 0), ("full", 0), ("backbone", 1), ("full", 1)]
    names = [s["variant"] for s in res.summary]
    assert names == ["backbone", "full", "til"]
    til = res.summary[-1]
    assert til["task_acc"] == 1.0 and til["n_seeds"] == 2
    assert {c["check"] for c in res.checks} >= {"til task_acc = 1", "til_last >= last on every run"}
    assert read_rows(tmp_path / "ablation_runs.csv") == res.rows
    stored = json.loads((tmp_path / "ablation_checks.json").read_text())
    assert stored == res.checks
    assert len([p for p in tmp_path.iterdir() if p.name.endswith(("_seed0", "_seed1"))]) == 4


def test_ablation_rejects_unknown_variant(cfg, tmp_path):
    with pytest.raises(ValueError, match="unknown variants"):
        run_ablation_matrix(cfg, [0], ["full", "nonsense"], tmp_path, tmp_path)
    with pytest.raises(ValueError, match="derived from 'full'"):
        run_ablation_matrix(cfg, [0], ["backbone", "til"], tmp_path, tmp_path)


def test_component_grid_counting_contract(cfg, cache, tmp_path):
    res = run_ablation_matrix(cfg, seeds=range(5), variants=list(bench.COMPONENT_GRID), out_root=tmp_path)
    assert len(res.rows) == 30 and len(res.summary) == 6
    csv_lines = (tmp_path / "ablation_runs.csv").read_text().splitlines()
    assert len(csv_lines) == 1 + 30
    assert len((tmp_path / "ablation_summary.csv").read_text().splitlines()) == 1 + 6
    assert any(c["check"] == "full - backbone >= 0.02 (last)" for c in res.checks)


def _row(variant, seed, last, **kw):
    row = {"variant": variant, "seed": seed, "run": f"{variant}{seed}", "last": last, "avg": last, "ff": 0.1,
           "task_acc": kw.get("task_acc", 0.5), "til_last": kw.get("til_last", 0.99), "til_task_acc": 1.0,
           "fixed_prompt_last": kw.get("fixed", 0.5), "fixed_prompt_avg": 0.5}
    return row


def test_directional_checks_detect_violations():
    good = [_row("backbone", 0, 0.60), _row("ccl", 0, 0.62), _row("full", 0, 0.70, task_acc=0.8)]
    checks = {c["check"]: c["passed"] for c in directional_checks(good, summarize_rows(good))}
    assert all(checks.values())
    assert "full - backbone >= 0.02 (last)" in checks
    bad = [_row("backbone", 0, 0.60), _row("ccl", 0, 0.55), _row("full", 0, 0.61, til_last=0.5)]
    checks = {c["check"]: c["passed"] for c in directional_checks(bad, summarize_rows(bad))}
    assert not checks["ccl >= backbone (last)"]
    assert not checks["full - backbone >= 0.02 (last)"]
    assert not checks["til_last >= last on every run"]
    assert checks["full >= ccl (last)"]


def test_summary_averages_over_seeds():
    rows = [_row("full", 0, 0.6), _row("full", 1, 0.8)]
    assert [s["variant"] for s in summarize_rows(rows, til=False)] == ["full"]
    (full, til) = summarize_rows(rows)
    assert full["last"] == pytest.approx(0.7) and full["n_seeds"] == 2
    assert til["last"] == pytest.approx(0.99)


# -- CLI -----------------------------------------------------------------------

def test_cli_missing_seed_exits_2(tmp_path, capsys):
    p = tmp_path / "c.yaml"
    p.write_text("train:\n  epochs_per_task: 1\n")
    assert cli.main(["run", "--config", str(p), "--out", str(tmp_path)]) == 2
    assert "missing required field 'seed'" in capsys.readouterr().err


def test_cli_seed_flag_satisfies_requirement(tmp_path, capsys):
    p = tmp_path / "c.yaml"
    p.write_text("train:\n  epochs_per_task: 1\n")
    assert cli.main(["config", "--config", str(p), "--seed", "4"]) == 0
    assert capsys.readouterr().out.startswith("seed: 4\n")


def test_cli_run_then_report_reproduces_bytes(tmp_path, cache, capsys):
    out = tmp_path / "runs"
    assert cli.main(["run", "--config", str(TINY), "--out", str(out)]) == 0
    run_dir = Path(capsys.readouterr().out.splitlines()[0])
    before = _hashed_bytes(run_dir)
    (run_dir / "summary.json").unlink()
    assert cli.main(["report", "--out", str(run_dir)]) == 0
    assert _hashed_bytes(run_dir) == before


def test_cli_report_rejects_other_directories(tmp_path):
    assert cli.main(["report", "--out", str(tmp_path)]) == 2


def test_cli_collision_exits_3(tmp_path, cache, capsys):
    assert cli.main(["run", "--config", str(TINY), "--out", str(tmp_path)]) == 0
    run_dir = Path(capsys.readouterr().out.splitlines()[0])
    (run_dir / "curve.csv").write_text("tampered\n")
    assert cli.main(["run", "--config", str(TINY), "--out", str(tmp_path)]) == 3
    assert "different result" in capsys.readouterr().err


def test_cli_ablate_and_report_agree(tmp_path, cache, capsys):
    out = tmp_path / "abl"
    code = cli.main(["ablate", "--config", str(TINY), "--seeds", "0", "--variants", "backbone,full",
                     "--out", str(out)])
    assert code in (0, 1)
    first = capsys.readouterr().out
    summary = (out / "ablation_summary.csv").read_bytes()
    assert cli.main(["report", "--out", str(out)]) == 0
    assert capsys.readouterr().out == first
    assert (out / "ablation_summary.csv").read_bytes() == summary


def test_cli_seed_ranges():
    assert cli._seeds("0-4") == [0, 1, 2, 3, 4]
    assert cli._seeds("2,7") == [2, 7]
    assert cli._seeds("3") == [3]


def test_cli_gradcheck_passes(capsys):
    assert cli.main(["gradcheck"]) == 0
    assert capsys.readouterr().out.strip().endswith("PASS")

import csv

import numpy as np
import pytest

from tokmerge.bench import (
    BENCH_COLUMNS,
    COMPARE_COLUMNS,
    REPLAY_COLUMNS,
    HarnessParams,
    merge_group_cohesion,
    plan_for_record,
    random_assignment_cohesion,
    run_bench,
    run_capture,
    run_compare,
    run_replay,
)
from tokmerge.cli import main
from tokmerge.core import TokenMatrix, identity_plan
from tokmerge.fmap import CaptureRecord, read_capture, write_capture
from tokmerge.rng import Rng
from tokmerge.strategy import plan_importance_pool

FAST = HarnessParams(tokens=16, channels=8, steps=5, prune_steps=2)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# engines
# ---------------------------------------------------------------------------

def test_bench_baseline_row_has_zero_deviation():
    rows = run_bench(["importance-pool"], [0.5], FAST, repeats=2, warmups=1)
    baseline = rows[0]
    assert baseline["strategy"] == "none"
    assert baseline["mse_vs_baseline"] == 0.0
    assert baseline["status"] == "ok"


def test_bench_infeasible_pair_reported_and_run_continues():
    rows = run_bench(["importance-pool"], [0.9, 0.5], FAST, repeats=1, warmups=0)
    by_ratio = {row["r"]: row for row in rows if row["strategy"] == "importance-pool"}
    assert by_ratio[0.9]["status"].startswith("infeasible")
    assert by_ratio[0.5]["status"] == "ok"


def test_bench_flops_decrease_with_ratio():
    rows = run_bench(["tome-random-grid"], [0.3, 0.5, 0.7], FAST,
                     repeats=1, warmups=0)
    flops = [row["flops_per_step"] for row in rows if row["status"] == "ok"]
    assert flops == sorted(flops, reverse=True)


def test_bench_rejects_non_square_token_count():
    with pytest.raises(Exception, match="square"):
        run_bench(["importance-pool"], [0.5],
                  HarnessParams(tokens=60, channels=8, steps=3), repeats=1)


def test_compare_reports_all_strategies_with_zero_pool_violations():
    rows = run_compare(["tome-random-grid", "importance-pool", "topk-dst"], 0.5,
                       FAST, n_seeds=2, n_conditions=2)
    assert [row["strategy"] for row in rows] == [
        "tome-random-grid", "importance-pool", "topk-dst",
    ]
    for row in rows:
        assert row["status"] == "ok"
        assert np.isfinite(row["mse_mean"])
        assert np.isfinite(row["mse_p95"])
        assert row["pool_violations"] == 0


def test_compare_cohesion_beats_random_control():
    rows = run_compare(["tome-random-grid", "importance-pool"], 0.5, FAST,
                       n_seeds=2, n_conditions=1)
    for row in rows:
        assert row["homogeneity_mean"] > row["homogeneity_random"]


def test_compare_requires_two_strategies():
    with pytest.raises(Exception, match="2 strategies"):
        run_compare(["importance-pool"], 0.5, FAST)


def test_capture_record_count_is_steps_times_layers(tmp_path):
    path = tmp_path / "cap.fmap"
    n_records, _ = run_capture(path, FAST)
    assert n_records == FAST.steps * 2  # two attention layers per pass
    records = read_capture(path)
    assert len(records) == n_records
    # first step has no previous-step guidance: zeros by convention
    first = [r for r in records if r.timestep == FAST.steps]
    assert first and all(np.all(r.guidance == 0) for r in first)
    later = [r for r in records if r.timestep < FAST.steps]
    assert any(np.any(r.guidance > 0) for r in later)


def test_replay_reproduces_plans_bit_exactly(tmp_path):
    path = tmp_path / "cap.fmap"
    run_capture(path, FAST)
    records = read_capture(path)
    cfg = FAST.config("importance-pool", 0.5)
    base = Rng(FAST.seed)
    for rec in records:
        live = plan_for_record(rec, "importance-pool", cfg, base)
        again = plan_for_record(rec, "importance-pool", cfg, base)
        assert live == again
        # independent reconstruction from the record fields
        tokens = TokenMatrix(rec.features, grid=(4, 4))
        from tokmerge.core import ImportanceMap

        imp = ImportanceMap(rec.guidance, source_timestep=rec.timestep + 1)
        direct = plan_importance_pool(tokens, imp, cfg,
                                      base.at(rec.timestep, rec.layer))
        assert live == direct


def test_replay_rows_flag_malformed_records(tmp_path):
    good = CaptureRecord(5, 0, np.ones((16, 4), dtype=np.float32),
                         np.ones(16, dtype=np.float32))
    bad = CaptureRecord(4, 1, np.full((16, 4), np.nan, dtype=np.float32),
                        np.ones(16, dtype=np.float32))
    rows = run_replay([good, bad], ["importance-pool"], 0.5, FAST)
    assert rows[0]["status"] == "ok"
    assert rows[0]["count_ok"] is True
    assert rows[1]["status"].startswith("error")


def test_replay_handles_non_square_grid_strategy():
    rec = CaptureRecord(3, 0, np.ones((12, 4), dtype=np.float32),
                        np.ones(12, dtype=np.float32))
    rows = run_replay([rec], ["tome-random-grid"], 0.5, FAST)
    assert rows[0]["status"].startswith("error")


def test_cohesion_helpers_on_trivial_plan():
    data = np.random.default_rng(0).standard_normal((8, 4))
    plan = identity_plan(8)
    assert merge_group_cohesion(data, plan) is None
    assert random_assignment_cohesion(data, plan, np.random.default_rng(0)) is None


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def cli(*args):
    return main(list(args))


def test_cli_bench_writes_stable_csv_schema(tmp_path):
    out = tmp_path / "bench.csv"
    code = cli("bench", "--strategy", "importance", "--ratio", "0.5",
               "--tokens", "16", "--channels", "8", "--steps", "4",
               "--prune-steps", "1", "--repeats", "1", "--out", str(out))
    assert code == 0
    with open(out, newline="") as fh:
        header = fh.readline().strip().split(",")
    assert header == BENCH_COLUMNS
    rows = read_rows(out)
    assert rows[0]["strategy"] == "none"
    assert float(rows[0]["mse_vs_baseline"]) == 0.0


def test_cli_compare_schema_and_violations(tmp_path):
    out = tmp_path / "compare.csv"
    code = cli("compare", "--strategy", "importance", "--strategy", "topk",
               "--ratio", "0.5", "--tokens", "16", "--channels", "8",
               "--steps", "4", "--prune-steps", "1", "--seeds", "2",
               "--conditions", "1", "--out", str(out))
    assert code == 0
    with open(out, newline="") as fh:
        header = fh.readline().strip().split(",")
    assert header == COMPARE_COLUMNS
    rows = read_rows(out)
    pool_row = next(r for r in rows if r["strategy"] == "importance-pool")
    assert pool_row["pool_violations"] == "0"


def test_cli_capture_then_replay(tmp_path):
    cap = tmp_path / "cap.fmap"
    code = cli("capture", "--tokens", "16", "--channels", "8", "--steps", "3",
               "--prune-steps", "1", "--out", str(cap))
    assert code == 0
    out = tmp_path / "replay.csv"
    code = cli("replay", "--input", str(cap), "--strategy", "importance",
               "--ratio", "0.5", "--tokens", "16", "--channels", "8",
               "--out", str(out))
    assert code == 0
    rows = read_rows(out)
    assert len(rows) == 6  # 3 steps x 2 layers
    assert all(r["count_ok"] == "True" for r in rows)
    with open(out, newline="") as fh:
        header = fh.readline().strip().split(",")
    assert header == REPLAY_COLUMNS


def test_cli_replay_empty_capture_succeeds(tmp_path):
    cap = tmp_path / "empty.fmap"
    write_capture(cap, [])
    out = tmp_path / "replay.csv"
    assert cli("replay", "--input", str(cap), "--out", str(out)) == 0
    assert read_rows(out) == []


def test_cli_exit_codes():
    assert cli("bench", "--tokens", "60", "--steps", "2") == 1  # config error
    assert cli("capture", "--tokens", "16") == 1  # missing --out
    assert cli("replay", "--input", "/nonexistent/path.fmap") == 2  # I/O error
    assert cli("nonsense") == 1  # argparse usage error


def test_cli_capture_unwritable_path_is_io_error():
    code = cli("capture", "--tokens", "16", "--channels", "8", "--steps", "2",
               "--prune-steps", "1", "--out", "/nonexistent-dir/cap.fmap")
    assert code == 2


def test_bench_survives_grid_infeasible_prune_phase():
    # k=0.1 keeps r=0.85 feasible for the pool itself, but the grid-based
    # prune phase pins k at 0.25 and must surface as an infeasible row, not
    # a crash.
    params = HarnessParams(tokens=16, channels=8, steps=3, prune_steps=1,
                           dst_frac=0.1)
    rows = run_bench(["importance-pool"], [0.85], params, repeats=1, warmups=0)
    row = next(r for r in rows if r["strategy"] == "importance-pool")
    assert row["status"].startswith("infeasible")


def test_cli_replay_corrupt_file_is_io_error(tmp_path):
    cap = tmp_path / "corrupt.fmap"
    cap.write_bytes(b"FMAPgarbage-that-is-not-valid")
    assert cli("replay", "--input", str(cap)) == 2


def test_cli_help_documents_csv_schema(capsys):
    assert cli("bench", "--help") == 0
    out = capsys.readouterr().out
    assert "CSV columns" in out
    assert "flops_per_step" in out

"""
Test the metrics store: run collection, curve tables and the SQLite database.
"""

import json
import tempfile
from pathlib import Path

from config import TrainConfig, save_train_config
from evaluate import EvalReport, emit_metrics
from metrics_store import (
    STANDARD_COLUMNS,
    curve_table,
    final_iteration_summary,
    load_eval_curves,
    load_run_metrics,
    query_runs,
    write_metrics_db,
)


def write_run(runs_dir: Path, name: str, method: str, iterations: int) -> Path:
    run_dir = runs_dir / name
    run_dir.mkdir(parents=True)
    save_train_config(TrainConfig(method=method, seed=1), run_dir / "train_config.json")
    with open(run_dir / "metrics.jsonl", "w") as f:
        for i in range(iterations):
            record = {"schema_version": 1, "iteration": i, "method": method,
                      "mean_return": 0.1 * i, "success_rate": 0.2 * i, "trajectory_count": 136,
                      "adv_gae_count": 10, "notes": []}
            f.write(json.dumps(record) + "\n")
    return run_dir


def test_load_runs():
    with tempfile.TemporaryDirectory() as tmp:
        runs = Path(tmp)
        write_run(runs, "poly_seed1", "poly_ppo", 3)
        write_run(runs, "ppo_seed1", "ppo", 2)
        (runs / "empty").mkdir()
        df = load_run_metrics(runs, verbose=False)
        assert list(df.columns) == STANDARD_COLUMNS
        assert len(df) == 5
        assert sorted(df["run"].unique()) == ["poly_seed1", "ppo_seed1"]
        assert set(df["num_vines"]) == {8}
        assert df["mean_set_diversity"].isna().all()


def test_missing_runs_dir():
    df = load_run_metrics(Path(tempfile.gettempdir()) / "no_such_runs_dir", verbose=False)
    assert df.empty and list(df.columns) == STANDARD_COLUMNS


def test_curve_table_order():
    report = EvalReport(pass_at_k={4: 0.9, 1: 0.5}, diff_at_k={2: 1.5, 1: 1.0})
    table = curve_table(report)
    assert table["metric"].tolist() == ["pass_at_k", "pass_at_k", "diff_at_k", "diff_at_k"]
    assert table["k"].tolist() == [1, 4, 1, 2]


def test_database_round_trip():
    with tempfile.TemporaryDirectory() as tmp:
        runs = Path(tmp) / "runs"
        write_run(runs, "poly_seed1", "poly_ppo", 4)
        emit_metrics(EvalReport(pass_at_k={1: 0.25, 2: 0.5}), runs / "poly_seed1" / "eval.jsonl")
        iterations = load_run_metrics(runs, verbose=False)
        curves = load_eval_curves(runs)
        assert curves["evaluation"].tolist() == ["eval", "eval"]

        db = Path(tmp) / "metrics.db"
        write_metrics_db(iterations, db, curves, verbose=False)
        counts = query_runs(db, "SELECT method, COUNT(*) AS n FROM iterations GROUP BY method")
        assert counts.to_dict("records") == [{"method": "poly_ppo", "n": 4}]
        curve = query_runs(db, "SELECT k, value FROM curves WHERE run = ? ORDER BY k", ("poly_seed1",))
        assert curve["value"].tolist() == [0.25, 0.5]


def test_final_iteration_summary():
    with tempfile.TemporaryDirectory() as tmp:
        runs = Path(tmp)
        write_run(runs, "a", "poly_ppo", 3)
        write_run(runs, "b", "reinforce", 5)
        summary = final_iteration_summary(load_run_metrics(runs, verbose=False))
        assert summary["run"].tolist() == ["a", "b"]
        assert summary["iteration"].tolist() == [2, 4]


if __name__ == "__main__":
    tests = [(name, fn) for name, fn in globals().items() if name.startswith("test_")]
    print("=" * 60)
    print("Metrics store tests")
    print("=" * 60)
    for i, (name, fn) in enumerate(tests, 1):
        print(f"\n{i}. {name}")
        fn()
    print("\n" + "=" * 60)
    print("✓ All tests completed successfully!")
    print("=" * 60)

"""
Metrics store for fine-tuning runs.

Collects every run's metrics.jsonl (plus its train_config.json) and every
evaluation curve table under a runs folder, standardizes the columns and
loads them into SQLite for the dashboard.

Usage:
    python metrics_store.py [runs_dir] [output_db]

    runs_dir: Folder containing one sub-folder per run (default: $POLYPPO_RUNS_DIR)
    output_db: Output database path (default: $POLYPPO_METRICS_DB)
"""

import json
import sqlite3
import sys
from pathlib import Path

import pandas as pd

from config import METRICS_DB, RUNS_DIR

# Run-level columns copied from train_config.json
RUN_COLUMNS = ["run", "method", "env_kind", "seed", "kl_coef", "lambda_ucb", "num_vines",
               "set_size", "num_sets", "rollout_states", "window"]

# Ensure consistent column order; missing columns become NULL
STANDARD_COLUMNS = RUN_COLUMNS + [
    "iteration",
    "mean_return",
    "success_rate",
    "policy_loss",
    "value_loss",
    "kl",
    "entropy",
    "trajectory_count",
    "mean_set_diversity",
    "grad_norm",
    "adv_all_mean",
    "adv_all_std",
    "adv_gae_count",
    "adv_gae_mean",
    "adv_gae_std",
    "adv_polychromic_count",
    "adv_polychromic_mean",
    "adv_polychromic_std",
]

CURVE_METRICS = ("pass_at_k", "diff_at_k", "validity_pass_at_k", "creativity_pass_at_k")
CURVE_COLUMNS = ["metric", "k", "value"]


def curve_table(report) -> pd.DataFrame:
    """Flat (metric, k, value) table of an EvalReport's curves, in a fixed order."""
    rows = []
    for metric in CURVE_METRICS:
        curve = getattr(report, metric) or {}
        for k in sorted(curve):
            rows.append({"metric": metric, "k": int(k), "value": float(curve[k])})
    return pd.DataFrame(rows, columns=CURVE_COLUMNS)


def load_run(run_dir: Path, verbose: bool = True) -> pd.DataFrame | None:
    """Load one run's iteration metrics with its config columns attached."""
    metrics_path = run_dir / "metrics.jsonl"
    if not metrics_path.exists() or metrics_path.stat().st_size == 0:
        return None

    df = pd.read_json(metrics_path, lines=True)
    if verbose:
        print(f"  Loading: {run_dir.name} ({len(df):,} iterations)")

    config_path = run_dir / "train_config.json"
    run_config = {}
    if config_path.exists():
        with open(config_path) as f:
            run_config = json.load(f)
    elif verbose:
        print(f"    ⚠️  No train_config.json in {run_dir.name}")

    df["run"] = run_dir.name
    for col in RUN_COLUMNS[1:]:
        if col not in df.columns:
            df[col] = run_config.get(col)

    for col in STANDARD_COLUMNS:
        if col not in df.columns:
            df[col] = None
    return df[STANDARD_COLUMNS]


def load_run_metrics(runs_dir: str | Path = RUNS_DIR, verbose: bool = True) -> pd.DataFrame:
    """Every run's iterations in one standardized DataFrame."""
    runs_dir = Path(runs_dir)
    frames = []
    for run_dir in sorted(p for p in runs_dir.iterdir() if p.is_dir()) if runs_dir.exists() else []:
        df = load_run(run_dir, verbose)
        if df is not None:
            frames.append(df)
    if not frames:
        return pd.DataFrame(columns=STANDARD_COLUMNS)
    return pd.concat(frames, ignore_index=True)


def load_eval_curves(runs_dir: str | Path = RUNS_DIR) -> pd.DataFrame:
    """All *_curves.csv tables under runs_dir, tagged with their run folder."""
    runs_dir = Path(runs_dir)
    frames = []
    for path in sorted(runs_dir.glob("*/*_curves.csv")) if runs_dir.exists() else []:
        df = pd.read_csv(path)
        df.insert(0, "run", path.parent.name)
        df.insert(1, "evaluation", path.stem.removesuffix("_curves"))
        frames.append(df)
    if not frames:
        return pd.DataFrame(columns=["run", "evaluation"] + CURVE_COLUMNS)
    return pd.concat(frames, ignore_index=True)


def write_metrics_db(iterations: pd.DataFrame, db_path: str | Path = METRICS_DB,
                     curves: pd.DataFrame | None = None, verbose: bool = True) -> None:
    """Write iterations (and curves) to SQLite, replacing existing tables."""
    conn = sqlite3.connect(db_path)
    try:
        iterations.to_sql("iterations", conn, index=False, if_exists="replace")
        if curves is not None:
            curves.to_sql("curves", conn, index=False, if_exists="replace")

        if verbose:
            print("Creating indexes...")
        indexes = [
            "CREATE INDEX IF NOT EXISTS idx_run ON iterations(run)",
            "CREATE INDEX IF NOT EXISTS idx_method ON iterations(method)",
            "CREATE INDEX IF NOT EXISTS idx_run_iteration ON iterations(run, iteration)",
        ]
        if curves is not None:
            indexes.append("CREATE INDEX IF NOT EXISTS idx_curve_run ON curves(run, metric)")
        for idx_sql in indexes:
            conn.execute(idx_sql)
        conn.commit()
    finally:
        conn.close()
    if verbose:
        print(f"✓ Database saved: {db_path}")


def query_runs(db_path: str | Path, sql: str, params: tuple = ()) -> pd.DataFrame:
    conn = sqlite3.connect(db_path)
    try:
        return pd.read_sql_query(sql, conn, params=params)
    finally:
        conn.close()


def final_iteration_summary(iterations: pd.DataFrame) -> pd.DataFrame:
    """Last iteration of every run."""
    if iterations.empty:
        return iterations
    last = iterations.sort_values(["run", "iteration"]).groupby("run", as_index=False).tail(1)
    return last.reset_index(drop=True)


def main():
    runs_dir = Path(sys.argv[1] if len(sys.argv) > 1 else RUNS_DIR)
    output_db = sys.argv[2] if len(sys.argv) > 2 else METRICS_DB

    if not runs_dir.exists():
        print(f"Runs folder not found: {runs_dir}")
        print("Run `python cli.py finetune ...` first.")
        sys.exit(1)

    print("=" * 60)
    print(f"Collecting runs from {runs_dir}")
    print("=" * 60)
    iterations = load_run_metrics(runs_dir)
    curves = load_eval_curves(runs_dir)
    if iterations.empty and curves.empty:
        print("No metrics found!")
        sys.exit(1)

    write_metrics_db(iterations, output_db, curves)

    print("\n" + "=" * 60)
    print("METRICS SUMMARY")
    print("=" * 60)
    print(f"Runs: {iterations['run'].nunique()}")
    print(f"Iterations: {len(iterations):,}")
    print(f"Curve rows: {len(curves):,}")
    summary = final_iteration_summary(iterations)
    if not summary.empty:
        print(summary[["run", "method", "seed", "iteration", "success_rate", "mean_set_diversity"]].to_string(index=False))


if __name__ == "__main__":
    main()

"""
Polychromic PPO run dashboard

Browse fine-tuning runs and evaluation curves collected by
`python cli.py plotdata` (or `python metrics_store.py`).
Run with: streamlit run app.py
"""

import os

import pandas as pd
import streamlit as st

from charts import curve_figure, format_metric_name, training_figure
from config import METRICS_DB
from metrics_store import final_iteration_summary, query_runs

TRAINING_METRICS = ["success_rate", "mean_return", "entropy", "mean_set_diversity", "kl",
                    "policy_loss", "value_loss", "grad_norm"]

st.set_page_config(page_title="Polychromic PPO runs", layout="wide")

if not os.path.exists(METRICS_DB):
    st.error(f"""
    **Missing metrics database**

    No database found at `{METRICS_DB}`. Collect your runs first:

    ```bash
    python cli.py plotdata --runs-dir runs
    ```

    Then restart the application.
    """)
    st.stop()


@st.cache_data
def load_table(db_path: str, table: str) -> pd.DataFrame:
    tables = query_runs(db_path, "SELECT name FROM sqlite_master WHERE type = 'table'")
    if table not in set(tables["name"]):
        return pd.DataFrame()
    return query_runs(db_path, f"SELECT * FROM {table}")


def format_column_name(col_name: str) -> str:
    """snake_case to Title Case, keeping metric labels"""
    special_cases = {'kl': 'KL', 'ucb': 'UCB', 'id': 'ID'}
    words = col_name.replace('_', ' ').split()
    return ' '.join(special_cases.get(w.lower(), w.capitalize()) for w in words)


iterations = load_table(METRICS_DB, "iterations")
curves = load_table(METRICS_DB, "curves")

st.title("Polychromic PPO runs")
st.markdown("Training history and evaluation curves for every collected run")

tab_training, tab_curves, tab_summary = st.tabs(["Training", "Evaluation curves", "Summary"])

with tab_training:
    if iterations.empty:
        st.warning("No training runs in the database.")
    else:
        col1, col2 = st.columns([2, 1])
        with col1:
            runs = st.multiselect("Runs", sorted(iterations["run"].unique()),
                                  default=sorted(iterations["run"].unique()))
        with col2:
            metric = st.selectbox("Metric", [m for m in TRAINING_METRICS if iterations[m].notna().any()],
                                  format_func=format_metric_name)
        selected = iterations[iterations["run"].isin(runs)]
        if selected.empty:
            st.info("Select at least one run.")
        else:
            st.plotly_chart(training_figure(selected, metric), use_container_width=True)

with tab_curves:
    if curves.empty:
        st.warning("No evaluation curves in the database. Run `python cli.py eval ... --out runs/<run>/eval.jsonl`.")
    else:
        metric = st.selectbox("Curve", sorted(curves["metric"].unique()), format_func=format_metric_name)
        evaluations = sorted(curves["evaluation"].unique())
        chosen = st.multiselect("Evaluations", evaluations, default=evaluations)
        data = curves[(curves["metric"] == metric) & curves["evaluation"].isin(chosen)]
        st.plotly_chart(curve_figure(data, metric), use_container_width=True)

        with st.expander("View curve table", expanded=False):
            table = data.pivot_table(index="k", columns="run", values="value").reset_index()
            st.dataframe(table, use_container_width=True, hide_index=True)

with tab_summary:
    summary = final_iteration_summary(iterations)
    if summary.empty:
        st.warning("No training runs in the database.")
    else:
        st.subheader("Final iteration per run")
        columns = ["run", "method", "seed", "kl_coef", "lambda_ucb", "iteration", "success_rate",
                   "mean_return", "mean_set_diversity", "entropy"]
        df = summary[columns].copy()
        for col in df.columns:
            if df[col].dtype in ['float64', 'float32']:
                df[col] = df[col].apply(lambda x: f"{x:,.3f}" if pd.notna(x) else "")
        df.columns = [format_column_name(col) for col in df.columns]
        st.dataframe(df, use_container_width=True, hide_index=True)

        st.download_button(
            "Download CSV",
            summary.to_csv(index=False),
            "run_summary.csv",
            "text/csv",
        )

st.markdown("---")
st.caption(f"Metrics database: {METRICS_DB}")

"""
Plotly figure builders for the dashboard and for `cli.py plotdata --html`.
"""

import pandas as pd
import plotly.express as px

# Colours shared by every figure so a method keeps its colour across pages
METHOD_COLORS = {
    "ppo": "#1E5A8E",
    "vine_ppo": "#6c757d",
    "poly_ppo": "#D9822B",
    "reinforce": "#2E8B57",
}

METRIC_LABELS = {
    "mean_return": "Mean return",
    "success_rate": "Success rate",
    "policy_loss": "Policy loss",
    "value_loss": "Value loss",
    "kl": "KL to behavior",
    "entropy": "Policy entropy",
    "mean_set_diversity": "Mean set diversity",
    "grad_norm": "Gradient norm",
    "pass_at_k": "pass@k",
    "diff_at_k": "diff@k",
    "validity_pass_at_k": "Validity pass@k",
    "creativity_pass_at_k": "Creativity pass@k",
}


def format_metric_name(name: str) -> str:
    """snake_case metric name to a display label."""
    return METRIC_LABELS.get(name, name.replace("_", " ").capitalize())


def _style(fig):
    fig.update_layout(
        template="plotly_white",
        legend_title_text="",
        margin=dict(l=40, r=20, t=50, b=40),
    )
    return fig


def training_figure(df: pd.DataFrame, metric: str):
    """Per-iteration line chart of one metric, one line per run."""
    if metric not in df.columns:
        raise KeyError(f"Unknown metric column: {metric}")
    data = df.dropna(subset=[metric]).sort_values(["run", "iteration"])
    color = "method" if "method" in data.columns and data["method"].notna().any() else "run"
    fig = px.line(
        data,
        x="iteration",
        y=metric,
        color=color,
        line_group="run",
        hover_data=[c for c in ("run", "seed") if c in data.columns],
        color_discrete_map=METHOD_COLORS if color == "method" else None,
        title=format_metric_name(metric),
        labels={metric: format_metric_name(metric), "iteration": "Iteration"},
    )
    return _style(fig)


def curve_figure(table: pd.DataFrame, metric: str | None = None):
    """pass@k style curves from a curve table (columns metric, k, value[, run])."""
    data = table if metric is None else table[table["metric"] == metric]
    color = "run" if "run" in data.columns else "metric"
    fig = px.line(
        data.sort_values("k"),
        x="k",
        y="value",
        color=color,
        line_dash="metric" if color == "run" and metric is None else None,
        markers=True,
        log_x=True,
        title=format_metric_name(metric) if metric else "Evaluation curves",
        labels={"k": "k", "value": format_metric_name(metric) if metric else "Value"},
    )
    ks = sorted(data["k"].unique())
    fig.update_xaxes(tickvals=ks, ticktext=[str(k) for k in ks])
    return _style(fig)

import logging
import os

import numpy as np
import pandas as pd
import plotly.graph_objects as go
from plotly.subplots import make_subplots

from errors import DataError

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ("loss", "ce", "diffusion", "recon", "kl", "contrastive")
LOSS_COLORS = {
    "loss": "indianred",
    "ce": "royalblue",
    "diffusion": "forestgreen",
    "recon": "darkorange",
    "kl": "purple",
    "contrastive": "teal",
}


def _empty_figure(message):
    fig = go.Figure()
    fig.add_annotation(
        text=message,
        xref="paper", yref="paper",
        x=0.5, y=0.5, showarrow=False,
        font=dict(size=20)
    )
    return fig


def smooth(values, window=20):
    """Trailing moving average that ignores missing values"""
    series = pd.Series(values, dtype=float)
    return series.rolling(window, min_periods=1).mean().to_numpy()


def plot_training_curves(metrics, title="Training curves", window=20):
    """Loss terms per step (raw and smoothed) above the validation metrics"""
    if metrics is None or len(metrics) == 0 or "step" not in metrics.columns:
        return _empty_figure("No training metrics available")

    loss_cols = [c for c in LOSS_COLUMNS if c in metrics.columns and metrics[c].notna().any()]
    val_cols = [c for c in metrics.columns if c.startswith("val_") and metrics[c].notna().any()]

    fig = make_subplots(
        rows=2, cols=1,
        shared_xaxes=True,
        subplot_titles=("Training loss", "Validation")
    )

    for col in loss_cols:
        rows = metrics[metrics[col].notna()]
        color = LOSS_COLORS.get(col, "gray")
        fig.add_trace(
            go.Scatter(x=rows["step"], y=rows[col], mode="lines", name=col,
                       line=dict(color=color, width=1), opacity=0.35),
            row=1, col=1
        )
        fig.add_trace(
            go.Scatter(x=rows["step"], y=smooth(rows[col], window), mode="lines",
                       name=f"{col} (smoothed)", line=dict(color=color, width=2)),
            row=1, col=1
        )

    for col in val_cols:
        rows = metrics[metrics[col].notna()]
        fig.add_trace(
            go.Scatter(x=rows["step"], y=rows[col], mode="lines+markers", name=col),
            row=2, col=1
        )

    fig.update_layout(title=title, height=700, width=900, template="plotly_white")
    fig.update_xaxes(title_text="step", row=2, col=1)
    return fig


def plot_cfg_sweep(sweep):
    """FID and R@1 against the guidance scale"""
    if sweep is None or len(sweep) == 0:
        return _empty_figure("No guidance sweep available")
    fig = make_subplots(rows=1, cols=2, subplot_titles=("FID", "R-Precision top-1"))
    fig.add_trace(
        go.Scatter(x=sweep["omega"], y=sweep["fid"], mode="lines+markers", name="FID",
                   marker_color="indianred"),
        row=1, col=1
    )
    if "r_precision_top1" in sweep.columns:
        fig.add_trace(
            go.Scatter(x=sweep["omega"], y=sweep["r_precision_top1"], mode="lines+markers",
                       name="R@1", marker_color="royalblue"),
            row=1, col=2
        )
    fig.update_xaxes(title_text="guidance scale")
    fig.update_layout(width=900, height=400, template="plotly_white")
    return fig


def plot_joint_errors(report):
    """Mean per-joint L2 reconstruction error"""
    joint_cols = [c for c in report.columns if c.startswith("l2_")] if report is not None else []
    if not joint_cols:
        return _empty_figure("No reconstruction report available")
    means = [float(np.mean(report[c])) for c in joint_cols]
    fig = go.Figure(go.Bar(x=[c[3:] for c in joint_cols], y=means, marker_color="darkorange"))
    fig.update_layout(title="Per-joint L2 error", yaxis_title="L2", template="plotly_white")
    return fig


def write_svg(fig, path):
    """Static SVG export through kaleido"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.write_image(path, format="svg")
    logger.info("Wrote chart %s", path)
    return path


def plot_metrics_file(csv_path, out_path=None):
    if not os.path.exists(csv_path):
        raise DataError(f"metrics file not found: {csv_path}")
    metrics = pd.read_csv(csv_path)
    out_path = out_path or os.path.splitext(csv_path)[0] + ".svg"
    title = os.path.splitext(os.path.basename(csv_path))[0]
    return write_svg(plot_training_curves(metrics, title=f"Training curves: {title}"), out_path)

import logging
from typing import Dict, List, Mapping, Sequence

import pandas as pd
import plotly.graph_objects as go
import streamlit as st

from errors import LossError, SceneKitError
from losses import LossWeights

logger = logging.getLogger(__name__)

TERM_PREFIX = "loss_"


def log_frame(log: Sequence[Mapping]) -> pd.DataFrame:
    """Training log records as a frame indexed by iteration."""
    if not log:
        raise LossError("Training log is empty")
    return pd.DataFrame(list(log)).set_index("iteration").sort_index()


def term_columns(df: pd.DataFrame) -> List[str]:
    return [c for c in df.columns if c.startswith(TERM_PREFIX)]


def _weighted(df: pd.DataFrame, weights: LossWeights) -> pd.DataFrame:
    # a term absent from an iteration (e.g. sky terms on satellite draws) weighs zero there
    return pd.DataFrame({c[len(TERM_PREFIX):]: df[c].fillna(0.0) * weights.weight_of(c[len(TERM_PREFIX):])
                         for c in term_columns(df)}, index=df.index)


def term_contributions(log: Sequence[Mapping], weights: LossWeights) -> pd.DataFrame:
    """Share (percent) of each weighted term in the summed total over the whole log.

    Columns: term, weight, weighted_sum, share_pct; sorted by share.
    """
    weighted = _weighted(log_frame(log), weights)
    sums = weighted.sum()
    total = float(sums.sum())
    share = sums / total * 100.0 if total > 0 else sums * 0.0
    out = pd.DataFrame({
        "term": sums.index,
        "weight": [weights.weight_of(t) for t in sums.index],
        "weighted_sum": sums.values,
        "share_pct": share.values,
    })
    return out.sort_values("share_pct", ascending=False).reset_index(drop=True)


def reweighted_total(log: Sequence[Mapping], weights: LossWeights) -> pd.Series:
    """Total loss per iteration as it would read under ``weights``."""
    weights.validate()
    return _weighted(log_frame(log), weights).sum(axis=1).rename("total")


def smooth(series: pd.Series, window: int = 25) -> pd.Series:
    return series.rolling(window, min_periods=1).mean()


def create_loss_curves_plot(log: Sequence[Mapping], window: int = 25, log_y: bool = True) -> go.Figure:
    """Per-term raw losses and the logged total, smoothed."""
    df = log_frame(log)
    fig = go.Figure()
    for col in term_columns(df) + ["total"]:
        fig.add_trace(go.Scatter(x=df.index, y=smooth(df[col].dropna(), window), mode="lines",
                                 name=col.replace(TERM_PREFIX, "")))
    if "eval_psnr" in df.columns:
        psnr = df["eval_psnr"].dropna()
        fig.add_trace(go.Scatter(x=psnr.index, y=psnr.values, mode="lines+markers", name="hold-out PSNR",
                                 yaxis="y2"))
        fig.update_layout(yaxis2=dict(title="PSNR (dB)", overlaying="y", side="right"))
    fig.update_layout(
        title="Training losses",
        xaxis_title="iteration",
        yaxis_title="loss",
        yaxis_type="log" if log_y else "linear",
        height=500,
    )
    return fig


def create_reweighted_plot(log: Sequence[Mapping], original: LossWeights, modified: LossWeights,
                           window: int = 25) -> go.Figure:
    fig = go.Figure()
    fig.add_trace(go.Scatter(y=smooth(reweighted_total(log, original), window), mode="lines",
                             name="Current weights", opacity=0.6))
    fig.add_trace(go.Scatter(y=smooth(reweighted_total(log, modified), window), mode="lines",
                             name="What-if weights"))
    fig.update_layout(title="Total loss under modified weights", xaxis_title="iteration",
                      yaxis_title="total", height=450)
    return fig


def render_sensitivity_analysis(log: Sequence[Mapping], weights: LossWeights) -> Dict[str, float]:
    """What-if sliders over the loss weights; returns the chosen weights."""
    st.markdown("### Loss-weight sensitivity")
    contributions = term_contributions(log, weights)

    metric_cols = st.columns(max(1, len(contributions)))
    for i, row in contributions.iterrows():
        with metric_cols[i]:
            st.metric(row["term"], f"{row['share_pct']:.1f}%",
                      help=f"Share of {row['term']} in the weighted total (weight {row['weight']:.3g})")

    st.markdown("#### What-if weights")
    chosen = {}
    fields = ("rgb", "grav", "sky_op", "sky_l1", "depth", "perspective", "tv")
    slider_cols = st.columns(len(fields))
    for i, name in enumerate(fields):
        current = getattr(weights, name)
        with slider_cols[i]:
            chosen[name] = st.slider(name, min_value=0.0, max_value=max(2.0, 4.0 * current), value=float(current),
                                     step=0.01, key=f"weight_{name}")
    try:
        modified = LossWeights(**{**weights.__dict__, **chosen})
        st.plotly_chart(create_reweighted_plot(log, weights, modified), use_container_width=True)
    except SceneKitError as e:
        st.error(f"Sensitivity analysis failed: {str(e)}")
    return chosen

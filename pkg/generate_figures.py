"""
generate_figures.py — lutnet figures
====================================
Builds interactive HTML figures with plotly:

  fig1_accuracy_vs_nuc.html      final / first-pass / float accuracy per method against NUC
                                 (needs runs/run_summaries.csv from train-toy runs)
  fig2_laplacian_levels.html     Laplacian-model centers and triangle bucket occupancies
  fig3_log_taylor_error.html     first-order log2(1+x) ≈ x error vs the table method

Usage:
    python generate_figures.py [--run-dir runs] [--n-w 15] [--n-qa 32]

Outputs HTML files to ./figures/
"""

import argparse
import os
import sys

import numpy as np
import pandas as pd
import plotly.graph_objects as go
from plotly.subplots import make_subplots

from lutnet.codebooks import ceil_log2, laplacian_centers, triangle_profile
from lutnet.metrics import nuc_modelfree, nuc_octave_linear

OUT_DIR = "figures"


def method_nuc(method: str, n_w: int, n_a: int, n_q: int, n_o: int) -> int:
    """NUC of one train-toy method at the given codebook sizes."""
    if method == "octave":
        return nuc_octave_linear(n_q, n_o, n_a)[0]
    return nuc_modelfree(n_w, n_a)


# ═════════════════════════════════════════════════════════════════════════════
# Figure 1 — Accuracy vs NUC
# ═════════════════════════════════════════════════════════════════════════════

def accuracy_vs_nuc(summaries: pd.DataFrame, n_w: int, n_a: int, n_q: int,
                    n_o: int) -> go.Figure:
    runs = summaries[summaries["method"] != "none"].copy()
    runs["nuc"] = [method_nuc(m, n_w, n_a, n_q, n_o) for m in runs["method"]]
    agg = (runs.groupby("method")
               .agg(nuc=("nuc", "first"), final=("final_acc", "mean"),
                    first_pass=("first_pass_acc", "mean"), baseline=("float_acc", "mean"),
                    runs=("seed", "count"))
               .reset_index()
               .sort_values("nuc"))
    fig = go.Figure()
    fig.add_trace(go.Scatter(x=agg["nuc"], y=agg["final"], mode="markers+text",
                             text=agg["method"], textposition="top center",
                             name="after fine-tuning"))
    fig.add_trace(go.Scatter(x=agg["nuc"], y=agg["first_pass"], mode="markers",
                             marker_symbol="x", name="first quantization pass"))
    if len(agg):
        fig.add_hline(y=float(agg["baseline"].mean()), line_dash="dash",
                      annotation_text="float baseline")
    fig.update_layout(title="Validation accuracy vs neural-unit complexity",
                      xaxis_title="NUC", yaxis_title="validation accuracy",
                      xaxis_type="log")
    return fig


# ═════════════════════════════════════════════════════════════════════════════
# Figure 2 — Laplacian centers and triangle occupancies
# ═════════════════════════════════════════════════════════════════════════════

def laplacian_and_triangle(n_w: int, n_net: int) -> go.Figure:
    centers = laplacian_centers(n_w, 1.0, force_one=False).levels
    profile = triangle_profile(n_w, n_net)
    fig = make_subplots(rows=1, cols=2, subplot_titles=(
        f"Laplacian-model centers (N={n_w}, w_max=1)",
        f"Triangle occupancy (N_w={n_w}, N_net={n_net})"))
    fig.add_trace(go.Scatter(x=np.arange(len(centers)) - len(centers) // 2, y=centers,
                             mode="markers+lines", name="center"), row=1, col=1)
    fig.add_trace(go.Bar(x=np.arange(n_w) - n_w // 2, y=profile.bucket_counts,
                         name="bucket count"), row=1, col=2)
    fig.update_xaxes(title_text="level index", row=1, col=1)
    fig.update_xaxes(title_text="bucket index", row=1, col=2)
    fig.update_layout(showlegend=False)
    return fig


# ═════════════════════════════════════════════════════════════════════════════
# Figure 3 — log2(1 + x) approximation error
# ═════════════════════════════════════════════════════════════════════════════

def taylor_error(n_qa: int) -> go.Figure:
    """Error of log2(1+x) ≈ x against the mantissa table the log engine uses."""
    m_bits = ceil_log2(4 * n_qa)
    x = np.linspace(0.0, 1.0, 513)
    exact = np.log2(1.0 + x)
    b = np.arange(1 << m_bits)
    grid = b / float(1 << m_bits)
    table = np.round(n_qa * np.log2(1.0 + grid)) / n_qa
    fig = go.Figure()
    fig.add_trace(go.Scatter(x=x, y=x - exact, name="first-order: x − log2(1+x)"))
    fig.add_trace(go.Scatter(x=grid, y=table - np.log2(1.0 + grid), mode="markers",
                             name=f"table, M={m_bits} bits, N_q={n_qa}"))
    fig.update_layout(title="log2(1 + x) approximation error", xaxis_title="x",
                      yaxis_title="error (octaves)")
    return fig


def main():
    parser = argparse.ArgumentParser(description="Generate lutnet HTML figures")
    parser.add_argument("--run-dir", default="runs")
    parser.add_argument("--out-dir", default=OUT_DIR)
    parser.add_argument("--n-w", type=int, default=15, help="Levels for figure 2 (odd)")
    parser.add_argument("--n-net", type=int, default=1000, help="Parameters for figure 2")
    parser.add_argument("--n-a", type=int, default=16)
    parser.add_argument("--n-q", type=int, default=8)
    parser.add_argument("--n-o", type=int, default=4)
    parser.add_argument("--n-qa", type=int, default=32)
    args = parser.parse_args()

    os.makedirs(args.out_dir, exist_ok=True)
    written = []

    summary_path = os.path.join(args.run_dir, "run_summaries.csv")
    if os.path.isfile(summary_path):
        print(f"Loading {summary_path} …")
        summaries = pd.read_csv(summary_path)
        print(f"  {len(summaries):,} runs")
        path = os.path.join(args.out_dir, "fig1_accuracy_vs_nuc.html")
        accuracy_vs_nuc(summaries, args.n_w, args.n_a, args.n_q, args.n_o).write_html(
            path, include_plotlyjs="cdn")
        written.append(path)
    else:
        print(f"WARNING: {summary_path} not found; skipping figure 1")

    for path, fig in (
            (os.path.join(args.out_dir, "fig2_laplacian_levels.html"),
             laplacian_and_triangle(args.n_w, args.n_net)),
            (os.path.join(args.out_dir, "fig3_log_taylor_error.html"),
             taylor_error(args.n_qa))):
        fig.write_html(path, include_plotlyjs="cdn")
        written.append(path)

    for path in written:
        print(f"  → {path}")
    return 0 if written else 1


if __name__ == "__main__":
    sys.exit(main())

"""
Render evolve histograms and sample scatter plots to standalone HTML.

Kept outside the CLI so the core commands only emit data files.

Usage:
    python tools/plot_artifacts.py runs/gmm1d            # every artifact found
    python tools/plot_artifacts.py runs/gmm1d --sampler ode
"""

from __future__ import annotations

import argparse
from pathlib import Path
import sys

import pandas as pd
import plotly.graph_objects as go
from plotly.subplots import make_subplots

# Ensure imports work when run from tools/
PROJECT_ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(PROJECT_ROOT))

from components.commands import BLOCKS  # noqa: E402
from modules.data_loader import load_samples_csv  # noqa: E402


def plot_evolve(run_dir: Path, sampler: str) -> Path | None:
    """One row per block, one column per snapshot."""
    index_path = run_dir / "evolve" / f"{sampler}_index.csv"
    if not index_path.exists():
        return None
    index = pd.read_csv(index_path, comment="#")
    n = len(index)
    fig = make_subplots(
        rows=len(BLOCKS), cols=n, shared_yaxes=False,
        column_titles=[f"t={t:.3g}" for t in index["t_actual"]],
        row_titles=list(BLOCKS),
    )
    for r, block in enumerate(BLOCKS, start=1):
        for c, snap in enumerate(index["snapshot"], start=1):
            hist = pd.read_csv(run_dir / "evolve" / f"{sampler}_snap{snap:02d}_{block}.csv", comment="#")
            centers = 0.5 * (hist["bin_lo"] + hist["bin_hi"])
            fig.add_trace(go.Bar(x=centers, y=hist["density_0"], marker_color="#ff8c00", showlegend=False), row=r, col=c)
    fig.update_layout(bargap=0, title=f"Marginal evolution ({sampler})", template="plotly_dark")
    out = run_dir / f"evolve_{sampler}.html"
    fig.write_html(out)
    return out


def plot_samples(run_dir: Path, sampler: str) -> Path | None:
    path = run_dir / f"samples_{sampler}.csv"
    if not path.exists():
        return None
    samples = load_samples_csv(path)
    if samples.shape[1] == 1:
        fig = go.Figure(go.Histogram(x=samples[:, 0], nbinsx=200, histnorm="probability density"))
    else:
        fig = go.Figure(go.Scattergl(x=samples[:, 0], y=samples[:, 1], mode="markers", marker={"size": 2}))
        fig.update_yaxes(scaleanchor="x")
    fig.update_layout(title=f"Samples ({sampler})", template="plotly_dark")
    out = run_dir / f"samples_{sampler}.html"
    fig.write_html(out)
    return out


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[1])
    parser.add_argument("run_dir", type=Path)
    parser.add_argument("--sampler", choices=["lt", "em", "ode"], nargs="+", default=["lt", "em", "ode"])
    args = parser.parse_args()
    for sampler in args.sampler:
        for written in (plot_evolve(args.run_dir, sampler), plot_samples(args.run_dir, sampler)):
            if written is not None:
                print(f"wrote {written}")


if __name__ == "__main__":
    main()

"""Figures over the benchmark metrics CSV.

Three figure kinds, all one line per model variant with a shaded +-1 std
band over seeds (sample std, 0 for a single run):

  corruption-sweep   accuracy vs corruption level, one panel per corruption
                     kind found in the CSV
  noise-sweep        accuracy vs the circuit-noise bound epsilon_theta; when
                     the grid sits on multiples of pi/40 the ticks are
                     labeled k*pi/40
  ttt-epochs         accuracy improvement over adaptation epochs from the
                     ttt-curve CSV, one line per noise level

Rendering is a pure function of the CSV: `render` returns the plotted line
statistics (what the golden-file tests freeze) and writes the image.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

FIGURE_KINDS = ("corruption-sweep", "noise-sweep", "ttt-epochs")

_METRICS_COLUMNS = {
    "corruption-sweep": ["dataset", "seed", "variant", "corruption_kind",
                         "corruption_level", "accuracy"],
    "noise-sweep": ["dataset", "seed", "variant", "corruption_kind",
                    "epsilon_theta", "accuracy"],
    "ttt-epochs": ["dataset", "seed", "variant", "epsilon_theta", "ttt_epoch",
                   "accuracy"],
}


@dataclass(frozen=True)
class PlotSpec:
    csv_path: str | Path
    kind: str
    out_path: str | Path
    per_family: bool = False    # one panel per dataset family instead of pooling
    dpi: int = 150

    def __post_init__(self):
        if self.kind not in FIGURE_KINDS:
            raise ValueError(f"unknown figure kind {self.kind!r}; pick from {FIGURE_KINDS}")


def _load(spec: PlotSpec) -> pd.DataFrame:
    df = pd.read_csv(spec.csv_path)
    missing = [c for c in _METRICS_COLUMNS[spec.kind] if c not in df.columns]
    if missing:
        raise ValueError(f"{spec.csv_path} lacks columns {missing} needed by {spec.kind}")
    return df


def _aggregate(df: pd.DataFrame, x_col: str) -> dict:
    """Per-variant mean/std of accuracy over everything but the x axis."""
    if df.empty:
        raise ValueError("no rows to aggregate")
    out = {}
    for variant, group in df.groupby("variant"):
        stats = group.groupby(x_col)["accuracy"].agg(["mean", "std"]).reset_index()
        stats["std"] = stats["std"].fillna(0.0)
        out[str(variant)] = {
            "x": [float(v) for v in stats[x_col]],
            "mean": [float(v) for v in stats["mean"]],
            "std": [float(v) for v in stats["std"]],
        }
    return out


def _draw_lines(ax, stats: dict):
    for variant in sorted(stats):
        line = stats[variant]
        x, mean, std = np.array(line["x"]), np.array(line["mean"]), np.array(line["std"])
        ax.plot(x, mean, marker="o", label=variant)
        ax.fill_between(x, mean - std, mean + std, alpha=0.2)
    ax.set_ylabel("test accuracy (%)")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)


def _pi40_ticks(ax, xs):
    ks = np.array(xs) * 40 / np.pi
    if np.allclose(ks, np.round(ks), atol=1e-6) and len(xs) > 1:
        ax.set_xticks(xs)
        ax.set_xticklabels(
            [f"{int(round(k))}$\\pi$/40" if k else "0" for k in ks],
            fontsize=7, rotation=45,
        )


def _facets(df: pd.DataFrame, spec: PlotSpec, facet_col: str | None):
    if spec.per_family:
        return [(f"dataset={name}", group) for name, group in df.groupby("dataset")]
    if facet_col is None:
        return [("", df)]
    return [(f"{facet_col}={name}", group) for name, group in df.groupby(facet_col)]


def render(spec: PlotSpec) -> dict:
    """Write the figure and return the plotted statistics per panel."""
    df = _load(spec)
    if spec.kind == "corruption-sweep":
        rows = df[(df["corruption_kind"] != "none") & (df["corruption_kind"].notna())]
        if rows.empty:
            raise ValueError("CSV has no corruption rows")
        panels = []
        if spec.per_family:
            for (kind, fam), group in rows.groupby(["corruption_kind", "dataset"]):
                panels.append((f"{kind} / {fam}", _aggregate(group, "corruption_level")))
        else:
            for kind, group in rows.groupby("corruption_kind"):
                panels.append((str(kind), _aggregate(group, "corruption_level")))
        x_label = "corruption level"
        pi_ticks = False
    elif spec.kind == "noise-sweep":
        rows = df[df["corruption_kind"].isin(["none"]) | df["corruption_kind"].isna()]
        rows = rows[rows["epsilon_theta"] > 0]
        if rows.empty:
            raise ValueError("CSV has no circuit-noise rows")
        panels = [(name, _aggregate(group, "epsilon_theta"))
                  for name, group in _facets(rows, spec, None)]
        x_label = "noise bound epsilon_theta"
        pi_ticks = True
    else:  # ttt-epochs
        if df.empty:
            raise ValueError("CSV has no TTT-curve rows")
        panels = []
        for name, group in _facets(df, spec, None):
            # improvement over the un-adapted accuracy, per (dataset, seed, eps)
            base = group[group["ttt_epoch"] == 0][
                ["dataset", "seed", "epsilon_theta", "accuracy"]
            ].rename(columns={"accuracy": "acc0"})
            merged = group.merge(base, on=["dataset", "seed", "epsilon_theta"])
            merged["accuracy"] = merged["accuracy"] - merged["acc0"]
            merged["variant"] = merged["epsilon_theta"].map(lambda e: f"eps={e:.3f}")
            panels.append((name, _aggregate(merged, "ttt_epoch")))
        x_label = "TTT epoch"
        pi_ticks = False

    n = len(panels)
    fig, axes = plt.subplots(1, n, figsize=(4.2 * n, 3.4), squeeze=False, sharey=True)
    for ax, (title, stats) in zip(axes[0], panels):
        _draw_lines(ax, stats)
        ax.set_xlabel(x_label)
        if title:
            ax.set_title(title, fontsize=9)
        if pi_ticks:
            xs = sorted({x for line in stats.values() for x in line["x"]})
            _pi40_ticks(ax, xs)
    if spec.kind == "ttt-epochs":
        axes[0][0].set_ylabel("accuracy improvement (%)")
    fig.tight_layout()
    out = Path(spec.out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=spec.dpi)
    plt.close(fig)
    return {"kind": spec.kind, "panels": {title: stats for title, stats in panels}}

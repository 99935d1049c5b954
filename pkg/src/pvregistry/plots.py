"""Figures rendered next to the delimited report outputs."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .audit import DtaReport
from .tilt_lut import N_CLUSTERS, TiltLut, grid_raster

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}
# PNG metadata carries no timestamp, keeping reruns byte-identical
PNG_META = {"Software": None}


def figsize(width=6.0, ratio=None):
    ratio = ratio or (math.sqrt(5) - 1) / 2
    return width, width * ratio


def save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, metadata=PNG_META, bbox_inches="tight")
    plt.close(fig)
    return path


def capacity_scatter(report: DtaReport, path, unfiltered: Optional[DtaReport] = None) -> Path:
    """Reference vs estimated city capacity, one colour per departement."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(5.0, 1.0))
        depts = sorted(report.per_dept)
        colors = plt.get_cmap("tab10")
        for n, dept in enumerate(depts):
            cs = [c for c in report.cities if c.dept_code == dept]
            ax.scatter([c.c_kwp for c in cs], [c.c_hat_kwp for c in cs], s=14, color=colors(n % 10), label=f"dept {dept}")
        if unfiltered is not None:
            ax.scatter(
                [c.c_kwp for c in unfiltered.cities], [c.c_hat_kwp for c in unfiltered.cities],
                s=14, facecolors="none", edgecolors="0.4", linewidths=0.6, label="no building filter",
            )
        hi = max([c.c_kwp for c in report.cities] + [c.c_hat_kwp for c in report.cities] + [1.0])
        ax.plot([0, hi], [0, hi], color="0.3", lw=0.8, ls="--")
        ax.set_xlabel("registry capacity C [kWp]")
        ax.set_ylabel("estimated capacity Ĉ [kWp]")
        ax.legend(frameon=False, loc="upper left")
        return save(fig, path)


def ape_histogram(report: DtaReport, path, unfiltered: Optional[DtaReport] = None) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(5.0))
        apes = np.array([100 * c.ape for c in report.cities])
        bins = np.linspace(0, max(5.0, float(apes.max()) * 1.05), 25)
        ax.hist(apes, bins=bins, color="C0", alpha=0.8, label=f"filtered (MAPE {report.overall.mape_pct:.2f}%)"
                if report.filtered else f"MAPE {report.overall.mape_pct:.2f}%")
        if unfiltered is not None:
            u = np.array([100 * c.ape for c in unfiltered.cities])
            ax.hist(u, bins=bins, histtype="step", color="C3", label=f"unfiltered (MAPE {unfiltered.overall.mape_pct:.2f}%)")
        ax.set_xlabel("city APE [%]")
        ax.set_ylabel("cities")
        ax.legend(frameon=False)
        return save(fig, path)


def render_report_figures(report: DtaReport, out_dir, unfiltered: Optional[DtaReport] = None, prefix="report") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return [
        capacity_scatter(report, out / f"{prefix}_capacity.png", unfiltered),
        ape_histogram(report, out / f"{prefix}_ape.png", unfiltered),
    ]


def lut_figure(lut: TiltLut, path) -> Path:
    """One panel per surface cluster, mean tilt per grid square."""
    rasters = [np.array([[np.nan if v is None else v for v in row] for row in grid_raster(lut, k)]) for k in range(N_CLUSTERS)]
    finite = np.concatenate([r[np.isfinite(r)] for r in rasters]) if lut.cells else np.array([0.0])
    vmin, vmax = float(finite.min()), float(finite.max())
    extent = (
        lut.origin_lon,
        lut.origin_lon + lut.n_cols * lut.cell_size_deg,
        lut.origin_lat,
        lut.origin_lat + lut.n_rows * lut.cell_size_deg,
    )
    edges = (0.0, *lut.cluster_bounds, math.inf)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, N_CLUSTERS, figsize=(3.0 * N_CLUSTERS, 3.2), sharey=True)
        for k, ax in enumerate(axes):
            im = ax.imshow(rasters[k], extent=extent, origin="upper", vmin=vmin, vmax=vmax, cmap="viridis")
            ax.set_title(f"{edges[k]:.1f} – {edges[k + 1]:.1f} m²")
            ax.set_xlabel("lon [°]")
        axes[0].set_ylabel("lat [°]")
        fig.colorbar(im, ax=list(axes), label="mean tilt [°]", shrink=0.8)
        return save(fig, path)

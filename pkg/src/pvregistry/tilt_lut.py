"""Tilt look-up table keyed by projected-surface cluster and grid square.

Metadata records are binned into four projected-surface clusters and a
regular lon/lat grid; each populated (cluster, square) stores the mean tilt
of its records. Lookups fall back to the nearest populated square of the
same cluster, then to the cluster's national mean.
"""

from __future__ import annotations

import bisect
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import BoundsError, EmptyLut, InsufficientData
from .records import MetadataRecord, Reject

N_CLUSTERS = 4
DEFAULT_CELL_SIZE_DEG = 0.5
LUT_SCHEMA = "pvregistry.tilt-lut/1"


@dataclass(frozen=True)
class TiltLut:
    origin_lon: float
    origin_lat: float
    cell_size_deg: float
    n_cols: int
    n_rows: int
    cluster_bounds: tuple[float, float, float]
    cells: dict  # (cluster, col, row) -> (mean_tilt_deg, sample_count)
    national_fallback: tuple[float, ...]
    _by_cluster: dict = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        b = self.cluster_bounds
        if len(b) != N_CLUSTERS - 1 or not all(b[i] < b[i + 1] for i in range(len(b) - 1)):
            raise ValueError(f"cluster bounds must be 3 strictly ascending values, got {b}")
        if self.cell_size_deg <= 0:
            raise ValueError("cell size must be positive")
        by_cluster = defaultdict(list)
        for (k, col, row), (mean, _) in sorted(self.cells.items()):
            by_cluster[k].append((col, row, mean))
        object.__setattr__(self, "_by_cluster", dict(by_cluster))

    def cluster_of(self, projected_area_m2: float) -> int:
        """Cluster index; each bound belongs to the cluster below it."""
        return bisect.bisect_left(self.cluster_bounds, projected_area_m2)

    def cell_of(self, lon: float, lat: float) -> tuple[int, int]:
        """Grid square of a location, clamped onto the grid."""
        col = math.floor((lon - self.origin_lon) / self.cell_size_deg)
        row = math.floor((lat - self.origin_lat) / self.cell_size_deg)
        return min(max(col, 0), self.n_cols - 1), min(max(row, 0), self.n_rows - 1)

    def to_dict(self) -> dict:
        return {
            "schema": LUT_SCHEMA,
            "grid": {
                "origin_lon": self.origin_lon,
                "origin_lat": self.origin_lat,
                "cell_size_deg": self.cell_size_deg,
                "n_cols": self.n_cols,
                "n_rows": self.n_rows,
            },
            "cluster_bounds": list(self.cluster_bounds),
            "cells": [
                {"cluster": k, "col": c, "row": r, "mean_tilt_deg": m, "count": n}
                for (k, c, r), (m, n) in sorted(self.cells.items())
            ],
            "national_fallback": list(self.national_fallback),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TiltLut":
        g = d["grid"]
        return cls(
            origin_lon=float(g["origin_lon"]),
            origin_lat=float(g["origin_lat"]),
            cell_size_deg=float(g["cell_size_deg"]),
            n_cols=int(g["n_cols"]),
            n_rows=int(g["n_rows"]),
            cluster_bounds=tuple(float(b) for b in d["cluster_bounds"]),
            cells={
                (int(c["cluster"]), int(c["col"]), int(c["row"])): (float(c["mean_tilt_deg"]), int(c["count"]))
                for c in d["cells"]
            },
            national_fallback=tuple(float(v) for v in d["national_fallback"]),
        )


def quartile_bounds(projected: Sequence[float]) -> tuple[float, float, float]:
    q = [float(v) for v in np.percentile(np.asarray(projected, dtype=float), [25, 50, 75])]
    # tied quartiles would leave a cluster empty by construction; nudge them apart
    for i in (1, 2):
        if q[i] <= q[i - 1]:
            q[i] = float(np.nextafter(q[i - 1], np.inf))
    return q[0], q[1], q[2]


def _n_cells(span: float, cell: float) -> int:
    # spans that are whole multiples of the cell size must not gain a sliver cell
    return max(1, math.ceil(span / cell - 1e-9))


def build_lut(
    records: Iterable[MetadataRecord],
    cell_size_deg: float = DEFAULT_CELL_SIZE_DEG,
    bbox: Optional[Sequence[float]] = None,
    cluster_bounds: Optional[Sequence[float]] = None,
    rejects: Optional[list] = None,
) -> TiltLut:
    """Bin metadata by (cluster, grid square) and average the tilts.

    ``bbox`` is ``(lon1, lat1, lon2, lat2)``; records outside it are routed to
    ``rejects`` (or raise ``BoundsError`` when no list is given). Without
    explicit ``cluster_bounds`` the quartiles of the projected surfaces are
    used, which needs at least four records.
    """
    records = list(records)
    if cell_size_deg <= 0:
        raise ValueError("cell_size_deg must be positive")
    if bbox is None:
        if not records:
            raise InsufficientData("no metadata records")
        bbox = (
            min(r.lon for r in records),
            min(r.lat for r in records),
            max(r.lon for r in records),
            max(r.lat for r in records),
        )
    lon1, lat1, lon2, lat2 = map(float, bbox)
    if lon2 < lon1 or lat2 < lat1:
        raise ValueError(f"malformed bbox {bbox}")

    inside = []
    for i, r in enumerate(records):
        if lon1 <= r.lon <= lon2 and lat1 <= r.lat <= lat2:
            inside.append(r)
            continue
        msg = f"record {r.id!r} at ({r.lon}, {r.lat}) is outside the LUT bbox"
        if rejects is None:
            raise BoundsError(msg)
        rejects.append(Reject("metadata", i, msg))

    projected = [r.projected_area_m2 for r in inside]
    if cluster_bounds is None:
        if len(inside) < N_CLUSTERS:
            raise InsufficientData(f"need at least {N_CLUSTERS} records to derive clusters, got {len(inside)}")
        bounds = quartile_bounds(projected)
    else:
        bounds = tuple(float(b) for b in cluster_bounds)
    if not inside:
        raise InsufficientData("no metadata records inside the bbox")

    n_cols = _n_cells(lon2 - lon1, cell_size_deg)
    n_rows = _n_cells(lat2 - lat1, cell_size_deg)
    proto = TiltLut(lon1, lat1, cell_size_deg, n_cols, n_rows, bounds, {}, ())

    groups = defaultdict(list)
    per_cluster = defaultdict(list)
    for r, a in zip(inside, projected):
        k = proto.cluster_of(a)
        groups[(k, *proto.cell_of(r.lon, r.lat))].append(r.tilt_deg)
        per_cluster[k].append(r.tilt_deg)

    # fsum is exactly rounded, so the means do not depend on record order
    cells = {key: (math.fsum(t) / len(t), len(t)) for key, t in groups.items()}
    overall = math.fsum(r.tilt_deg for r in inside) / len(inside)
    fallback = tuple(
        math.fsum(per_cluster[k]) / len(per_cluster[k]) if per_cluster[k] else overall
        for k in range(N_CLUSTERS)
    )
    return TiltLut(lon1, lat1, cell_size_deg, n_cols, n_rows, bounds, cells, fallback)


def nearest_cell(lut: TiltLut, cluster: int, col: int, row: int) -> Optional[tuple[int, int, float]]:
    """Closest populated square by Chebyshev distance; ties go to the lowest (col, row)."""
    best = None
    best_key = None
    for c, r, mean in lut._by_cluster.get(cluster, ()):
        key = (max(abs(c - col), abs(r - row)), c, r)
        if best_key is None or key < best_key:
            best_key, best = key, (c, r, mean)
    return best


def lookup_tilt(lut: TiltLut, location, projected_area_m2: float) -> float:
    if not lut.cells:
        raise EmptyLut("the tilt LUT holds no populated cells")
    if not projected_area_m2 > 0:
        raise ValueError("projected area must be positive")
    k = lut.cluster_of(projected_area_m2)
    col, row = lut.cell_of(location[0], location[1])
    hit = lut.cells.get((k, col, row))
    if hit is not None:
        return hit[0]
    near = nearest_cell(lut, k, col, row)
    if near is not None:
        return near[2]
    return lut.national_fallback[k]


def grid_raster(lut: TiltLut, cluster: int) -> list[list[Optional[float]]]:
    """Dense rows of mean tilt for one cluster, northernmost row first; None marks empty squares."""
    out = []
    for row in range(lut.n_rows - 1, -1, -1):
        out.append([
            (lut.cells[(cluster, col, row)][0] if (cluster, col, row) in lut.cells else None)
            for col in range(lut.n_cols)
        ])
    return out

"""From a detected polygon to an installation with tilt, surface and capacity."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, NamedTuple, Optional, Sequence

from .errors import DegenerateFit, InsufficientData, NoMatches
from .geometry import Polygon, centroid, polygon_area_m2
from .records import Installation, MetadataRecord
from .tilt_lut import TiltLut, lookup_tilt

MAX_TILT_DEG = 89.9


@dataclass(frozen=True)
class CalibrationModel:
    efficiency_kwp_per_m2: float
    n_samples: int
    rmse_kwp: float

    def __post_init__(self):
        if not (math.isfinite(self.efficiency_kwp_per_m2) and self.efficiency_kwp_per_m2 > 0):
            raise DegenerateFit(f"efficiency must be finite and positive, got {self.efficiency_kwp_per_m2}")

    def to_dict(self) -> dict:
        return {
            "efficiency_kwp_per_m2": self.efficiency_kwp_per_m2,
            "n_samples": self.n_samples,
            "rmse_kwp": self.rmse_kwp,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationModel":
        return cls(float(d["efficiency_kwp_per_m2"]), int(d["n_samples"]), float(d["rmse_kwp"]))


def fit_efficiency(records: Iterable[MetadataRecord]) -> CalibrationModel:
    """Least-squares slope through the origin of capacity on surface."""
    pts = [(r.surface_m2, r.capacity_kwp) for r in records if r.surface_m2 > 0]
    if len(pts) < 2:
        raise InsufficientData(f"need at least 2 records with positive surface, got {len(pts)}")
    # exact rational sums give the correctly rounded slope, independent of order
    sxx = sum(Fraction(s) ** 2 for s, _ in pts)
    if sxx == 0:
        raise DegenerateFit("all surfaces are zero")
    eta = float(sum(Fraction(s) * Fraction(c) for s, c in pts) / sxx)
    rmse = math.sqrt(math.fsum((c - eta * s) ** 2 for s, c in pts) / len(pts))
    return CalibrationModel(eta, len(pts), rmse)


def surface_from_projected(projected_area_m2: float, tilt_deg: float) -> float:
    return projected_area_m2 / math.cos(math.radians(min(tilt_deg, MAX_TILT_DEG)))


def characterize(
    id: str,
    location,
    projected_area_m2: float,
    lut: TiltLut,
    calib: CalibrationModel,
    parts: tuple = (),
    building_id: Optional[str] = None,
) -> Installation:
    tilt = min(lookup_tilt(lut, location, projected_area_m2), MAX_TILT_DEG)
    surface = surface_from_projected(projected_area_m2, tilt)
    return Installation(
        id=id,
        location=location,
        projected_area_m2=projected_area_m2,
        tilt_deg=tilt,
        surface_m2=surface,
        capacity_kwp=calib.efficiency_kwp_per_m2 * surface,
        building_id=building_id,
        parts=parts,
    )


def extract(polygon: Polygon, lut: TiltLut, calib: CalibrationModel, id: str = "") -> Installation:
    return characterize(id, centroid(polygon), polygon_area_m2(polygon), lut, calib, parts=(polygon,))


class InstallationErrors(NamedTuple):
    mae_kwp: float
    mape_pct: float
    mre_area_pct: float
    n_pairs: int
    n_rejected: int


def per_installation_errors(
    estimates: Sequence[Installation], reference: Sequence[MetadataRecord]
) -> InstallationErrors:
    """Capacity MAE/MAPE and aggregate surface relative error over id-matched pairs.

    Pairs whose reference capacity is zero are skipped and counted in
    ``n_rejected``. Surfaces compare the estimated tilted surface with the
    reference surface.
    """
    ref = {r.id: r for r in reference}
    pairs = []
    rejected = 0
    for e in estimates:
        r = ref.get(e.id)
        if r is None:
            continue
        if r.capacity_kwp == 0:
            rejected += 1
            continue
        pairs.append((e, r))
    if not pairs:
        raise NoMatches("no estimate shares an id with the reference set")
    n = len(pairs)
    mae = math.fsum(abs(e.capacity_kwp - r.capacity_kwp) for e, r in pairs) / n
    mape = 100.0 * math.fsum(abs(e.capacity_kwp - r.capacity_kwp) / r.capacity_kwp for e, r in pairs) / n
    a_hat = math.fsum(e.surface_m2 for e, _ in pairs)
    a_ref = math.fsum(r.surface_m2 for _, r in pairs)
    mre = 100.0 * abs(a_hat - a_ref) / a_ref
    return InstallationErrors(mae, mape, mre, n, rejected)

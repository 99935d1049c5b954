"""Plain record types passed between the pipeline stages."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

from .geometry import Point, Polygon


@dataclass(frozen=True)
class MetadataRecord:
    """One crowdsourced PV system description (tilt, surface, capacity)."""

    id: str
    lat: float
    lon: float
    tilt_deg: float
    surface_m2: float
    capacity_kwp: float
    azimuth_deg: Optional[float] = None

    @property
    def projected_area_m2(self) -> float:
        return self.surface_m2 * math.cos(math.radians(self.tilt_deg))


@dataclass(frozen=True)
class RegistryEntry:
    city_code: str
    dept_code: str
    count: int
    capacity_kwp: float


@dataclass(frozen=True)
class CityBoundary:
    city_code: str
    dept_code: str
    parts: tuple[Polygon, ...]


@dataclass(frozen=True)
class Installation:
    id: str
    location: Point
    projected_area_m2: float
    tilt_deg: float
    surface_m2: float
    capacity_kwp: float
    building_id: Optional[str] = None
    city_code: Optional[str] = None
    parts: tuple[Polygon, ...] = field(default=(), compare=False, repr=False)


@dataclass(frozen=True)
class Reject:
    """A row or feature that failed validation and was set aside."""

    source: str
    index: int
    reason: str

"""Building filter, same-rooftop merge and size thresholds."""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, replace
from typing import Optional, Sequence

import shapely

from .characteristics import CalibrationModel, characterize
from .geometry import Point, Polygon, SpatialIndex, build_index, intersects, query_candidates
from .records import Installation
from .tilt_lut import TiltLut

MIN_AREA_M2 = 1.7
MAX_CAPACITY_KWP = 36.0


@dataclass
class FilterStats:
    input_count: int = 0
    dropped_no_building: int = 0
    merged_groups: int = 0
    merged_away: int = 0
    dropped_too_small: int = 0
    dropped_too_large: int = 0
    output_count: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FilterStats":
        return cls(**{k: int(v) for k, v in d.items()})

    def balanced(self) -> bool:
        return self.input_count == (
            self.output_count
            + self.dropped_no_building
            + self.dropped_too_small
            + self.dropped_too_large
            + self.merged_away
        )


class BuildingLayer:
    """Footprints plus their spatial index, built once and shared read-only."""

    def __init__(self, footprints: Sequence[tuple[str, Polygon]]):
        self.footprints = dict(footprints)
        self.index: SpatialIndex = build_index(list(footprints))

    def __len__(self):
        return len(self.footprints)


def _shape(p: Polygon):
    return shapely.Polygon(p.exterior, p.holes)


def _overlap_area(parts: Sequence[Polygon], footprint: Polygon) -> float:
    fp = _shape(footprint)
    return sum(_shape(p).intersection(fp).area for p in parts)


def choose_building(parts: Sequence[Polygon], hits: Sequence[str], footprints: dict) -> Optional[str]:
    """Pick among intersecting footprints: largest overlap, then lowest id."""
    if not hits:
        return None
    if len(hits) == 1:
        return hits[0]
    scored = [(-_overlap_area(parts, footprints[b]), b) for b in hits]
    return min(scored)[1]


def assign_buildings(installations: Sequence[Installation], buildings: BuildingLayer) -> list[Installation]:
    out = []
    for inst in installations:
        hits = set()
        for part in inst.parts:
            for b in query_candidates(buildings.index, part):
                if b not in hits and intersects(part, buildings.footprints[b]):
                    hits.add(b)
        bid = choose_building(inst.parts, sorted(hits), buildings.footprints)
        out.append(replace(inst, building_id=bid))
    return out


def merge_per_building(
    installations: Sequence[Installation], lut: TiltLut, calib: CalibrationModel
) -> list[Installation]:
    """Collapse installations sharing a building; unassigned ones pass through."""
    groups = defaultdict(list)
    out = []
    for inst in installations:
        if inst.building_id is None:
            out.append(inst)
        else:
            groups[inst.building_id].append(inst)
    for bid, members in groups.items():
        if len(members) == 1:
            out.append(members[0])
            continue
        members = sorted(members, key=lambda i: i.id)
        area = math.fsum(m.projected_area_m2 for m in members)
        lon = math.fsum(m.projected_area_m2 * m.location.lon for m in members) / area
        lat = math.fsum(m.projected_area_m2 * m.location.lat for m in members) / area
        parts = tuple(p for m in members for p in m.parts)
        out.append(characterize(members[0].id, Point(lon, lat), area, lut, calib, parts=parts, building_id=bid))
    out.sort(key=lambda i: i.id)
    return out


def apply_thresholds(
    installations: Sequence[Installation],
    min_area_m2: float = MIN_AREA_M2,
    max_capacity_kwp: float = MAX_CAPACITY_KWP,
    stats: Optional[FilterStats] = None,
) -> tuple[list[Installation], FilterStats]:
    if stats is None:
        stats = FilterStats(input_count=len(installations))
    kept = []
    for inst in installations:
        if inst.projected_area_m2 < min_area_m2:
            stats.dropped_too_small += 1
        elif inst.capacity_kwp > max_capacity_kwp:
            stats.dropped_too_large += 1
        else:
            kept.append(inst)
    stats.output_count = len(kept)
    return kept, stats


def run_postprocess(
    installations: Sequence[Installation],
    buildings: Optional[BuildingLayer],
    lut: TiltLut,
    calib: CalibrationModel,
    enable_building_filter: bool = True,
    min_area_m2: float = MIN_AREA_M2,
    max_capacity_kwp: float = MAX_CAPACITY_KWP,
) -> tuple[list[Installation], FilterStats]:
    """Filter on buildings, merge per rooftop, then apply thresholds.

    With the building filter disabled only the thresholds run, which is the
    unfiltered comparison variant.
    """
    stats = FilterStats(input_count=len(installations))
    items = sorted(installations, key=lambda i: i.id)
    if enable_building_filter:
        if buildings is None:
            raise ValueError("building filter enabled but no building layer given")
        assigned = assign_buildings(items, buildings)
        on_roof = [i for i in assigned if i.building_id is not None]
        stats.dropped_no_building = len(assigned) - len(on_roof)
        per_building = Counter(i.building_id for i in on_roof)
        stats.merged_groups = sum(1 for n in per_building.values() if n > 1)
        items = merge_per_building(on_roof, lut, calib)
        stats.merged_away = len(on_roof) - len(items)
    return apply_thresholds(items, min_area_m2, max_capacity_kwp, stats)

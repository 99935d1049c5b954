"""City-wise aggregation against an official registry and the DTA metrics.

Per city with reference count k and capacity C, and estimates k_hat, C_hat:

    ape   = |C - C_hat| / C
    ratio = k_hat / k
    aipe  = -((C/k - C_hat/k_hat) / (C/k))

Metrics are fractions internally; the report scales APE and AIPE means to
percent.
"""

from __future__ import annotations

import math
import statistics
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

from .errors import EmptyComparisonSet, UndefinedReference
from .geometry import SpatialIndex, point_in_polygon
from .records import CityBoundary, Installation, RegistryEntry

OUTSIDE_MAPPING_AREA = "outside_mapping_area"
ZERO_REFERENCE = "zero_reference"
NOT_IN_REGISTRY = "not_in_registry"
OVERALL = "overall"


class CityLayer:
    """City boundaries with a part-level spatial index."""

    def __init__(self, cities: Sequence[CityBoundary]):
        self.cities = {c.city_code: c for c in cities}
        items = [((c.city_code, k), p.bbox) for c in cities for k, p in enumerate(c.parts)]
        self.index = SpatialIndex(items)

    def dept_of(self, city_code: str) -> str:
        return self.cities[city_code].dept_code

    def locate(self, pt) -> Optional[str]:
        """Code of the city containing ``pt``; lowest code on shared borders."""
        hits = [
            code
            for code, k in self.index.query((pt[0], pt[1], pt[0], pt[1]))
            if point_in_polygon(pt, self.cities[code].parts[k])
        ]
        return min(hits) if hits else None


def assign_cities(
    installations: Sequence[Installation], cities: CityLayer
) -> tuple[list[Installation], list[tuple[Installation, str]]]:
    """Attach city codes by centroid; returns (assigned, [(excluded, reason)])."""
    assigned, excluded = [], []
    for inst in installations:
        code = cities.locate(inst.location)
        if code is None:
            excluded.append((inst, OUTSIDE_MAPPING_AREA))
        else:
            assigned.append(replace(inst, city_code=code))
    return assigned, excluded


@dataclass(frozen=True)
class CityAggregate:
    city_code: str
    dept_code: str
    k_hat: int
    c_hat_kwp: float


def aggregate(installations: Iterable[Installation], dept_of=None) -> list[CityAggregate]:
    """Count and capacity per city, summed in installation-id order."""
    groups = defaultdict(list)
    for inst in installations:
        if inst.city_code is None:
            raise ValueError(f"installation {inst.id!r} has no city code")
        groups[inst.city_code].append(inst)
    out = []
    for code in sorted(groups):
        members = sorted(groups[code], key=lambda i: i.id)
        dept = dept_of(code) if dept_of else ""
        out.append(CityAggregate(code, dept, len(members), math.fsum(m.capacity_kwp for m in members)))
    return out


@dataclass(frozen=True)
class CityComparison:
    city_code: str
    dept_code: str
    k: int
    k_hat: int
    c_kwp: float
    c_hat_kwp: float
    ape: float
    ratio: float
    aipe: Optional[float]  # None when k_hat == 0

    def to_dict(self) -> dict:
        return {
            "city_code": self.city_code,
            "dept_code": self.dept_code,
            "k": self.k,
            "k_hat": self.k_hat,
            "c_kwp": self.c_kwp,
            "c_hat_kwp": self.c_hat_kwp,
            "ape": self.ape,
            "ratio": self.ratio,
            "aipe": self.aipe,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CityComparison":
        return cls(
            str(d["city_code"]), str(d["dept_code"]), int(d["k"]), int(d["k_hat"]),
            float(d["c_kwp"]), float(d["c_hat_kwp"]), float(d["ape"]), float(d["ratio"]),
            None if d["aipe"] is None else float(d["aipe"]),
        )


def compare_city(k: int, c_kwp: float, k_hat: int, c_hat_kwp: float) -> tuple[float, float, Optional[float]]:
    """(ape, ratio, aipe) for one city; aipe is None without detections."""
    if k <= 0 or c_kwp <= 0:
        raise UndefinedReference(f"reference count {k} / capacity {c_kwp} must both be positive")
    ape = abs(c_kwp - c_hat_kwp) / c_kwp
    ratio = k_hat / k
    if k_hat > 0:
        ref_avg = c_kwp / k
        aipe = -((ref_avg - c_hat_kwp / k_hat) / ref_avg)
    else:
        aipe = None
    return ape, ratio, aipe


@dataclass(frozen=True)
class ExcludedCity:
    city_code: str
    dept_code: str
    reason: str
    k: int = 0
    k_hat: int = 0
    c_kwp: float = 0.0
    c_hat_kwp: float = 0.0

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "ExcludedCity":
        return cls(
            str(d["city_code"]), str(d["dept_code"]), str(d["reason"]),
            int(d["k"]), int(d["k_hat"]), float(d["c_kwp"]), float(d["c_hat_kwp"]),
        )


def join_registry(
    aggregates: Sequence[CityAggregate], registry: Sequence[RegistryEntry]
) -> tuple[list[CityComparison], list[ExcludedCity]]:
    """Pair estimates with the registry; registry cities without detections get k_hat = 0."""
    est = {a.city_code: a for a in aggregates}
    comparisons, excluded = [], []
    for entry in sorted(registry, key=lambda e: e.city_code):
        a = est.pop(entry.city_code, None)
        k_hat, c_hat = (a.k_hat, a.c_hat_kwp) if a else (0, 0.0)
        try:
            ape, ratio, aipe = compare_city(entry.count, entry.capacity_kwp, k_hat, c_hat)
        except UndefinedReference:
            excluded.append(
                ExcludedCity(entry.city_code, entry.dept_code, ZERO_REFERENCE,
                             entry.count, k_hat, entry.capacity_kwp, c_hat)
            )
            continue
        comparisons.append(
            CityComparison(entry.city_code, entry.dept_code, entry.count, k_hat,
                           entry.capacity_kwp, c_hat, ape, ratio, aipe)
        )
    for code in sorted(est):
        a = est[code]
        excluded.append(ExcludedCity(code, a.dept_code, NOT_IN_REGISTRY, 0, a.k_hat, 0.0, a.c_hat_kwp))
    return comparisons, excluded


@dataclass(frozen=True)
class DeptSummary:
    mape_pct: float
    median_ape_pct: float
    mean_ratio: float
    mean_aipe_pct: Optional[float]
    k: int
    k_hat: int
    c_kwp: float
    c_hat_kwp: float
    n_cities: int
    n_excluded: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "DeptSummary":
        return cls(
            float(d["mape_pct"]), float(d["median_ape_pct"]), float(d["mean_ratio"]),
            None if d["mean_aipe_pct"] is None else float(d["mean_aipe_pct"]),
            int(d["k"]), int(d["k_hat"]), float(d["c_kwp"]), float(d["c_hat_kwp"]),
            int(d["n_cities"]), int(d["n_excluded"]),
        )


@dataclass(frozen=True)
class DtaReport:
    per_dept: dict  # dept_code -> DeptSummary
    overall: DeptSummary
    cities: tuple[CityComparison, ...]
    excluded_cities: tuple[ExcludedCity, ...] = ()
    filtered: bool = True
    filter_stats: Optional[dict] = None
    n_outside: int = 0

    def to_dict(self) -> dict:
        return {
            "filtered": self.filtered,
            "overall": self.overall.to_dict(),
            "per_dept": {d: s.to_dict() for d, s in sorted(self.per_dept.items())},
            "cities": [c.to_dict() for c in self.cities],
            "excluded_cities": [e.to_dict() for e in self.excluded_cities],
            "filter_stats": self.filter_stats,
            "n_outside": self.n_outside,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DtaReport":
        return cls(
            per_dept={k: DeptSummary.from_dict(v) for k, v in d["per_dept"].items()},
            overall=DeptSummary.from_dict(d["overall"]),
            cities=tuple(CityComparison.from_dict(c) for c in d["cities"]),
            excluded_cities=tuple(ExcludedCity.from_dict(e) for e in d["excluded_cities"]),
            filtered=bool(d["filtered"]),
            filter_stats=d.get("filter_stats"),
            n_outside=int(d.get("n_outside", 0)),
        )


def _summarize(cities: Sequence[CityComparison], n_excluded: int) -> DeptSummary:
    apes = [c.ape for c in cities]
    aipes = [c.aipe for c in cities if c.aipe is not None]
    n = len(cities)
    return DeptSummary(
        mape_pct=100.0 * math.fsum(apes) / n,
        median_ape_pct=100.0 * statistics.median(apes),
        mean_ratio=math.fsum(c.ratio for c in cities) / n,
        mean_aipe_pct=100.0 * math.fsum(aipes) / len(aipes) if aipes else None,
        k=sum(c.k for c in cities),
        k_hat=sum(c.k_hat for c in cities),
        c_kwp=math.fsum(c.c_kwp for c in cities),
        c_hat_kwp=math.fsum(c.c_hat_kwp for c in cities),
        n_cities=n,
        n_excluded=n_excluded,
    )


def build_report(
    comparisons: Sequence[CityComparison],
    excluded: Sequence[ExcludedCity] = (),
    filtered: bool = True,
    filter_stats: Optional[dict] = None,
    n_outside: int = 0,
) -> DtaReport:
    """Unweighted city means per departement and over all cities."""
    if not comparisons:
        raise EmptyComparisonSet("no city has a usable registry reference")
    cities = tuple(sorted(comparisons, key=lambda c: (c.dept_code, c.city_code)))
    by_dept = defaultdict(list)
    for c in cities:
        by_dept[c.dept_code].append(c)
    excl_by_dept = defaultdict(int)
    for e in excluded:
        excl_by_dept[e.dept_code] += 1
    per_dept = {d: _summarize(cs, excl_by_dept[d]) for d, cs in sorted(by_dept.items())}
    return DtaReport(
        per_dept=per_dept,
        overall=_summarize(cities, len(excluded)),
        cities=cities,
        excluded_cities=tuple(sorted(excluded, key=lambda e: (e.dept_code, e.city_code))),
        filtered=filtered,
        filter_stats=filter_stats,
        n_outside=n_outside,
    )


def run_audit(
    installations: Sequence[Installation],
    cities: CityLayer,
    registry: Sequence[RegistryEntry],
    filtered: bool = True,
    filter_stats: Optional[dict] = None,
) -> DtaReport:
    assigned, outside = assign_cities(installations, cities)
    aggs = aggregate(assigned, cities.dept_of)
    comparisons, excluded = join_registry(aggs, registry)
    return build_report(comparisons, excluded, filtered, filter_stats, n_outside=len(outside))


def _fmt(v: Optional[float], nd: int = 2) -> str:
    return "-" if v is None else f"{v:.{nd}f}"


def format_table(report: DtaReport, unfiltered: Optional[DtaReport] = None) -> str:
    """Plain-text table, one line per departement; unfiltered values in parentheses."""
    cols = ("dept", "MAPE", "med.APE", "mean.ratio", "mean.AIPE", "k", "k_hat", "C", "C_hat")
    lines = ["\t".join(cols)]
    rows = [*report.per_dept.items(), (OVERALL, report.overall)]
    alt = {} if unfiltered is None else {**unfiltered.per_dept, OVERALL: unfiltered.overall}
    for dept, s in rows:
        u = alt.get(dept)
        vals = [
            (s.mape_pct, u and u.mape_pct),
            (s.median_ape_pct, u and u.median_ape_pct),
            (s.mean_ratio, u and u.mean_ratio),
            (s.mean_aipe_pct, u and u.mean_aipe_pct),
        ]
        cells = [dept]
        for a, b in vals:
            cells.append(_fmt(a) + (f" ({_fmt(b)})" if u is not None else ""))
        cells.append(str(s.k))
        cells.append(str(s.k_hat) + (f" ({u.k_hat})" if u is not None else ""))
        cells.append(_fmt(s.c_kwp))
        cells.append(_fmt(s.c_hat_kwp) + (f" ({_fmt(u.c_hat_kwp)})" if u is not None else ""))
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"

"""Synthetic landscapes with known answers for closed-loop verification.

Cities form a rectangular grid, buildings and installations are axis-aligned
rectangles, and the registry is the exact city aggregate of the truth. A
three-knob detector (recall, false positives, area noise) degrades the
truth before it runs through the real pipeline.

Every random draw comes from a generator keyed by ``(seed, label)``, so a
new noise source never shifts the draws of an existing one.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .audit import CityLayer, DtaReport, run_audit
from .characteristics import CalibrationModel, InstallationErrors, extract, fit_efficiency, per_installation_errors
from .errors import InvalidConfig, NoMatches
from .geometry import EARTH_RADIUS_M, Point, Polygon, centroid, polygon_area_m2
from .postprocess import BuildingLayer, FilterStats, run_postprocess
from .records import CityBoundary, Installation, MetadataRecord, RegistryEntry
from .tilt_lut import TiltLut, build_lut

DEG_PER_M = 180.0 / math.pi / EARTH_RADIUS_M
SLOT_DEG = 0.0005


@dataclass(frozen=True)
class DetectorConfig:
    recall: float = 1.0
    false_positive_rate: float = 0.0  # expected false positives per true installation
    area_noise_sigma: float = 0.0
    off_building_rate: float = 0.0
    fp_area_range_m2: tuple[float, float] = (2.0, 8.0)


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    n_cities: int = 6
    grid_cols: int = 3
    n_depts: int = 2
    origin_lon: float = 2.0
    origin_lat: float = 45.0
    city_size_deg: float = 0.05
    installations_per_city: tuple[int, int] = (20, 40)
    empty_building_fraction: float = 0.25
    area_range_m2: tuple[float, float] = (8.0, 60.0)
    true_efficiency_kwp_per_m2: float = 0.17
    tilt_lat_slope: float = 1.5
    tilt_intercept: float = -40.0
    cluster_bounds: tuple[float, float, float] = (15.0, 25.0, 40.0)
    cluster_offsets: tuple[float, float, float, float] = (8.0, 4.0, 0.0, -4.0)
    lut_cell_size_deg: float = 0.05
    metadata_fraction: float = 1.0
    building_filter: bool = True
    detector: DetectorConfig = field(default_factory=DetectorConfig)

    def validate(self) -> None:
        d = self.detector
        problems = []
        if self.n_cities < 1 or self.grid_cols < 1 or self.n_depts < 1:
            problems.append("n_cities, grid_cols and n_depts must be >= 1")
        if self.n_depts > self.n_cities:
            problems.append("more departements than cities")
        lo, hi = self.installations_per_city
        if lo < 0 or hi < lo:
            problems.append("installations_per_city must be 0 <= min <= max")
        a_lo, a_hi = self.area_range_m2
        if not 0 < a_lo <= a_hi:
            problems.append("area_range_m2 must be 0 < min <= max")
        if not self.true_efficiency_kwp_per_m2 > 0:
            problems.append("true efficiency must be positive")
        b = self.cluster_bounds
        if len(b) != 3 or not b[0] < b[1] < b[2]:
            problems.append("cluster_bounds must be 3 ascending values")
        if len(self.cluster_offsets) != 4:
            problems.append("cluster_offsets needs 4 values")
        if not 0 < self.metadata_fraction <= 1:
            problems.append("metadata_fraction must lie in (0, 1]")
        if self.city_size_deg <= 4 * SLOT_DEG or self.lut_cell_size_deg <= 0:
            problems.append("city_size_deg / lut_cell_size_deg too small")
        if not 0 <= d.recall <= 1:
            problems.append("recall must lie in [0, 1]")
        if d.false_positive_rate < 0:
            problems.append("false_positive_rate must be >= 0")
        if d.area_noise_sigma < 0:
            problems.append("area_noise_sigma must be >= 0")
        if not 0 <= d.off_building_rate <= 1:
            problems.append("off_building_rate must lie in [0, 1]")
        if not 0 < d.fp_area_range_m2[0] <= d.fp_area_range_m2[1]:
            problems.append("fp_area_range_m2 must be 0 < min <= max")
        if problems:
            raise InvalidConfig("; ".join(problems))

    @property
    def grid_rows(self) -> int:
        return math.ceil(self.n_cities / self.grid_cols)

    @property
    def bbox(self) -> tuple[float, float, float, float]:
        return (
            self.origin_lon,
            self.origin_lat,
            self.origin_lon + self.grid_cols * self.city_size_deg,
            self.origin_lat + self.grid_rows * self.city_size_deg,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown simulation keys: {sorted(unknown)}")
        det = d.pop("detector", {}) or {}
        det_known = {f.name for f in fields(DetectorConfig)}
        if set(det) - det_known:
            raise InvalidConfig(f"unknown detector keys: {sorted(set(det) - det_known)}")
        det = {k: tuple(v) if isinstance(v, list) else v for k, v in det.items()}
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        try:
            cfg = cls(**d, detector=DetectorConfig(**det))
        except TypeError as e:
            raise InvalidConfig(str(e)) from None
        cfg.validate()
        return cfg


def load_config(path) -> SimConfig:
    from .config import load_table

    table = load_table(path)
    return SimConfig.from_dict(table.get("simulation", table))


def rng_for(seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(label.encode("utf-8"))])


@dataclass
class GroundTruth:
    cfg: SimConfig
    cities: list[CityBoundary]
    buildings: list[tuple[str, Polygon]]
    empty_buildings: dict  # city_code -> [building ids without an installation]
    free_slots: dict  # city_code -> [(lon, lat) centres of slots with no building]
    installations: list[Installation]
    registry: list[RegistryEntry]
    metadata: list[MetadataRecord]

    @property
    def building_map(self) -> dict:
        return dict(self.buildings)


def _rect(lon: float, lat: float, w_m: float, h_m: float) -> Polygon:
    dx = 0.5 * w_m * DEG_PER_M / math.cos(math.radians(lat))
    dy = 0.5 * h_m * DEG_PER_M
    return Polygon(((lon - dx, lat - dy), (lon + dx, lat - dy), (lon + dx, lat + dy), (lon - dx, lat + dy)))


def true_tilt(cfg: SimConfig, lat: float, projected_area_m2: float) -> float:
    """Tilt field constant over each LUT latitude band and area cluster."""
    row = math.floor((lat - cfg.origin_lat) / cfg.lut_cell_size_deg)
    band_lat = cfg.origin_lat + (row + 0.5) * cfg.lut_cell_size_deg
    k = sum(1 for b in cfg.cluster_bounds if projected_area_m2 > b)
    t = cfg.tilt_lat_slope * band_lat + cfg.tilt_intercept + cfg.cluster_offsets[k]
    return min(max(t, 0.0), 80.0)


def city_code(cfg: SimConfig, i: int) -> tuple[str, str]:
    dept = f"{10 + i * cfg.n_depts // cfg.n_cities:02d}"
    return f"{dept}{i + 1:03d}", dept


def generate_ground_truth(cfg: SimConfig) -> GroundTruth:
    cfg.validate()
    eta = cfg.true_efficiency_kwp_per_m2
    cities, buildings, truth = [], [], []
    empty_buildings, free_slots = {}, {}
    n_slot = int(cfg.city_size_deg / SLOT_DEG)
    for i in range(cfg.n_cities):
        code, dept = city_code(cfg, i)
        col, row = i % cfg.grid_cols, i // cfg.grid_cols
        lon0 = cfg.origin_lon + col * cfg.city_size_deg
        lat0 = cfg.origin_lat + row * cfg.city_size_deg
        s = cfg.city_size_deg
        cities.append(CityBoundary(code, dept, (Polygon(((lon0, lat0), (lon0 + s, lat0), (lon0 + s, lat0 + s), (lon0, lat0 + s))),)))

        rng = rng_for(cfg.seed, f"layout/{code}")
        lo, hi = cfg.installations_per_city
        n_inst = int(rng.integers(lo, hi + 1))
        n_empty = int(round(n_inst * cfg.empty_building_fraction))
        n_bld = n_inst + n_empty
        # outermost ring of slots stays empty so nothing touches a city border
        inner = [(a, b) for a in range(1, n_slot - 1) for b in range(1, n_slot - 1)]
        if n_bld + 1 > len(inner):
            raise InvalidConfig(f"city {code}: {n_bld} buildings do not fit in {len(inner)} slots")
        order = rng.permutation(len(inner))
        used = [inner[j] for j in order[:n_bld]]
        free_slots[code] = [
            (lon0 + (a + 0.5) * SLOT_DEG, lat0 + (b + 0.5) * SLOT_DEG) for a, b in sorted(inner[j] for j in order[n_bld:])
        ]
        areas = rng.uniform(*cfg.area_range_m2, size=n_bld)
        bld_factor = rng.uniform(1.5, 3.0, size=n_bld)
        aspect = rng.uniform(0.6, 1.6, size=n_bld)
        jitter = rng.uniform(-0.5, 0.5, size=(n_bld, 2))
        empties = []
        for j, (a, b) in enumerate(used):
            clon = lon0 + (a + 0.5) * SLOT_DEG
            clat = lat0 + (b + 0.5) * SLOT_DEG
            b_area = areas[j] * bld_factor[j]
            bw = math.sqrt(b_area * aspect[j])
            bh = b_area / bw
            bid = f"b-{code}-{j:05d}"
            buildings.append((bid, _rect(clon, clat, bw, bh)))
            if j >= n_inst:
                empties.append(bid)
                continue
            shrink = math.sqrt(areas[j] / b_area)
            iw, ih = bw * shrink, bh * shrink
            ilon = clon + jitter[j, 0] * (bw - iw) * DEG_PER_M / math.cos(math.radians(clat))
            ilat = clat + jitter[j, 1] * (bh - ih) * DEG_PER_M
            poly = _rect(ilon, ilat, iw, ih)
            area = polygon_area_m2(poly)
            loc = centroid(poly)
            tilt = true_tilt(cfg, loc.lat, area)
            surface = area / math.cos(math.radians(tilt))
            truth.append(
                Installation(
                    id=f"pv-{code}-{j:05d}", location=loc, projected_area_m2=area, tilt_deg=tilt,
                    surface_m2=surface, capacity_kwp=eta * surface, building_id=bid, city_code=code,
                    parts=(poly,),
                )
            )
        empty_buildings[code] = empties

    registry = []
    by_city = {c.city_code: [] for c in cities}
    for t in truth:
        by_city[t.city_code].append(t.capacity_kwp)
    for c in cities:
        caps = by_city[c.city_code]
        registry.append(RegistryEntry(c.city_code, c.dept_code, len(caps), math.fsum(caps)))

    rng = rng_for(cfg.seed, "metadata")
    n_meta = max(1, int(round(cfg.metadata_fraction * len(truth)))) if truth else 0
    pick = sorted(rng.choice(len(truth), size=n_meta, replace=False)) if n_meta < len(truth) else range(len(truth))
    metadata = [
        MetadataRecord(t.id, t.location.lat, t.location.lon, t.tilt_deg, t.surface_m2, t.capacity_kwp)
        for t in (truth[j] for j in pick)
    ]
    return GroundTruth(cfg, cities, buildings, empty_buildings, free_slots, truth, registry, metadata)


def _scaled(poly: Polygon, factor: float) -> Polygon:
    """Rescale about the vertex mean so the lon/lat area changes by ``factor``."""
    cx = sum(c[0] for c in poly.exterior) / len(poly.exterior)
    cy = sum(c[1] for c in poly.exterior) / len(poly.exterior)
    s = math.sqrt(factor)
    return Polygon(tuple((cx + s * (x - cx), cy + s * (y - cy)) for x, y in poly.exterior))


def apply_detector(gt: GroundTruth, cfg: Optional[SimConfig] = None) -> list[tuple[str, Polygon]]:
    """Imperfect detections of the truth: thinning, area noise, false positives."""
    cfg = cfg or gt.cfg
    cfg.validate()
    d = cfg.detector
    bmap = gt.building_map
    per_city = {c.city_code: [] for c in gt.cities}
    for t in gt.installations:
        per_city[t.city_code].append(t)
    out = []
    for c in gt.cities:
        code = c.city_code
        members = per_city[code]
        u = rng_for(cfg.seed, f"detector/recall/{code}").random(len(members))
        noise = rng_for(cfg.seed, f"detector/noise/{code}").lognormal(0.0, d.area_noise_sigma, len(members))
        for t, ui, f in zip(members, u, noise):
            if ui >= d.recall:
                continue
            poly = t.parts[0]
            out.append((t.id, poly if d.area_noise_sigma == 0 else _scaled(poly, float(f))))

        if d.false_positive_rate <= 0:
            continue
        rng = rng_for(cfg.seed, f"detector/fp/{code}")
        n_fp = int(rng.poisson(d.false_positive_rate * len(members)))
        off = rng.random(n_fp) < d.off_building_rate
        fp_area = rng.uniform(*d.fp_area_range_m2, size=n_fp)
        hosts = gt.empty_buildings[code] or sorted(t.building_id for t in members)
        free = gt.free_slots[code]
        for j in range(n_fp):
            if off[j] or not hosts:
                clon, clat = free[int(rng.integers(len(free)))]
            else:
                host = bmap[hosts[int(rng.integers(len(hosts)))]]
                clon, clat = centroid(host)
            side = math.sqrt(fp_area[j])
            out.append((f"fp-{code}-{j:05d}", _rect(clon, clat, side, side)))
    return out


@dataclass
class SimResult:
    report: DtaReport
    unfiltered: DtaReport
    filtered: DtaReport
    truth: GroundTruth
    lut: TiltLut
    calib: CalibrationModel
    detections: list
    installations: list
    kept: list
    stats: FilterStats
    installation_errors: Optional[InstallationErrors]


def run_end_to_end(cfg: SimConfig, truth: Optional[GroundTruth] = None) -> SimResult:
    """generate -> LUT + calibration -> detect -> extract -> postprocess -> audit.

    Both building-filter variants are audited; ``report`` is the one selected
    by ``cfg.building_filter``.
    """
    gt = truth if truth is not None else generate_ground_truth(cfg)
    lut = build_lut(gt.metadata, cfg.lut_cell_size_deg, bbox=cfg.bbox, cluster_bounds=cfg.cluster_bounds)
    calib = fit_efficiency(gt.metadata)
    detections = apply_detector(gt, cfg)
    installations = [extract(p, lut, calib, id=i) for i, p in detections]
    cities = CityLayer(gt.cities)
    kept_f, stats_f = run_postprocess(installations, BuildingLayer(gt.buildings), lut, calib, True)
    kept_u, stats_u = run_postprocess(installations, None, lut, calib, False)
    rep_f = run_audit(kept_f, cities, gt.registry, True, stats_f.to_dict())
    rep_u = run_audit(kept_u, cities, gt.registry, False, stats_u.to_dict())
    kept, stats = (kept_f, stats_f) if cfg.building_filter else (kept_u, stats_u)
    reference = [
        MetadataRecord(t.id, t.location.lat, t.location.lon, t.tilt_deg, t.surface_m2, t.capacity_kwp)
        for t in gt.installations
    ]
    try:
        errors = per_installation_errors(kept, reference)
    except NoMatches:
        errors = None
    return SimResult(
        report=rep_f if cfg.building_filter else rep_u,
        unfiltered=rep_u,
        filtered=rep_f,
        truth=gt,
        lut=lut,
        calib=calib,
        detections=detections,
        installations=installations,
        kept=kept,
        stats=stats,
        installation_errors=errors,
    )


def recall_sweep(cfg: SimConfig, recalls: Sequence[float], seeds: Sequence[int]) -> dict:
    """Reports per recall level; each seed's ground truth is generated once and shared."""
    out = {r: [] for r in recalls}
    for s in seeds:
        base = replace(cfg, seed=s)
        gt = generate_ground_truth(base)
        for r in recalls:
            run_cfg = replace(base, detector=replace(base.detector, recall=r))
            out[r].append(run_end_to_end(run_cfg, gt).report)
    return out


def write_dataset(result: SimResult, out_dir) -> dict:
    """Write the synthetic inputs, intermediate products and both reports."""
    from . import io_formats as io

    out = io.ensure_dir(out_dir)
    gt = result.truth
    paths = {
        "cities": out / "cities.geojson",
        "buildings": out / "buildings.geojson",
        "truth": out / "truth.geojson",
        "detections": out / "detections.geojson",
        "registry": out / "registry.csv",
        "metadata": out / "metadata.csv",
        "lut": out / "lut.json",
        "calib": out / "calib.json",
        "installations": out / "installations.geojson",
        "kept": out / "kept.geojson",
        "report": out / "report.csv",
        "summary": out / "summary.json",
        "config": out / "sim_config.json",
    }
    io.write_features(paths["cities"], [({"city_code": c.city_code, "dept_code": c.dept_code}, c.parts) for c in gt.cities])
    io.write_features(paths["buildings"], [({"id": b}, (p,)) for b, p in gt.buildings])
    io.write_installations(paths["truth"], gt.installations)
    io.write_features(paths["detections"], [({"id": i}, (p,)) for i, p in result.detections])
    io.write_registry(paths["registry"], gt.registry)
    io.write_metadata(paths["metadata"], gt.metadata)
    io.write_lut(result.lut, paths["lut"])
    io.write_calibration(result.calib, paths["calib"])
    io.write_installations(paths["installations"], result.installations)
    io.write_installations(paths["kept"], result.kept)
    other = result.unfiltered if result.report.filtered else None
    io.write_report(result.report, paths["report"], paths["summary"], unfiltered=other)
    io.dump_json(gt.cfg.to_dict(), paths["config"])
    return paths

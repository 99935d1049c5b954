"""Readers and writers for every file the pipeline consumes or emits.

Geometry is GeoJSON (RFC 7946, WGS84). Registry and metadata are UTF-8
CSV with a header row. LUT, calibration and report summaries are JSON.
Floats are written with ``repr`` precision so every file round-trips.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

from .audit import OVERALL, DtaReport
from .characteristics import CalibrationModel
from .errors import EmptyFile, GeometryError, InputError, MissingProperty, ParseError
from .geometry import Point, Polygon, validate
from .records import CityBoundary, Installation, MetadataRecord, Reject, RegistryEntry
from .tilt_lut import TiltLut, grid_raster

log = logging.getLogger(__name__)

KINDS = ("detections", "buildings", "cities", "installations")
REGISTRY_COLUMNS = ("city_code", "dept_code", "count", "capacity_kwp")
METADATA_COLUMNS = ("id", "lat", "lon", "tilt_deg", "azimuth_deg", "surface_m2", "capacity_kwp")
REPORT_COLUMNS = (
    "dept", "mape_pct", "median_ape_pct", "mean_ratio", "mean_aipe_pct",
    "k", "k_hat", "c_kwp", "c_hat_kwp", "filtered",
)


class Feature(NamedTuple):
    index: int  # position of the source feature in the collection
    id: str
    properties: dict
    polygon: Polygon


# -- JSON / GeoJSON ----------------------------------------------------------


def load_json(path) -> object:
    raw = Path(path).read_bytes()
    if not raw.strip():
        raise EmptyFile(f"{path}: file is empty")
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise ParseError(f"{path}: invalid UTF-8 at byte {e.start}", byte_offset=e.start) from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        offset = len(text[: e.pos].encode("utf-8"))
        raise ParseError(f"{path}: malformed JSON at byte {offset}: {e.msg}", byte_offset=offset) from None


def dump_json(obj, path) -> None:
    """Deterministic JSON: sorted keys, fixed indentation, trailing newline."""
    text = json.dumps(obj, indent=2, sort_keys=True, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def _polygon_parts(geom: dict, fi: int) -> list[list]:
    gtype = geom.get("type")
    coords = geom.get("coordinates")
    if gtype == "Polygon":
        return [coords]
    if gtype == "MultiPolygon":
        return list(coords)
    raise ParseError(f"feature {fi}: unsupported geometry type {gtype!r}")


def _parse_polygon(rings, fi: int) -> Polygon:
    if not isinstance(rings, list) or not rings:
        raise GeometryError(f"feature {fi}: polygon has no rings", feature_index=fi)
    try:
        p = Polygon.from_coords(rings[0], rings[1:])
        validate(p)
    except (TypeError, IndexError, ValueError) as e:
        raise GeometryError(f"feature {fi}: bad coordinates ({e})", feature_index=fi) from None
    except InputError as e:
        raise GeometryError(f"feature {fi}: {e}", feature_index=fi) from None
    return p


def _feature_id(feat: dict, props: dict, fi: int, kind: str) -> str:
    for key in ("id", "building_id") if kind == "buildings" else ("id",):
        v = props.get(key)
        if v is not None:
            return str(v)
    if feat.get("id") is not None:
        return str(feat["id"])
    return f"{kind[:-1]}-{fi}"


def iter_features(path) -> list[dict]:
    doc = load_json(path)
    if not isinstance(doc, dict) or doc.get("type") != "FeatureCollection":
        raise ParseError(f"{path}: not a GeoJSON FeatureCollection")
    feats = doc.get("features")
    if not isinstance(feats, list):
        raise ParseError(f"{path}: 'features' must be an array")
    for fi, f in enumerate(feats):
        if not isinstance(f, dict) or f.get("type") != "Feature" or not isinstance(f.get("geometry"), dict):
            raise ParseError(f"{path}: feature {fi} is not a Feature with a geometry")
    return feats


def read_polygons(path, kind: str, rejects: Optional[list] = None) -> list[Feature]:
    """One record per polygon part, MultiPolygons exploded.

    Invalid rings raise ``GeometryError`` naming the feature, unless a
    ``rejects`` list is given, in which case the part is recorded there.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown layer kind {kind!r}")
    out = []
    for fi, feat in enumerate(iter_features(path)):
        props = dict(feat.get("properties") or {})
        if kind == "cities":
            for key in ("city_code", "dept_code"):
                if props.get(key) in (None, ""):
                    raise MissingProperty(f"{path}: feature {fi} lacks '{key}'")
        fid = _feature_id(feat, props, fi, kind)
        parts = _polygon_parts(feat["geometry"], fi)
        for pi, rings in enumerate(parts):
            try:
                poly = _parse_polygon(rings, fi)
            except GeometryError as e:
                if rejects is None:
                    raise
                rejects.append(Reject(str(path), fi, str(e)))
                continue
            pid = fid if len(parts) == 1 else f"{fid}-{pi}"
            out.append(Feature(fi, pid, props, poly))
    return out


def read_cities(path) -> list[CityBoundary]:
    parts: dict[str, list] = {}
    depts: dict[str, str] = {}
    source: dict[str, int] = {}
    for f in read_polygons(path, "cities"):
        code, dept = str(f.properties["city_code"]), str(f.properties["dept_code"])
        if code in source and source[code] != f.index:
            raise ParseError(f"{path}: city_code {code} appears in features {source[code]} and {f.index}")
        source[code] = f.index
        depts[code] = dept
        parts.setdefault(code, []).append(f.polygon)
    return [CityBoundary(c, depts[c], tuple(parts[c])) for c in sorted(parts)]


def _geometry(parts: Sequence[Polygon]) -> dict:
    if len(parts) == 1:
        return {"type": "Polygon", "coordinates": parts[0].to_geojson_coords()}
    return {"type": "MultiPolygon", "coordinates": [p.to_geojson_coords() for p in parts]}


def write_features(path, features: Sequence[tuple[dict, Sequence[Polygon]]]) -> None:
    doc = {
        "type": "FeatureCollection",
        "features": [{"type": "Feature", "properties": props, "geometry": _geometry(parts)} for props, parts in features],
    }
    dump_json(doc, path)


def installation_properties(inst: Installation) -> dict:
    return {
        "id": inst.id,
        "lon": inst.location.lon,
        "lat": inst.location.lat,
        "projected_area_m2": inst.projected_area_m2,
        "tilt_deg": inst.tilt_deg,
        "surface_m2": inst.surface_m2,
        "capacity_kwp": inst.capacity_kwp,
        "building_id": inst.building_id,
        "city_code": inst.city_code,
    }


def write_installations(path, installations: Sequence[Installation]) -> None:
    write_features(path, [(installation_properties(i), i.parts) for i in installations])


def read_installations(path) -> list[Installation]:
    """Installations keep their MultiPolygon parts together."""
    out = []
    for fi, feat in enumerate(iter_features(path)):
        p = feat.get("properties") or {}
        try:
            parts = tuple(_parse_polygon(r, fi) for r in _polygon_parts(feat["geometry"], fi))
            out.append(
                Installation(
                    id=str(p["id"]),
                    location=Point(float(p["lon"]), float(p["lat"])),
                    projected_area_m2=float(p["projected_area_m2"]),
                    tilt_deg=float(p["tilt_deg"]),
                    surface_m2=float(p["surface_m2"]),
                    capacity_kwp=float(p["capacity_kwp"]),
                    building_id=None if p.get("building_id") is None else str(p["building_id"]),
                    city_code=None if p.get("city_code") is None else str(p["city_code"]),
                    parts=parts,
                )
            )
        except KeyError as e:
            raise MissingProperty(f"{path}: feature {fi} lacks {e.args[0]!r}") from None
    return out


# -- CSV ---------------------------------------------------------------------


def _read_csv(path, required: Sequence[str]) -> list[tuple[int, dict]]:
    text = Path(path).read_text(encoding="utf-8-sig")
    if not text.strip():
        raise EmptyFile(f"{path}: file is empty")
    reader = csv.DictReader(text.splitlines())
    header = reader.fieldnames or []
    missing = [c for c in required if c not in header]
    if missing:
        raise ParseError(f"{path}: missing column(s) {', '.join(missing)}")
    return [(i, row) for i, row in enumerate(reader, start=2)]


def _finite(v: str) -> float:
    x = float(v)
    if not math.isfinite(x):
        raise ValueError(f"non-finite value {v!r}")
    return x


def _route(rejects, source, line, reason):
    if rejects is None:
        log.warning("%s line %d rejected: %s", source, line, reason)
    else:
        rejects.append(Reject(str(source), line, reason))


def read_registry(path, rejects: Optional[list] = None) -> list[RegistryEntry]:
    out, seen = [], set()
    for line, row in _read_csv(path, REGISTRY_COLUMNS):
        try:
            code = row["city_code"].strip()
            if not code:
                raise ValueError("empty city_code")
            count_f = _finite(row["count"])
            if count_f != int(count_f) or count_f < 0:
                raise ValueError(f"count must be a non-negative integer, got {row['count']!r}")
            cap = _finite(row["capacity_kwp"])
            if cap < 0:
                raise ValueError(f"negative capacity {cap}")
            if code in seen:
                raise ValueError(f"duplicate city_code {code}")
        except (ValueError, TypeError, AttributeError) as e:
            _route(rejects, path, line, str(e))
            continue
        seen.add(code)
        out.append(RegistryEntry(code, row["dept_code"].strip(), int(count_f), cap))
    return out


def write_registry(path, entries: Sequence[RegistryEntry]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REGISTRY_COLUMNS)
        for e in entries:
            w.writerow([e.city_code, e.dept_code, e.count, repr(float(e.capacity_kwp))])


def read_metadata(path, rejects: Optional[list] = None) -> list[MetadataRecord]:
    out = []
    for line, row in _read_csv(path, METADATA_COLUMNS):
        try:
            rid = row["id"].strip()
            lat, lon = _finite(row["lat"]), _finite(row["lon"])
            tilt = _finite(row["tilt_deg"])
            surface = _finite(row["surface_m2"])
            cap = _finite(row["capacity_kwp"])
            az = row.get("azimuth_deg", "")
            azimuth = _finite(az) if az not in (None, "") else None
            if not (-90 <= lat <= 90 and -180 <= lon <= 180):
                raise ValueError(f"location ({lon}, {lat}) out of range")
            if not 0 <= tilt < 90:
                raise ValueError(f"tilt {tilt} outside [0, 90)")
            if surface <= 0 or cap <= 0:
                raise ValueError("surface and capacity must be positive")
        except (ValueError, TypeError, AttributeError) as e:
            _route(rejects, path, line, str(e))
            continue
        out.append(MetadataRecord(rid, lat, lon, tilt, surface, cap, azimuth))
    return out


def write_metadata(path, records: Sequence[MetadataRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METADATA_COLUMNS)
        for r in records:
            w.writerow([
                r.id, repr(r.lat), repr(r.lon), repr(r.tilt_deg),
                "" if r.azimuth_deg is None else repr(r.azimuth_deg),
                repr(r.surface_m2), repr(r.capacity_kwp),
            ])


# -- LUT, calibration, reports ------------------------------------------------


def write_lut(lut: TiltLut, path) -> None:
    dump_json(lut.to_dict(), path)


def read_lut(path) -> TiltLut:
    d = load_json(path)
    try:
        return TiltLut.from_dict(d)
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"{path}: not a tilt LUT ({e})") from None


def write_calibration(model: CalibrationModel, path) -> None:
    dump_json(model.to_dict(), path)


def read_calibration(path) -> CalibrationModel:
    d = load_json(path)
    try:
        return CalibrationModel.from_dict(d)
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"{path}: not a calibration model ({e})") from None


def write_lut_grid(lut: TiltLut, cluster: int, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in grid_raster(lut, cluster):
            w.writerow(["" if v is None else repr(v) for v in row])


def _num(v) -> str:
    return "" if v is None else repr(float(v))


def report_rows(report: DtaReport) -> list[list[str]]:
    flag = "true" if report.filtered else "false"
    rows = []
    for dept, s in [*sorted(report.per_dept.items()), (OVERALL, report.overall)]:
        rows.append([
            dept, _num(s.mape_pct), _num(s.median_ape_pct), _num(s.mean_ratio), _num(s.mean_aipe_pct),
            str(s.k), str(s.k_hat), _num(s.c_kwp), _num(s.c_hat_kwp), flag,
        ])
    return rows


def write_report(report: Optional[DtaReport], csv_path, json_path, unfiltered: Optional[DtaReport] = None) -> None:
    """Per-departement CSV plus JSON summary.

    ``unfiltered`` adds the without-building-filter variant: its rows follow
    the filtered ones in the CSV and it sits under ``"unfiltered"`` in the JSON.
    A ``None`` report writes a header-only CSV and an empty summary.
    """
    try:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            for r in (report, unfiltered):
                if r is not None:
                    w.writerows(report_rows(r))
        if report is None:
            summary = {"cities": [], "excluded_cities": [], "per_dept": {}}
        else:
            summary = report.to_dict()
            if unfiltered is not None:
                summary["unfiltered"] = unfiltered.to_dict()
        dump_json(summary, json_path)
    except OSError as e:
        raise IOError(f"cannot write report: {e}") from e


def read_report(json_path) -> tuple[DtaReport, Optional[DtaReport]]:
    d = load_json(json_path)
    try:
        main = DtaReport.from_dict(d)
        alt = DtaReport.from_dict(d["unfiltered"]) if d.get("unfiltered") else None
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"{json_path}: not a DTA report summary ({e})") from None
    return main, alt


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p

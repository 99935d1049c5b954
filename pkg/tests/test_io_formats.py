import csv
import json

import numpy as np
import pytest

from builders import box, inst, rect
from pvregistry.audit import CityComparison, build_report, compare_city
from pvregistry.characteristics import CalibrationModel
from pvregistry.errors import EmptyFile, GeometryError, MissingProperty, ParseError
from pvregistry.io_formats import (
    REPORT_COLUMNS,
    file_digest,
    read_calibration,
    read_cities,
    read_installations,
    read_lut,
    read_metadata,
    read_polygons,
    read_registry,
    read_report,
    write_calibration,
    write_features,
    write_installations,
    write_lut,
    write_lut_grid,
    write_metadata,
    write_registry,
    write_report,
)
from pvregistry.records import MetadataRecord, RegistryEntry
from pvregistry.tilt_lut import TiltLut


def fc(*features):
    return {"type": "FeatureCollection", "features": list(features)}


def feature(geometry, **props):
    return {"type": "Feature", "properties": props, "geometry": geometry}


SQUARE = [[[2.0, 45.0], [2.001, 45.0], [2.001, 45.001], [2.0, 45.001], [2.0, 45.0]]]


def write(tmp_path, name, obj):
    p = tmp_path / name
    p.write_text(obj if isinstance(obj, str) else json.dumps(obj))
    return p


class TestGeoJson:
    def test_single_polygon(self, tmp_path):
        p = write(tmp_path, "d.geojson", fc(feature({"type": "Polygon", "coordinates": SQUARE}, id="x")))
        (f,) = read_polygons(p, "detections")
        assert f.id == "x" and f.index == 0 and len(f.polygon.exterior) == 4

    def test_truncated_file_reports_offset(self, tmp_path):
        text = '{"type":"Feature"'
        p = write(tmp_path, "bad.geojson", text)
        with pytest.raises(ParseError) as e:
            read_polygons(p, "detections")
        assert e.value.byte_offset == len(text)

    def test_empty_file(self, tmp_path):
        with pytest.raises(EmptyFile):
            read_polygons(write(tmp_path, "e.geojson", ""), "detections")

    def test_multipolygon_explodes(self, tmp_path):
        parts = [[[[x, 45.0], [x + 0.001, 45.0], [x + 0.001, 45.001], [x, 45.001]]] for x in (2.0, 2.01, 2.02)]
        p = write(tmp_path, "m.geojson", fc(feature({"type": "MultiPolygon", "coordinates": parts}, id="b")))
        got = read_polygons(p, "buildings")
        assert [f.id for f in got] == ["b-0", "b-1", "b-2"]
        assert {f.index for f in got} == {0}

    def test_city_without_code(self, tmp_path):
        p = write(tmp_path, "c.geojson", fc(feature({"type": "Polygon", "coordinates": SQUARE}, dept_code="29")))
        with pytest.raises(MissingProperty):
            read_cities(p)

    def test_cities_group_parts(self, tmp_path):
        mp = {"type": "MultiPolygon", "coordinates": [SQUARE, [[[3.0, 45.0], [3.1, 45.0], [3.1, 45.1]]]]}
        p = write(tmp_path, "c.geojson", fc(feature(mp, city_code="29019", dept_code="29")))
        (c,) = read_cities(p)
        assert c.city_code == "29019" and len(c.parts) == 2

    def test_bad_ring_names_feature(self, tmp_path):
        bowtie = [[[0, 0], [1, 1], [1, 0], [0, 2]]]
        p = write(tmp_path, "b.geojson", fc(
            feature({"type": "Polygon", "coordinates": SQUARE}),
            feature({"type": "Polygon", "coordinates": bowtie}),
        ))
        with pytest.raises(GeometryError) as e:
            read_polygons(p, "detections")
        assert e.value.feature_index == 1
        rejects = []
        got = read_polygons(p, "detections", rejects=rejects)
        assert len(got) + len(rejects) == 2

    def test_ingest_count_invariant(self, tmp_path):
        rng = np.random.default_rng(0)
        feats, n_parts = [], 0
        for i in range(200):
            k = int(rng.integers(1, 4))
            polys = []
            for j in range(k):
                x, y = float(rng.uniform(0, 5)), float(rng.uniform(40, 45))
                if rng.random() < 0.15:
                    polys.append([[[x, y], [x + 0.01, y], [x + 0.02, y]]])  # collinear
                else:
                    polys.append([[[x, y], [x + 0.01, y], [x + 0.01, y + 0.01], [x, y + 0.01]]])
            n_parts += k
            geom = {"type": "Polygon", "coordinates": polys[0]} if k == 1 else {"type": "MultiPolygon", "coordinates": polys}
            feats.append(feature(geom, id=f"f{i}"))
        p = write(tmp_path, "many.geojson", fc(*feats))
        rejects = []
        got = read_polygons(p, "detections", rejects=rejects)
        assert len(got) + len(rejects) == n_parts and rejects

    def test_installations_round_trip(self, tmp_path):
        items = [
            inst("a", building_id="b1", city_code="29019"),
            inst("b", parts=(rect(2.1, 45.0, 3, 3), rect(2.1001, 45.0, 2, 2))),
        ]
        p = tmp_path / "i.geojson"
        write_installations(p, items)
        back = read_installations(p)
        assert back == items
        assert [len(i.parts) for i in back] == [1, 2]
        assert back[1].parts[0].exterior == items[1].parts[0].exterior

    def test_write_features_deterministic(self, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        for path in (a, b):
            write_features(path, [({"id": "x", "z": 1}, (box(0, 0, 1, 1),))])
        assert a.read_bytes() == b.read_bytes()


class TestCsv:
    def test_registry_row(self, tmp_path):
        p = write(tmp_path, "r.csv", "city_code,dept_code,count,capacity_kwp\n29019,29,12,48.5\n")
        assert read_registry(p) == [RegistryEntry("29019", "29", 12, 48.5)]

    def test_registry_missing_column(self, tmp_path):
        with pytest.raises(ParseError):
            read_registry(write(tmp_path, "r.csv", "city_code,count\n1,2\n"))

    def test_registry_bad_rows_rejected(self, tmp_path):
        p = write(tmp_path, "r.csv", "city_code,dept_code,count,capacity_kwp\na,1,2.5,1\nb,1,-1,1\nc,1,3,nan\nd,1,3,9\nd,1,3,9\n")
        rejects = []
        got = read_registry(p, rejects)
        assert [e.city_code for e in got] == ["d"] and len(rejects) == 4

    def test_metadata_tilt_out_of_range(self, tmp_path):
        p = write(tmp_path, "m.csv", "id,lat,lon,tilt_deg,azimuth_deg,surface_m2,capacity_kwp\na,45,2,95,,10,1.7\nb,45,2,30,180,10,1.7\n")
        rejects = []
        got = read_metadata(p, rejects)
        assert [r.id for r in got] == ["b"] and got[0].azimuth_deg == 180.0
        assert len(rejects) == 1 and "tilt" in rejects[0].reason and rejects[0].index == 2

    def test_metadata_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        recs = [
            MetadataRecord(f"m{i}", float(rng.uniform(41, 51)), float(rng.uniform(-5, 8)), float(rng.uniform(0, 89.9)),
                           float(rng.uniform(1, 200)), float(rng.uniform(0.1, 40)), None if i % 3 else float(rng.uniform(0, 360)))
            for i in range(1000)
        ]
        p = tmp_path / "m.csv"
        write_metadata(p, recs)
        assert read_metadata(p) == recs

    def test_registry_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        entries = [RegistryEntry(f"{i:05d}", f"{i % 7:02d}", int(rng.integers(0, 3000)), float(rng.uniform(0, 9e4))) for i in range(1000)]
        p = tmp_path / "r.csv"
        write_registry(p, entries)
        assert read_registry(p) == entries

    def test_empty_csv(self, tmp_path):
        with pytest.raises(EmptyFile):
            read_metadata(write(tmp_path, "m.csv", "\n"))


def reference_row_report():
    k, c, kh, ch = 1485, 6473.8, 1362, 5334.02
    return build_report([CityComparison("test", "test", k, kh, c, ch, *compare_city(k, c, kh, ch))])


class TestReport:
    def test_reference_row_csv(self, tmp_path):
        write_report(reference_row_report(), tmp_path / "r.csv", tmp_path / "r.json")
        rows = list(csv.DictReader((tmp_path / "r.csv").open()))
        row = rows[0]
        assert list(row) == list(REPORT_COLUMNS)
        shown = [
            row["dept"], f"{float(row['mape_pct']):.2f}", f"{float(row['mean_ratio']):.2f}",
            row["k"], row["k_hat"], f"{float(row['c_kwp']):g}", f"{float(row['c_hat_kwp']):.2f}", row["filtered"],
        ]
        assert shown == ["test", "17.61", "0.92", "1485", "1362", "6473.8", "5334.02", "true"]
        assert [r["dept"] for r in rows] == ["test", "overall"]

    def test_full_precision(self, tmp_path):
        r = reference_row_report()
        write_report(r, tmp_path / "r.csv", tmp_path / "r.json")
        row = next(csv.DictReader((tmp_path / "r.csv").open()))
        assert float(row["mape_pct"]) == r.overall.mape_pct

    def test_empty_report(self, tmp_path):
        write_report(None, tmp_path / "r.csv", tmp_path / "r.json")
        assert (tmp_path / "r.csv").read_text().strip() == ",".join(REPORT_COLUMNS)
        assert json.loads((tmp_path / "r.json").read_text())["cities"] == []

    def test_json_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(5)
        cities = []
        for i in range(40):
            k, kh = int(rng.integers(1, 90)), int(rng.integers(0, 90))
            c, ch = float(rng.uniform(1, 500)), float(rng.uniform(0, 500)) if kh else 0.0
            cities.append(CityComparison(f"c{i}", f"d{i % 4}", k, kh, c, ch, *compare_city(k, c, kh, ch)))
        filt = build_report(cities, filter_stats={"input_count": 9}, n_outside=2)
        unf = build_report(cities[:20], filtered=False)
        write_report(filt, tmp_path / "r.csv", tmp_path / "r.json", unfiltered=unf)
        back, back_unf = read_report(tmp_path / "r.json")
        assert back == filt and back_unf == unf
        flags = [r["filtered"] for r in csv.DictReader((tmp_path / "r.csv").open())]
        assert flags == ["true"] * 5 + ["false"] * 5


class TestModels:
    def test_lut_round_trip(self, tmp_path):
        lut = TiltLut(0.0, 40.0, 0.5, 4, 3, (10.0, 20.0, 40.0), {(0, 1, 2): (31.25, 3), (3, 0, 0): (12.0, 1)}, (31.25, 20.0, 20.0, 12.0))
        write_lut(lut, tmp_path / "l.json")
        assert read_lut(tmp_path / "l.json") == lut
        write_lut_grid(lut, 0, tmp_path / "g.csv")
        grid = (tmp_path / "g.csv").read_text().splitlines()
        assert grid[0] == ",31.25,," and len(grid) == 3

    def test_calibration_round_trip(self, tmp_path):
        m = CalibrationModel(0.16987654321, 321, 0.4)
        write_calibration(m, tmp_path / "c.json")
        assert read_calibration(tmp_path / "c.json") == m

    def test_wrong_json_shape(self, tmp_path):
        with pytest.raises(ParseError):
            read_lut(write(tmp_path, "x.json", {"a": 1}))

    def test_digest_stable(self, tmp_path):
        p = write(tmp_path, "x.txt", "abc")
        assert file_digest(p) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"

"""Command-line entry point: ``pvregistry <subcommand>``.

Exit codes: 0 success, 1 usage error, 2 input parse/validation error,
3 internal invariant violation. Log level comes from ``PVREGISTRY_LOG``
(error, warn, info, debug); logs go to stderr, data only to files.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from . import io_formats as io
from .audit import CityLayer, format_table, run_audit
from .characteristics import extract, fit_efficiency
from .config import load_table
from .errors import InputError, InvalidConfig, PVRegistryError
from .postprocess import MAX_CAPACITY_KWP, MIN_AREA_M2, BuildingLayer, run_postprocess
from .tilt_lut import DEFAULT_CELL_SIZE_DEG, N_CLUSTERS, build_lut

log = logging.getLogger("pvregistry")

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


class _Fmt(argparse.ArgumentDefaultsHelpFormatter):
    def _get_help_string(self, action):
        text = action.help or ""
        if action.default is None or isinstance(action.default, bool) or "default" in text:
            return text
        return super()._get_help_string(action)


def _floats(text: str, n: int, name: str) -> tuple:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"{name} must be {n} comma-separated numbers") from None
    if len(vals) != n:
        raise argparse.ArgumentTypeError(f"{name} must be {n} comma-separated numbers")
    return vals


def _bbox(text):
    return _floats(text, 4, "bbox")


def _bounds(text):
    return _floats(text, N_CLUSTERS - 1, "cluster bounds")


def _timestamp() -> str:
    # SOURCE_DATE_EPOCH pins the clock for reproducible reruns
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    now = datetime.fromtimestamp(int(epoch), timezone.utc) if epoch else datetime.now(timezone.utc)
    return now.isoformat(timespec="seconds")


def write_manifest(path, command: str, params: dict, inputs: dict) -> None:
    manifest = {
        "command": command,
        "parameters": params,
        "inputs": {k: {"path": str(v), "sha256": io.file_digest(v)} for k, v in sorted(inputs.items()) if v},
        "version": __version__,
        "timestamp": _timestamp(),
    }
    io.dump_json(manifest, path)


def _manifest_path(out) -> Path:
    out = Path(out)
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


def _params(args) -> dict:
    skip = {"func", "json_errors"}
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(vars(args).items()) if k not in skip}


# -- subcommands ---------------------------------------------------------------


def cmd_build_lut(args):
    rejects = []
    records = io.read_metadata(args.metadata, rejects)
    lut = build_lut(records, args.cell_size_deg, bbox=args.bbox, cluster_bounds=args.cluster_bounds, rejects=rejects)
    io.write_lut(lut, args.out)
    for r in rejects:
        log.warning("rejected %s:%d: %s", r.source, r.index, r.reason)
    log.info("LUT with %d populated cells from %d records", len(lut.cells), len(records))
    write_manifest(_manifest_path(args.out), "build-lut", _params(args), {"metadata": args.metadata})


def cmd_calibrate(args):
    records = io.read_metadata(args.metadata, [])
    model = fit_efficiency(records)
    io.write_calibration(model, args.out)
    log.info("efficiency %.6f kWp/m2 over %d records", model.efficiency_kwp_per_m2, model.n_samples)
    write_manifest(_manifest_path(args.out), "calibrate", _params(args), {"metadata": args.metadata})


def _extract(detections_path, lut_path, calib_path):
    lut, calib = io.read_lut(lut_path), io.read_calibration(calib_path)
    return [extract(f.polygon, lut, calib, id=f.id) for f in io.read_polygons(detections_path, "detections")], lut, calib


def cmd_extract(args):
    installations, _, _ = _extract(args.detections, args.lut, args.calib)
    io.write_installations(args.out, installations)
    write_manifest(
        _manifest_path(args.out), "extract", _params(args),
        {"detections": args.detections, "lut": args.lut, "calib": args.calib},
    )


def _buildings(path) -> BuildingLayer:
    return BuildingLayer([(f.id, f.polygon) for f in io.read_polygons(path, "buildings")])


def cmd_postprocess(args):
    installations = io.read_installations(args.installations)
    lut = calib = buildings = None
    if args.building_filter:
        missing = [n for n in ("buildings", "lut", "calib") if getattr(args, n) is None]
        if missing:
            raise UsageError(f"the building filter needs --{' --'.join(missing)} (or pass --no-building-filter)")
        buildings = _buildings(args.buildings)
        lut, calib = io.read_lut(args.lut), io.read_calibration(args.calib)
    kept, stats = run_postprocess(
        installations, buildings, lut, calib, args.building_filter, args.min_area, args.max_capacity
    )
    if not stats.balanced():
        raise PVRegistryError(f"filter statistics do not balance: {stats}")
    io.write_installations(args.out, kept)
    if args.stats:
        io.dump_json(stats.to_dict(), args.stats)
    write_manifest(
        _manifest_path(args.out), "postprocess", _params(args),
        {"installations": args.installations, "buildings": args.buildings, "lut": args.lut, "calib": args.calib},
    )


def _audit(installations_path, cities, registry, filtered, stats_path=None):
    stats = io.load_json(stats_path) if stats_path else None
    return run_audit(io.read_installations(installations_path), cities, registry, filtered, stats)


def _emit_report(report, unfiltered, csv_path, summary_path, table_path=None, figures=None):
    io.write_report(report, csv_path, summary_path, unfiltered=unfiltered)
    if table_path:
        Path(table_path).write_text(format_table(report, unfiltered), encoding="utf-8")
    if figures:
        from .plots import render_report_figures

        render_report_figures(report, figures, unfiltered)


def cmd_audit(args):
    cities = CityLayer(io.read_cities(args.cities))
    registry = io.read_registry(args.registry, [])
    report = _audit(args.installations, cities, registry, not args.unfiltered_input, args.stats)
    unfiltered = None
    if args.unfiltered_installations:
        unfiltered = _audit(args.unfiltered_installations, cities, registry, False)
    _emit_report(report, unfiltered, args.out, args.summary, args.table, args.figures)
    write_manifest(
        _manifest_path(args.out), "audit", _params(args),
        {
            "installations": args.installations,
            "unfiltered_installations": args.unfiltered_installations,
            "cities": args.cities,
            "registry": args.registry,
        },
    )


def cmd_simulate(args):
    from .simulate import SimConfig, load_config, run_end_to_end, write_dataset

    cfg = load_config(args.config) if args.config else SimConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    result = run_end_to_end(cfg)
    paths = write_dataset(result, args.out)
    if args.figures:
        from .plots import lut_figure, render_report_figures

        other = result.unfiltered if result.report.filtered else None
        render_report_figures(result.report, args.out, other)
        lut_figure(result.lut, Path(args.out) / "lut.png")
    o = result.report.overall
    log.info("simulated %d installations: MAPE %.2f%%, mean ratio %.3f", len(result.truth.installations), o.mape_pct, o.mean_ratio)
    params = {**_params(args), "resolved_config": cfg.to_dict()}
    write_manifest(Path(args.out) / "manifest.json", "simulate", params, {"config": args.config})
    return paths


def _resolve_pipeline(args) -> dict:
    table = load_table(args.config)
    inputs = table.get("inputs", {})
    p = table.get("params", {})
    outputs = table.get("outputs", {})
    resolved = {
        "detections": inputs.get("detections"),
        "buildings": inputs.get("buildings"),
        "cities": inputs.get("cities"),
        "registry": inputs.get("registry"),
        "lut": inputs.get("lut"),
        "calib": inputs.get("calib"),
        "min_area": float(p.get("min_area", MIN_AREA_M2)),
        "max_capacity": float(p.get("max_capacity", MAX_CAPACITY_KWP)),
        "building_filter": bool(p.get("building_filter", True)),
        "compare_unfiltered": bool(p.get("compare_unfiltered", True)),
        "out_dir": outputs.get("dir", "out"),
        "figures": bool(outputs.get("figures", False)),
    }
    # flags > config file > defaults
    for key in ("min_area", "max_capacity", "out_dir"):
        if getattr(args, key, None) is not None:
            resolved[key] = getattr(args, key)
    if args.no_building_filter:
        resolved["building_filter"] = False
    if args.figures:
        resolved["figures"] = True
    missing = [k for k in ("detections", "cities", "registry", "lut", "calib") if not resolved[k]]
    if resolved["building_filter"] and not resolved["buildings"]:
        missing.append("buildings")
    if missing:
        raise InvalidConfig(f"{args.config}: missing inputs {', '.join(missing)}")
    return resolved


def cmd_run(args):
    cfg = _resolve_pipeline(args)
    out = io.ensure_dir(cfg["out_dir"])
    installations, lut, calib = _extract(cfg["detections"], cfg["lut"], cfg["calib"])
    io.write_installations(out / "installations.geojson", installations)
    cities = CityLayer(io.read_cities(cfg["cities"]))
    registry = io.read_registry(cfg["registry"], [])

    variants = {}
    flags = [cfg["building_filter"]]
    if cfg["building_filter"] and cfg["compare_unfiltered"]:
        flags.append(False)
    buildings = _buildings(cfg["buildings"]) if cfg["building_filter"] else None
    for flag in flags:
        kept, stats = run_postprocess(installations, buildings, lut, calib, flag, cfg["min_area"], cfg["max_capacity"])
        if not stats.balanced():
            raise PVRegistryError(f"filter statistics do not balance: {stats}")
        tag = "kept" if flag else "kept_unfiltered"
        io.write_installations(out / f"{tag}.geojson", kept)
        variants[flag] = run_audit(kept, cities, registry, flag, stats.to_dict())
    report = variants[flags[0]]
    unfiltered = variants.get(False) if len(flags) == 2 else None
    io.dump_json(report.filter_stats, out / "stats.json")
    _emit_report(
        report, unfiltered, out / "report.csv", out / "summary.json", out / "table.txt",
        out if cfg["figures"] else None,
    )
    write_manifest(
        out / "manifest.json", "run", {**_params(args), "resolved": cfg},
        {k: cfg[k] for k in ("detections", "buildings", "cities", "registry", "lut", "calib")},
    )


def cmd_lut_export_grid(args):
    lut = io.read_lut(args.lut)
    out = io.ensure_dir(args.out_dir)
    for k in range(N_CLUSTERS):
        io.write_lut_grid(lut, k, out / f"lut_cluster_{k}.csv")
    if args.figure:
        from .plots import lut_figure

        lut_figure(lut, out / "lut.png")


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pvregistry", description="Distributed PV registry and downstream-task accuracy audit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--json-errors", action="store_true", help="emit errors as JSON on stderr")
    p.add_argument("--threads", type=int, default=1, help="maximum worker count (default: 1)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    fmt = _Fmt

    s = sub.add_parser("build-lut", help="build the tilt look-up table", formatter_class=fmt)
    s.add_argument("--metadata", required=True)
    s.add_argument("--cell-size-deg", type=float, default=DEFAULT_CELL_SIZE_DEG, help="grid square size in degrees")
    s.add_argument("--bbox", type=_bbox, default=None, help="lon1,lat1,lon2,lat2 (default: extent of the metadata)")
    s.add_argument("--cluster-bounds", type=_bounds, default=None,
                   help=f"{N_CLUSTERS - 1} projected-surface thresholds in m2 for the {N_CLUSTERS} clusters (default: quartiles)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_lut)

    s = sub.add_parser("calibrate", help="fit panel efficiency (kWp per m2)", formatter_class=fmt)
    s.add_argument("--metadata", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("extract", help="detection polygons -> installations", formatter_class=fmt)
    s.add_argument("--detections", required=True)
    s.add_argument("--lut", required=True)
    s.add_argument("--calib", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("postprocess", help="building filter, rooftop merge, thresholds", formatter_class=fmt)
    s.add_argument("--installations", required=True)
    s.add_argument("--buildings")
    s.add_argument("--lut", help="needed by the rooftop merge")
    s.add_argument("--calib", help="needed by the rooftop merge")
    s.add_argument("--no-building-filter", dest="building_filter", action="store_false",
                   help="thresholds only (the unfiltered comparison variant)")
    s.add_argument("--min-area", type=float, default=MIN_AREA_M2, help="minimum projected area, m2")
    s.add_argument("--max-capacity", type=float, default=MAX_CAPACITY_KWP, help="maximum capacity, kWp")
    s.add_argument("--out", required=True)
    s.add_argument("--stats")
    s.set_defaults(func=cmd_postprocess)

    s = sub.add_parser("audit", help="city-wise comparison with the registry", formatter_class=fmt)
    s.add_argument("--installations", required=True)
    s.add_argument("--unfiltered-installations", help="second input audited as the without-filter variant")
    s.add_argument("--unfiltered-input", action="store_true", help="mark --installations itself as unfiltered")
    s.add_argument("--stats", help="filter statistics JSON to embed in the summary")
    s.add_argument("--cities", required=True)
    s.add_argument("--registry", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--summary", required=True)
    s.add_argument("--table", help="also write a plain-text table")
    s.add_argument("--figures", help="directory for PNG figures")
    s.set_defaults(func=cmd_audit)

    s = sub.add_parser("simulate", help="synthetic dataset and closed-loop report", formatter_class=fmt)
    s.add_argument("--config", help="SimConfig TOML or JSON")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--figures", action="store_true")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("run", help="extract -> postprocess -> audit from a pipeline TOML", formatter_class=fmt)
    s.add_argument("--config", required=True)
    s.add_argument("--out-dir")
    s.add_argument("--min-area", type=float)
    s.add_argument("--max-capacity", type=float)
    s.add_argument("--no-building-filter", action="store_true")
    s.add_argument("--figures", action="store_true")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("lut", help="LUT utilities")
    lsub = s.add_subparsers(dest="lut_command", required=True, parser_class=_Parser)
    e = lsub.add_parser("export-grid", help="one CSV raster per surface cluster", formatter_class=fmt)
    e.add_argument("--lut", required=True)
    e.add_argument("--out-dir", required=True)
    e.add_argument("--figure", action="store_true", help="also render lut.png")
    e.set_defaults(func=cmd_lut_export_grid)
    return p


def _fail(args_json: bool, code: int, kind: str, message: str) -> int:
    if args_json:
        sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}) + "\n")
    else:
        sys.stderr.write(f"pvregistry: {kind}: {message}\n")
    return code


def main(argv=None) -> int:
    level = LOG_LEVELS.get(os.environ.get("PVREGISTRY_LOG", "warn").lower(), logging.WARNING)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    argv = sys.argv[1:] if argv is None else argv
    json_errors = "--json-errors" in argv
    try:
        args = build_parser().parse_args(argv)
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        args.func(args)
    except UsageError as e:
        return _fail(json_errors, 1, "usage", str(e))
    except (InputError, FileNotFoundError, IsADirectoryError) as e:
        return _fail(json_errors, 2, type(e).__name__, str(e))
    except PVRegistryError as e:
        return _fail(json_errors, e.exit_code, type(e).__name__, str(e))
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    except Exception as e:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        return _fail(json_errors, 3, type(e).__name__, str(e))
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Batch command-line front end.

All pipelines run off one TOML config file; individual values can be
overridden on the command line with --set section.key=value (flags win).
Artifacts are written atomically (temp file + rename) and every run leaves a
manifest JSON recording the config hash, input hashes, package version, and
wall time. Exit codes: 0 success, 1 domain error, 2 config or I/O error.

Config grammar (TOML): a [inputs] table with file paths, an [output] table
with `dir`, a [run] table with `workers` and `seed`, and one optional table
per module with parameter overrides. See README for a worked example.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile
import time
from typing import Callable, Dict, List, Optional

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from . import __version__
from .core import DomainError, GeoPolygon, GridSpec
from .cluster import ClusterParams
from .demand import (
    ZoneLevel,
    build_od_matrix,
    corridor_analysis,
    derive_expansion_factor,
    estimate_penetration,
    expand_matrix,
    export_chord_table,
    load_atr_csv,
    load_zones_geojson,
    origin_heatmap,
    serialize_od_csv,
)
from .enforcement import (
    ThresholdMode,
    detect_wim_evasion,
    detour_cost,
    load_wim_sites_geojson,
    serialize_evasion_csv,
    serialize_speed_grid_csv,
    speed_grid,
    speed_grid_geojson,
)
from .ingest import (
    TripFormat,
    filter_outlier_waypoints,
    parse_trips,
    summarize_corpus,
    trip_stats,
)
from .isochrone import IsochroneSpec, build_isochrones, isochrones_geojson
from .mapmatch import HmmParams, match_batch, parse_matched_csv, serialize_matched_csv
from .network import load_network
from .transit import (
    cluster_od_pairs,
    demand_vs_transit_report,
    load_transit_geojson,
    serialize_coverage_csv,
)

EXIT_OK = 0
EXIT_DOMAIN = 1
EXIT_CONFIG = 2


def _diag(msg: str) -> None:
    print(f"trajlab: {msg}", file=sys.stderr)


def _sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Pipeline:
    """Shared context for one CLI run: config access, atomic outputs, manifest."""

    def __init__(self, subcommand: str, config: dict, config_raw: bytes):
        self.subcommand = subcommand
        self.config = config
        self.config_hash = hashlib.sha256(config_raw).hexdigest()
        self.outdir = config.get("output", {}).get("dir", "out")
        self.t0 = time.monotonic()
        self._inputs_used: Dict[str, str] = {}
        self._artifacts: List[str] = []

    def param(self, section: str, key: str, default=None):
        return self.config.get(section, {}).get(key, default)

    def input_path(self, name: str) -> str:
        path = self.config.get("inputs", {}).get(name)
        if path is None:
            raise FileNotFoundError(f"config [inputs] is missing '{name}'")
        if not os.path.exists(path):
            raise FileNotFoundError(f"input file not found: {path}")
        self._inputs_used[name] = _sha256_file(path)
        return path

    def write_text(self, name: str, producer: Callable) -> str:
        """Write an artifact atomically: produce into a temp file, then rename."""
        os.makedirs(self.outdir, exist_ok=True)
        final = os.path.join(self.outdir, name)
        fd, tmp = tempfile.mkstemp(dir=self.outdir, prefix=".tmp-", text=True)
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as f:
                producer(f)
            os.replace(tmp, final)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        self._artifacts.append(name)
        return final

    def write_json(self, name: str, doc) -> str:
        return self.write_text(name, lambda f: (json.dump(doc, f, sort_keys=True),
                                                f.write("\n"))[0])

    def finish(self) -> None:
        manifest = {
            "subcommand": self.subcommand,
            "version": __version__,
            "config_hash": self.config_hash,
            "input_hashes": self._inputs_used,
            "artifacts": sorted(self._artifacts),
            "wall_time_s": round(time.monotonic() - self.t0, 3),
            "finished_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        }
        self.write_json(f"{self.subcommand}_manifest.json", manifest)


def _load_trips(pipe: Pipeline, filtered: bool = True):
    path = pipe.input_path("trips")
    fmt = TripFormat.JSONL if path.endswith(".jsonl") else TripFormat.CSV
    stream, report = parse_trips(path, fmt)
    trips = []
    vmax = pipe.param("ingest", "vmax_mps", 67.0)
    for trip in stream:
        if filtered:
            trip, dropped = filter_outlier_waypoints(trip, vmax)
            report.waypoints_dropped_as_outliers += dropped
            if trip is None:
                report.reject("all waypoints outliers")
                report.trips_kept -= 1
                continue
        trips.append(trip)
    return trips, report


def _bbox_polygon(bbox) -> GeoPolygon:
    lat0, lon0, lat1, lon1 = bbox
    return GeoPolygon((
        (lat0, lon0), (lat0, lon1), (lat1, lon1), (lat1, lon0), (lat0, lon0)))


# -- subcommand implementations -----------------------------------------------------

def cmd_ingest_stats(pipe: Pipeline) -> None:
    trips, report = _load_trips(pipe)
    if not trips:
        raise DomainError("no valid trips in input")
    stats = [trip_stats(t) for t in trips]
    summary = summarize_corpus(stats)

    def write_stats(f):
        f.write("trip_id,duration_s,length_m,n_waypoints,median_lapse_s,median_spacing_m\n")
        for t, s in zip(trips, stats):
            f.write(f"{t.trip_id},{s.duration_s:.3f},{s.length_m:.3f},"
                    f"{s.n_waypoints},{s.median_lapse_s:.3f},{s.median_spacing_m:.3f}\n")

    pipe.write_text("trip_stats.csv", write_stats)
    pipe.write_json("corpus_summary.json", {
        "n_trips": summary.n_trips,
        "quartiles": summary.quartiles,
    })
    pipe.write_text("ingest_report.json", lambda f: f.write(report.to_json() + "\n"))


def cmd_match(pipe: Pipeline) -> None:
    trips, _report = _load_trips(pipe)
    net = load_network(pipe.input_path("network"))
    params = HmmParams(
        sigma_gps_m=pipe.param("mapmatch", "sigma_gps_m", 4.07),
        beta_m=pipe.param("mapmatch", "beta_m", 20.0),
        candidate_radius_m=pipe.param("mapmatch", "candidate_radius_m", 200.0),
        max_candidates=pipe.param("mapmatch", "max_candidates", 8),
    )
    workers = pipe.param("run", "workers", 1)
    matched, report = match_batch(trips, net, params, workers=workers)
    pipe.write_text("matched.csv", lambda f: serialize_matched_csv(matched, f))
    pipe.write_json("match_report.json", {
        "matched": report.matched,
        "unmatchable": report.unmatchable,
        "trips_per_s": round(report.trips_per_s, 2),
    })


def cmd_penetration(pipe: Pipeline) -> None:
    matched = parse_matched_csv(pipe.input_path("matched"))
    atr = load_atr_csv(pipe.input_path("atr"))
    summary = estimate_penetration(matched, atr)
    aggregate = pipe.param("demand", "pr_aggregate", "median")
    pr = summary.median_pr if aggregate == "median" else summary.mean_pr
    doc = {
        "mean_pr": summary.mean_pr,
        "median_pr": summary.median_pr,
        "expansion_factor": derive_expansion_factor(pr) if pr > 0 else None,
        "stations": {
            sid: {"mean_pr": est.mean_pr, "median_pr": est.median_pr,
                  "n_hours": len(est.hourly_pr), "anomalies": est.anomalies}
            for sid, est in summary.per_station.items()
        },
    }
    pipe.write_json("penetration.json", doc)


def cmd_od_matrix(pipe: Pipeline) -> None:
    trips, _ = _load_trips(pipe)
    level = ZoneLevel(pipe.param("demand", "zone_level", "TAZ"))
    zones = load_zones_geojson(pipe.input_path("zones"), level)
    m = build_od_matrix(trips, zones)
    factor = pipe.param("demand", "expansion_factor", None)
    if factor is not None:
        m = expand_matrix(m, float(factor))
    pipe.write_text("od_matrix.csv", lambda f: serialize_od_csv(m, f))
    min_flow = pipe.param("demand", "chord_min_flow", 0)
    pipe.write_text("chord_table.tsv", lambda f: export_chord_table(m, f, min_flow))
    pipe.write_json("od_summary.json", {
        "level": level.value, "total": m.total, "unassigned": m.unassigned,
        "expansion_factor": m.expansion_factor,
    })


def cmd_corridor(pipe: Pipeline) -> None:
    trips, _ = _load_trips(pipe)
    region_a = _bbox_polygon(pipe.param("corridor", "a_bbox"))
    region_b = _bbox_polygon(pipe.param("corridor", "b_bbox"))
    routes = {name: _bbox_polygon(bbox)
              for name, bbox in pipe.param("corridor", "routes", {}).items()}
    tz = pipe.param("corridor", "tz_offset_h", -5)
    summary = corridor_analysis(trips, region_a, region_b, routes, tz_offset_h=tz)
    if not summary.trips:
        raise DomainError("no qualifying corridor trips")

    def write_tt(f):
        f.write("day_type,depart_hour,median_travel_time_s\n")
        for (day_type, hour) in sorted(summary.hourly_median_s):
            f.write(f"{day_type},{hour},{summary.hourly_median_s[(day_type, hour)]:.1f}\n")

    pipe.write_text("corridor_travel_times.csv", write_tt)
    pipe.write_json("corridor_splits.json", summary.route_shares)


def cmd_isochrone(pipe: Pipeline) -> None:
    trips, _ = _load_trips(pipe)
    origin = _bbox_polygon(pipe.param("isochrone", "origin_bbox"))
    thresholds = tuple(pipe.param("isochrone", "thresholds_min", [10, 20, 30, 40]))
    eps_km = pipe.param("isochrone", "eps_km", [1.1, 1.3, 1.4, 1.6])
    min_pts = pipe.param("isochrone", "min_pts", [60, 20, 10, 5])
    params = {t: ClusterParams(eps_m=1000.0 * e, min_pts=int(m))
              for t, e, m in zip(thresholds, eps_km, min_pts)}
    spec = IsochroneSpec(origin, thresholds, params)
    isos = build_isochrones(trips, spec)
    for iso in isos:
        if iso.boundary is None:
            _diag(f"isochrone {iso.threshold_min} min: empty "
                  f"({iso.n_outliers} points, all noise or too few)")
    pipe.write_json("isochrones.geojson", isochrones_geojson(isos))


def cmd_transit_coverage(pipe: Pipeline) -> None:
    trips, _ = _load_trips(pipe)
    region = pipe.param("transit", "region_bbox", None)
    if region is not None:
        poly = _bbox_polygon(region)
        from .core import point_in_polygon
        trips = [t for t in trips
                 if point_in_polygon(t.origin, poly)
                 and point_in_polygon(t.destination, poly)]
    net = load_network(pipe.input_path("network"))
    tn = load_transit_geojson(pipe.input_path("transit"))
    min_pts = pipe.param("transit", "min_pts", 5)
    threshold = pipe.param("transit", "extraction_threshold_m", 1500.0)
    buffer_m = pipe.param("transit", "buffer_m", 400.0)
    uncovered = pipe.param("transit", "uncovered_threshold", 0.5)
    labeling = cluster_od_pairs(trips, min_pts, threshold)
    matched, _rep = match_batch(trips, net, workers=pipe.param("run", "workers", 1))
    by_id = {m.trip_id: m for m in matched}
    report = demand_vs_transit_report(trips, by_id, labeling, tn, net,
                                      buffer_m, uncovered)
    pipe.write_text("transit_coverage.csv", lambda f: serialize_coverage_csv(report, f))
    pipe.write_json("transit_heat.geojson", report.heat_layer)


def cmd_speed_grid(pipe: Pipeline) -> None:
    trips, _ = _load_trips(pipe)
    g = GridSpec(
        origin_lat=pipe.param("speedgrid", "origin_lat", 38.99),
        origin_lon=pipe.param("speedgrid", "origin_lon", -76.81),
        cell_size_m=pipe.param("speedgrid", "cell_size_m", 500.0),
        rows=pipe.param("speedgrid", "rows", 60),
        cols=pipe.param("speedgrid", "cols", 60),
    )
    mode = ThresholdMode(pipe.param("speedgrid", "mode", "absolute"))
    threshold = pipe.param("speedgrid", "threshold_mps", 29.0)
    sg = speed_grid(trips, g, threshold_mps=threshold, mode=mode)
    pipe.write_text("speed_grid.csv", lambda f: serialize_speed_grid_csv(sg, f))
    pipe.write_json("speed_grid.geojson", speed_grid_geojson(sg))


def cmd_wim_evasion(pipe: Pipeline) -> None:
    trips, _ = _load_trips(pipe)
    sites = load_wim_sites_geojson(pipe.input_path("wim_sites"))

    def write_all(f):
        f.write("site_id,weight_class,main_road_veh,circumvent_pct\n")
        for site in sites:
            report = detect_wim_evasion(trips, site)
            for row in report.rows:
                f.write(f"{row.site_id},{row.weight_class.value},"
                        f"{row.relevant},{row.percent:.2f}\n")

    pipe.write_text("wim_evasion.csv", write_all)
    costs = {}
    for site in sites:
        report = detect_wim_evasion(trips, site)
        frac = detour_cost(report)
        costs[site.site_id] = frac if frac is not None else "undefined"
    pipe.write_json("wim_detour_cost.json", costs)


def cmd_synth(pipe: Pipeline) -> None:
    from .synth import synth_world

    seed = pipe.param("run", "seed", 42)
    world = pipe.config.get("synth", {})
    truth = synth_world(world, pipe.outdir, seed)
    pipe._artifacts.extend(["trips.csv", "network.geojson", "zones.geojson",
                            "atr.csv", "matched.csv", "wim_sites.geojson",
                            "transit.geojson", "ground_truth.json"])
    _diag(f"synthetic world written: {truth['n_trips_total']} trips")


SUBCOMMANDS = {
    "ingest-stats": cmd_ingest_stats,
    "match": cmd_match,
    "penetration": cmd_penetration,
    "od-matrix": cmd_od_matrix,
    "corridor": cmd_corridor,
    "isochrone": cmd_isochrone,
    "transit-coverage": cmd_transit_coverage,
    "speed-grid": cmd_speed_grid,
    "wim-evasion": cmd_wim_evasion,
    "synth": cmd_synth,
}


def _apply_overrides(config: dict, overrides: List[str]) -> None:
    for item in overrides:
        try:
            key, raw = item.split("=", 1)
            section, name = key.split(".", 1)
        except ValueError:
            raise DomainError(f"bad --set (want section.key=value): {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        config.setdefault(section, {})[name] = value


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="trajlab",
        description="Batch trajectory-analytics pipelines.")
    parser.add_argument("subcommand", choices=sorted(SUBCOMMANDS))
    parser.add_argument("--config", required=True, help="TOML config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable; flags win)")
    parser.add_argument("--out", help="override the output directory")
    args = parser.parse_args(argv)

    try:
        with open(args.config, "rb") as f:
            raw = f.read()
        config = tomllib.loads(raw.decode("utf-8"))
        _apply_overrides(config, args.overrides)
        if args.out:
            config.setdefault("output", {})["dir"] = args.out
        pipe = Pipeline(args.subcommand, config, raw)
    except (OSError, tomllib.TOMLDecodeError, DomainError) as e:
        _diag(f"config error: {e}")
        return EXIT_CONFIG

    try:
        SUBCOMMANDS[args.subcommand](pipe)
        pipe.finish()
    except (FileNotFoundError, OSError) as e:
        _diag(f"io error: {e}")
        return EXIT_CONFIG
    except DomainError as e:
        _diag(f"domain error: {e}")
        return EXIT_DOMAIN
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

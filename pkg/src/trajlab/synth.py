"""Deterministic synthetic worlds for exercising every pipeline.

The real corpus behind this project is proprietary, so the generator ships
with the package: given a seed it produces trips, a road network, zones, ATR
counts, WIM sites, and transit routes, plus a ground-truth sidecar JSON
recording every planted quantity. Tests and users read expectations from the
sidecar, never from the generator's internals.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .core import (
    EARTH_RADIUS_M,
    DomainError,
    GeoPolygon,
    LatLon,
    Mode,
    Provider,
    Trip,
    Waypoint,
    WeightClass,
)
from .network import RoadNetwork, load_network

BASE_LAT = 39.0
BASE_LON = -76.8
BASE_T_MS = 1_444_000_000_000  # mid-October 2015


def meters_to_dlat(m: float) -> float:
    return math.degrees(m / EARTH_RADIUS_M)


def meters_to_dlon(m: float, lat: float = BASE_LAT) -> float:
    return math.degrees(m / (EARTH_RADIUS_M * math.cos(math.radians(lat))))


def rect_polygon(lat0: float, lon0: float, lat1: float, lon1: float) -> GeoPolygon:
    return GeoPolygon((
        (lat0, lon0), (lat0, lon1), (lat1, lon1), (lat1, lon0), (lat0, lon0),
    ))


# -- grid road network -----------------------------------------------------------

def grid_network_geojson(n: int = 10, spacing_m: float = 200.0,
                         lat0: float = BASE_LAT, lon0: float = BASE_LON) -> dict:
    """n x n node grid; every edge is emitted as two one-way links, so a
    10 x 10 grid has 100 nodes and 360 directed links."""
    dlat = meters_to_dlat(spacing_m)
    dlon = meters_to_dlon(spacing_m, lat0)

    def node_pt(r: int, c: int) -> LatLon:
        return (lat0 + r * dlat, lon0 + c * dlon)

    feats = []
    lid = 0
    for r in range(n):
        for c in range(n):
            a = r * n + c
            for (r2, c2) in ((r, c + 1), (r + 1, c)):
                if r2 >= n or c2 >= n:
                    continue
                b = r2 * n + c2
                pa, pb = node_pt(r, c), node_pt(r2, c2)
                for fn, tn, g0, g1 in ((a, b, pa, pb), (b, a, pb, pa)):
                    feats.append({
                        "type": "Feature",
                        "geometry": {
                            "type": "LineString",
                            "coordinates": [[g0[1], g0[0]], [g1[1], g1[0]]],
                        },
                        "properties": {"link_id": lid, "from_node": fn,
                                       "to_node": tn, "oneway": True},
                    })
                    lid += 1
    return {"type": "FeatureCollection", "features": feats}


def load_grid_network(n: int = 10, spacing_m: float = 200.0) -> RoadNetwork:
    return load_network(grid_network_geojson(n, spacing_m))


def random_grid_route(net: RoadNetwork, rng: random.Random,
                      min_links: int = 4) -> Optional[List[int]]:
    """Shortest node-to-node route between two random nodes, as link ids."""
    nodes = sorted(net.nodes)
    for _ in range(20):
        a, b = rng.choice(nodes), rng.choice(nodes)
        if a == b:
            continue
        la = min((l for l in net.links.values() if l.from_node == a),
                 key=lambda l: l.link_id)
        lb = min((l for l in net.links.values() if l.to_node == b),
                 key=lambda l: l.link_id)
        from .network import LinkProjection
        pa = LinkProjection(la.link_id, net.nodes[a], 0.0, 0.0)
        pb = LinkProjection(lb.link_id, net.nodes[b], lb.length_m, 0.0)
        route = net.shortest_path(pa, pb)
        if route is not None and len(route.links) >= min_links:
            return list(route.links)
    return None


def route_polyline(net: RoadNetwork, links: Sequence[int]) -> List[LatLon]:
    pts: List[LatLon] = []
    for lid in links:
        geom = net.links[lid].geometry
        start = 1 if (pts and pts[-1] == geom[0]) else 0
        pts.extend(geom[start:])
    return pts


def sample_trip_along(polyline: Sequence[LatLon], speed_mps: float,
                      hz: float, noise_sigma_m: float, rng: random.Random,
                      trip_id: str, t0_ms: int = BASE_T_MS,
                      **trip_kwargs) -> Trip:
    """Waypoints at 1/hz intervals along a polyline at constant speed, with
    isotropic Gaussian position noise."""
    step_m = speed_mps / hz
    # cumulative arc length
    cum = [0.0]
    for a, b in zip(polyline, polyline[1:]):
        dx = (b[1] - a[1]) * math.cos(math.radians(a[0]))
        dy = b[0] - a[0]
        cum.append(cum[-1] + math.hypot(dx, dy) * math.pi / 180.0 * EARTH_RADIUS_M)
    total = cum[-1]
    wps = []
    s = 0.0
    i = 0
    k = 0
    while s <= total:
        while i + 1 < len(cum) - 1 and cum[i + 1] < s:
            i += 1
        seg = cum[i + 1] - cum[i]
        t = (s - cum[i]) / seg if seg > 0 else 0.0
        a, b = polyline[i], polyline[i + 1]
        lat = a[0] + t * (b[0] - a[0])
        lon = a[1] + t * (b[1] - a[1])
        if noise_sigma_m > 0:
            lat += meters_to_dlat(rng.gauss(0.0, noise_sigma_m))
            lon += meters_to_dlon(rng.gauss(0.0, noise_sigma_m), lat)
        wps.append(Waypoint(lat, lon, t0_ms + int(k * 1000 / hz)))
        s += step_m
        k += 1
    if len(wps) < 2:
        raise DomainError("route too short to sample")
    defaults = dict(device_id=f"dev-{trip_id}", mode=Mode.VEHICLE,
                    weight_class=WeightClass.UNKNOWN, provider=Provider.FLEET)
    defaults.update(trip_kwargs)
    return Trip(trip_id=trip_id, waypoints=tuple(wps), **defaults)


# -- zone systems -----------------------------------------------------------------

def make_zone_hierarchy(extent_m: float = 20_000.0,
                        taz_per_side: int = 8, county_per_side: int = 4,
                        state_per_side: int = 2):
    """Nested square zone tilings over one extent; returns (GeoJSON doc,
    taz->county map, county->state map)."""
    def tiles(per_side: int, prefix: str) -> Dict[str, GeoPolygon]:
        size = extent_m / per_side
        out = {}
        for r in range(per_side):
            for c in range(per_side):
                lat_a = BASE_LAT + meters_to_dlat(r * size)
                lat_b = BASE_LAT + meters_to_dlat((r + 1) * size)
                lon_a = BASE_LON + meters_to_dlon(c * size)
                lon_b = BASE_LON + meters_to_dlon((c + 1) * size)
                out[f"{prefix}{r:02d}{c:02d}"] = rect_polygon(lat_a, lon_a, lat_b, lon_b)
        return out

    taz = tiles(taz_per_side, "T")
    county = tiles(county_per_side, "C")
    state = tiles(state_per_side, "S")

    def parent(child_per_side: int, parent_per_side: int, r: int, c: int,
               prefix: str) -> str:
        k = child_per_side // parent_per_side
        return f"{prefix}{r // k:02d}{c // k:02d}"

    taz_to_county = {}
    for r in range(taz_per_side):
        for c in range(taz_per_side):
            taz_to_county[f"T{r:02d}{c:02d}"] = parent(taz_per_side, county_per_side,
                                                       r, c, "C")
    county_to_state = {}
    for r in range(county_per_side):
        for c in range(county_per_side):
            county_to_state[f"C{r:02d}{c:02d}"] = parent(county_per_side, state_per_side,
                                                         r, c, "S")

    feats = []
    for level, zones in (("TAZ", taz), ("County", county), ("State", state)):
        for zid, poly in sorted(zones.items()):
            feats.append({
                "type": "Feature",
                "geometry": {
                    "type": "Polygon",
                    "coordinates": [[[lon, lat] for lat, lon in poly.exterior]],
                },
                "properties": {"zone_id": zid, "name": zid, "level": level},
            })
    doc = {"type": "FeatureCollection", "features": feats}
    return doc, taz_to_county, county_to_state


def random_point_in(extent_m: float, rng: random.Random,
                    margin_m: float = 100.0) -> LatLon:
    x = rng.uniform(margin_m, extent_m - margin_m)
    y = rng.uniform(margin_m, extent_m - margin_m)
    return (BASE_LAT + meters_to_dlat(y), BASE_LON + meters_to_dlon(x))


def gen_zone_trips(n_trips: int, extent_m: float, rng: random.Random,
                   t0_ms: int = BASE_T_MS) -> List[Trip]:
    """Two-waypoint trips with uniformly random endpoints inside the extent."""
    trips = []
    for i in range(n_trips):
        o = random_point_in(extent_m, rng)
        d = random_point_in(extent_m, rng)
        t0 = t0_ms + i * 1000
        trips.append(Trip(
            trip_id=f"z{i:06d}", device_id=f"dev{i % 997}", mode=Mode.VEHICLE,
            weight_class=WeightClass.UNKNOWN, provider=Provider.FLEET,
            waypoints=(Waypoint(o[0], o[1], t0),
                       Waypoint(d[0], d[1], t0 + 600_000)),
        ))
    return trips


# -- penetration world -------------------------------------------------------------

def gen_penetration_world(p: float, station_hours: int, veh_per_hour: int,
                          rng: random.Random, link_id: int = 0,
                          station_id: str = "ATR001"):
    """ATR records plus matched-trip traversals sampled Binomial(count, p).

    Returns (atr records, matched trips, planted p).
    """
    from .demand import AtrRecord
    from .mapmatch import MatchedTrip

    from datetime import datetime, timezone

    atr = []
    matched = []
    trip_no = 0
    start_ms = BASE_T_MS - (BASE_T_MS % 3_600_000)
    for h in range(station_hours):
        base = start_ms + h * 3_600_000
        hour_utc = datetime.fromtimestamp(base / 1000.0,
                                          tz=timezone.utc).strftime("%Y-%m-%dT%H")
        atr.append(AtrRecord(station_id, link_id, hour_utc, veh_per_hour))
        observed = sum(1 for _ in range(veh_per_hour) if rng.random() < p)
        for j in range(observed):
            t = base + (j * 3_600_000) // max(1, observed + 1)
            matched.append(MatchedTrip(
                trip_id=f"pr{trip_no:07d}", links=((link_id, t),),
                projections=(), log_likelihood=0.0))
            trip_no += 1
    return atr, matched, p


# -- WIM world ----------------------------------------------------------------------

WIM_CLASS_ORDER = (WeightClass.W0_14, WeightClass.W14_26, WeightClass.W26_PLUS)


def make_wim_site(site_id: str = "wim1", lat: float = BASE_LAT + 0.3,
                  lon: float = BASE_LON + 0.3):
    """A straight west-east main route with an upstream gate, a station
    buffer in the middle, and a downstream gate."""
    w = meters_to_dlon(3000.0, lat)  # site span ~6 km
    h = meters_to_dlat(300.0)
    gate_up = rect_polygon(lat - h, lon - w, lat + h, lon - w * 0.7)
    buffer = rect_polygon(lat - h, lon - w * 0.15, lat + h, lon + w * 0.15)
    gate_down = rect_polygon(lat - h, lon + w * 0.7, lat + h, lon + w)
    corridor = rect_polygon(lat - h, lon - w, lat + h, lon + w)
    from .enforcement import WimSite

    return WimSite(site_id, (lat, lon), corridor, gate_up, gate_down, buffer)


def gen_wim_trips(site, counts: Dict[WeightClass, Tuple[int, int]],
                  rng: random.Random, slow_detour_fraction: float = 1.0,
                  t0_ms: int = BASE_T_MS) -> List[Trip]:
    """Trips through a WIM site: counts maps weight class ->
    (relevant, circumventing). Compliant trips run straight along the main
    road; circumventing trips bulge around the station buffer. A
    slow_detour_fraction of detours take longer than the main-road time."""
    lat, lon = site.station
    up = ((site.gate_up.exterior[0][0] + site.gate_up.exterior[2][0]) / 2,
          (site.gate_up.exterior[0][1] + site.gate_up.exterior[2][1]) / 2)
    down = ((site.gate_down.exterior[0][0] + site.gate_down.exterior[2][0]) / 2,
            (site.gate_down.exterior[0][1] + site.gate_down.exterior[2][1]) / 2)
    detour_lat = site.buffer.exterior[2][0] + meters_to_dlat(800.0)

    trips = []
    i = 0
    main_time_ms = 240_000
    for wc in WIM_CLASS_ORDER:
        if wc not in counts:
            continue
        relevant, circ = counts[wc]
        for j in range(relevant):
            circumvent = j < circ
            t0 = t0_ms + i * 7_000
            if circumvent:
                slow = (j < circ * slow_detour_fraction)
                dur = int(main_time_ms * (1.5 if slow else 0.8))
                wps = (
                    Waypoint(up[0], up[1], t0),
                    Waypoint(detour_lat, (up[1] + lon) / 2, t0 + dur // 3),
                    Waypoint(detour_lat, (down[1] + lon) / 2, t0 + 2 * dur // 3),
                    Waypoint(down[0], down[1], t0 + dur),
                )
            else:
                wps = (
                    Waypoint(up[0], up[1], t0),
                    Waypoint(lat, lon, t0 + main_time_ms // 2),
                    Waypoint(down[0], down[1], t0 + main_time_ms),
                )
            trips.append(Trip(
                trip_id=f"w{i:06d}", device_id=f"dev{i}", mode=Mode.VEHICLE,
                weight_class=wc, provider=Provider.FLEET, waypoints=wps))
            i += 1
    rng.shuffle(trips)
    return trips


# -- corridor world -----------------------------------------------------------------

def gen_corridor_trips(n_days: int, trips_per_hour: int, rng: random.Random,
                       base_time_s: float = 600.0,
                       am_peak_factor: float = 1.8,
                       pm_peak_factor: float = 1.7,
                       tz_offset_h: int = -5) -> Tuple[List[Trip], dict]:
    """Trips from region A to region B with weekday slowdowns planted at
    7-8 AM and 4-6 PM local time; weekends stay flat. Returns the trips and
    the planted truth (peak hours, base time)."""
    a_center = (BASE_LAT + 0.5, BASE_LON + 0.5)
    b_center = (BASE_LAT + 0.5, BASE_LON + 0.9)
    route_center = ((a_center[0] + b_center[0]) / 2,
                    (a_center[1] + b_center[1]) / 2)
    # Monday 2015-10-05 00:00 UTC
    start_ms = 1_444_003_200_000

    trips = []
    i = 0
    for day in range(n_days):
        for local_hour in range(24):
            utc_hour = local_hour - tz_offset_h
            depart_base = start_ms + (day * 24 + utc_hour) * 3_600_000
            dt = depart_base / 1000.0
            import datetime as _dt

            weekday = (_dt.datetime.fromtimestamp(dt, tz=_dt.timezone.utc)
                       + _dt.timedelta(hours=tz_offset_h)).weekday() < 5
            factor = 1.0
            if weekday:
                if local_hour == 7:
                    factor = am_peak_factor
                elif local_hour in (16, 17):
                    factor = pm_peak_factor
            for k in range(trips_per_hour):
                t0 = depart_base + k * 60_000
                travel_s = base_time_s * factor * rng.uniform(0.95, 1.05)
                wps = (
                    Waypoint(a_center[0], a_center[1], t0),
                    Waypoint(route_center[0], route_center[1],
                             t0 + int(travel_s * 500)),
                    Waypoint(b_center[0], b_center[1], t0 + int(travel_s * 1000)),
                )
                trips.append(Trip(
                    trip_id=f"c{i:06d}", device_id=f"dev{i % 499}",
                    mode=Mode.VEHICLE, weight_class=WeightClass.UNKNOWN,
                    provider=Provider.FLEET, waypoints=wps))
                i += 1
    truth = {
        "am_peak_hours": [7],
        "pm_peak_hours": [16, 17],
        "base_time_s": base_time_s,
        "region_a": [a_center[0] - 0.05, a_center[1] - 0.05,
                     a_center[0] + 0.05, a_center[1] + 0.05],
        "region_b": [b_center[0] - 0.05, b_center[1] - 0.05,
                     b_center[0] + 0.05, b_center[1] + 0.05],
        "route_corridor": [route_center[0] - 0.05, route_center[1] - 0.15,
                           route_center[0] + 0.05, route_center[1] + 0.15],
    }
    return trips, truth


# -- whole-world file emission ---------------------------------------------------

DEFAULT_WORLD = {
    "grid_n": 10,
    "grid_spacing_m": 200.0,
    "n_route_trips": 100,
    "n_zone_trips": 2000,
    "extent_m": 20000.0,
    "noise_sigma_m": 4.0,
    "speed_mps": 15.0,
    "sample_hz": 1.0,
    "penetration_p": 0.02,
    "station_hours": 240,
    "veh_per_hour": 200,
    "wim_counts": {"W0_14": [3794, 55], "W14_26": [12333, 75], "W26_plus": [4847, 0]},
    "corridor_days": 7,
    "corridor_trips_per_hour": 4,
    "hotspot_share": 0.8,
}


def synth_world(spec: dict, outdir: str, seed: int) -> dict:
    """Generate every input file for the CLI pipelines under outdir.

    Returns the ground-truth sidecar (also written to ground_truth.json).
    """
    import os

    from .demand import AtrRecord
    from .ingest import serialize_trips_csv
    from .mapmatch import serialize_matched_csv

    cfg = dict(DEFAULT_WORLD)
    cfg.update(spec or {})
    for wc, (rel, circ) in cfg["wim_counts"].items():
        if circ > rel:
            raise DomainError(f"wim class {wc}: circumventing exceeds relevant")
    if not (0 <= cfg["penetration_p"] <= 1):
        raise DomainError("penetration_p must be in [0, 1]")
    rng = random.Random(seed)
    os.makedirs(outdir, exist_ok=True)

    def path(name: str) -> str:
        return os.path.join(outdir, name)

    # road network + route trips with ground truth
    net_doc = grid_network_geojson(cfg["grid_n"], cfg["grid_spacing_m"])
    _write_json(path("network.geojson"), net_doc)
    net = load_network(net_doc)
    route_truth = {}
    route_trips = []
    for i in range(cfg["n_route_trips"]):
        links = random_grid_route(net, rng)
        if links is None:
            continue
        trip = sample_trip_along(route_polyline(net, links), cfg["speed_mps"],
                                 cfg["sample_hz"], cfg["noise_sigma_m"], rng,
                                 trip_id=f"r{i:05d}",
                                 t0_ms=BASE_T_MS + i * 3_600_000)
        route_trips.append(trip)
        route_truth[trip.trip_id] = links

    # zone trips (with an origin hotspot for the heat map)
    zone_trips = gen_zone_trips(cfg["n_zone_trips"], cfg["extent_m"], rng)
    n_hot = int(cfg["hotspot_share"] * len(zone_trips))
    hot = random_point_in(cfg["extent_m"], rng)
    for i in range(n_hot):
        t = zone_trips[i]
        # jitter so the hotspot is a dense cloud, not one repeated coordinate
        lat = hot[0] + meters_to_dlat(rng.gauss(0.0, 150.0))
        lon = hot[1] + meters_to_dlon(rng.gauss(0.0, 150.0))
        wps = (Waypoint(lat, lon, t.waypoints[0].t), t.waypoints[1])
        zone_trips[i] = Trip(t.trip_id, t.device_id, t.mode, t.weight_class,
                             t.provider, wps)

    corridor_trips, corridor_truth = gen_corridor_trips(
        cfg["corridor_days"], cfg["corridor_trips_per_hour"], rng)

    site = make_wim_site()
    wim_counts = {WeightClass(k): tuple(v) for k, v in cfg["wim_counts"].items()}
    wim_trips = gen_wim_trips(site, wim_counts, rng)

    with open(path("trips.csv"), "w", encoding="utf-8") as f:
        serialize_trips_csv(route_trips + zone_trips + corridor_trips + wim_trips, f)

    zones_doc, taz_to_county, county_to_state = make_zone_hierarchy(cfg["extent_m"])
    _write_json(path("zones.geojson"), zones_doc)

    atr, matched, p = gen_penetration_world(
        cfg["penetration_p"], cfg["station_hours"], cfg["veh_per_hour"], rng)
    with open(path("atr.csv"), "w", encoding="utf-8") as f:
        f.write("station_id,link_id,hour_utc,count\n")
        for r in atr:
            f.write(f"{r.station_id},{r.link_id},{r.hour_utc},{r.count}\n")
    with open(path("matched.csv"), "w", encoding="utf-8") as f:
        serialize_matched_csv(matched, f)

    _write_json(path("wim_sites.geojson"), wim_site_geojson(site))
    _write_json(path("transit.geojson"), _transit_doc(net))

    truth = {
        "seed": seed,
        "penetration_p": p,
        "wim_counts": cfg["wim_counts"],
        "corridor": corridor_truth,
        "hotspot": [hot[0], hot[1]],
        "hotspot_share": cfg["hotspot_share"],
        "n_route_trips": len(route_trips),
        "route_links": route_truth,
        "taz_to_county": taz_to_county,
        "county_to_state": county_to_state,
        "n_trips_total": len(route_trips) + len(zone_trips)
                         + len(corridor_trips) + len(wim_trips),
    }
    _write_json(path("ground_truth.json"), truth)
    return truth


def wim_site_geojson(site) -> dict:
    feats = [{
        "type": "Feature",
        "geometry": {"type": "Point",
                     "coordinates": [site.station[1], site.station[0]]},
        "properties": {"site_id": site.site_id, "role": "station"},
    }]
    for role, poly in (("corridor", site.corridor), ("gate_up", site.gate_up),
                       ("gate_down", site.gate_down), ("buffer", site.buffer)):
        feats.append({
            "type": "Feature",
            "geometry": {
                "type": "Polygon",
                "coordinates": [[[lon, lat] for lat, lon in poly.exterior]],
            },
            "properties": {"site_id": site.site_id, "role": role},
        })
    return {"type": "FeatureCollection", "features": feats}


def _transit_doc(net: RoadNetwork) -> dict:
    """Two transit routes along the first and middle rows of the grid."""
    rows: Dict[float, List[LatLon]] = {}
    for link in net.links.values():
        for p in link.geometry:
            rows.setdefault(round(p[0], 6), []).append(p)
    lats = sorted(rows)
    feats = []
    for idx, lat in enumerate((lats[0], lats[len(lats) // 2])):
        pts = sorted(set(rows[lat]), key=lambda p: p[1])
        feats.append({
            "type": "Feature",
            "geometry": {"type": "LineString",
                         "coordinates": [[lon, la] for la, lon in pts]},
            "properties": {"route_id": f"route{idx}", "name": f"Route {idx}"},
        })
    return {"type": "FeatureCollection", "features": feats}


def _write_json(path: str, doc: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True)
        f.write("\n")

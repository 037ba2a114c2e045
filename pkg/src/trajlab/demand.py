"""O-D matrices, penetration-rate estimation, expansion scaling, corridor analysis.

Zone assignment is endpoint-based: a trip's origin zone comes from its first
waypoint, its destination zone from its last. Boundary points resolve to the
lowest zone id (containment is edge-inclusive).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .core import DomainError, GeoPolygon, GridSpec, Trip, grid_index, point_in_polygon
from .mapmatch import MatchedTrip


class ZoneLevel(Enum):
    TAZ = "TAZ"
    ZIP = "Zip"
    COUNTY = "County"
    STATE = "State"


@dataclass(frozen=True)
class ZoneSystem:
    level: ZoneLevel
    zones: Dict[str, GeoPolygon]
    names: Dict[str, str] = field(default_factory=dict)

    def assign(self, point) -> Optional[str]:
        """Zone containing the point; lowest zone id wins on boundary ties."""
        hit = None
        for zid in sorted(self.zones):
            if point_in_polygon(point, self.zones[zid]):
                hit = zid
                break
        return hit


@dataclass
class ODMatrix:
    level: ZoneLevel
    counts: Dict[Tuple[str, str], int] = field(default_factory=dict)
    unassigned: int = 0
    expansion_factor: Optional[float] = None
    expanded: Optional[Dict[Tuple[str, str], float]] = None

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def increment(self, origin: str, dest: str) -> None:
        key = (origin, dest)
        self.counts[key] = self.counts.get(key, 0) + 1

    def merge(self, other: "ODMatrix") -> "ODMatrix":
        out = ODMatrix(self.level, dict(self.counts), self.unassigned + other.unassigned)
        for k, v in other.counts.items():
            out.counts[k] = out.counts.get(k, 0) + v
        return out


def build_od_matrix(trips: Iterable[Trip], zones: ZoneSystem) -> ODMatrix:
    """Count trips between zones; either endpoint outside all zones makes the
    trip unassigned (tracked separately, never silently dropped)."""
    m = ODMatrix(zones.level)
    for trip in trips:
        o = zones.assign(trip.origin)
        d = zones.assign(trip.destination)
        if o is None or d is None:
            m.unassigned += 1
        else:
            m.increment(o, d)
    return m


def aggregate_matrix(m: ODMatrix, mapping: Dict[str, str], level: ZoneLevel) -> ODMatrix:
    """Roll a matrix up a zone hierarchy, e.g. county -> state."""
    out = ODMatrix(level, unassigned=m.unassigned)
    for (o, d), v in m.counts.items():
        key = (mapping[o], mapping[d])
        out.counts[key] = out.counts.get(key, 0) + v
    if m.expanded is not None:
        out.expansion_factor = m.expansion_factor
        out.expanded = {}
        for (o, d), v in m.expanded.items():
            key = (mapping[o], mapping[d])
            out.expanded[key] = out.expanded.get(key, 0.0) + v
    return out


def expand_matrix(m: ODMatrix, factor: float) -> ODMatrix:
    """Scale every entry by the expansion factor; raw integer counts are kept
    alongside the scaled values."""
    if factor <= 0:
        raise DomainError("expansion factor must be positive")
    out = ODMatrix(m.level, dict(m.counts), m.unassigned)
    out.expansion_factor = factor
    out.expanded = {k: v * factor for k, v in m.counts.items()}
    return out


def derive_expansion_factor(penetration_rate: float) -> int:
    """Reciprocal of the penetration rate, rounded to the nearest integer.

    A median PR of 1.86% yields a factor of 54: the sample sees roughly one
    in every 54 vehicles.
    """
    if not (0 < penetration_rate <= 1):
        raise DomainError("penetration rate must be in (0, 1]")
    return round(1.0 / penetration_rate)


# -- penetration-rate estimation against fixed sensors ------------------------

@dataclass(frozen=True, slots=True)
class AtrRecord:
    station_id: str
    link_id: int
    hour_utc: str  # ISO 8601 truncated to the hour, e.g. 2015-10-05T07
    count: int

    def __post_init__(self):
        if self.count < 0:
            raise DomainError("sensor count must be non-negative")


@dataclass
class PenetrationEstimate:
    station_id: str
    hourly_pr: Dict[str, float]  # hour -> PR over hours with sensor count > 0
    anomalies: List[str] = field(default_factory=list)  # hours with PR > 1

    @property
    def mean_pr(self) -> float:
        vals = list(self.hourly_pr.values())
        return sum(vals) / len(vals) if vals else math.nan

    @property
    def median_pr(self) -> float:
        vals = sorted(self.hourly_pr.values())
        return vals[(len(vals) - 1) // 2] if vals else math.nan


@dataclass
class PenetrationSummary:
    per_station: Dict[str, PenetrationEstimate]
    mean_pr: float
    median_pr: float


def _hour_key(t_ms: int) -> str:
    dt = datetime.fromtimestamp(t_ms / 1000.0, tz=timezone.utc)
    return dt.strftime("%Y-%m-%dT%H")


def estimate_penetration(matched: Iterable[MatchedTrip],
                         atr: Sequence[AtrRecord],
                         known_links: Optional[set] = None) -> PenetrationSummary:
    """Per station-hour PR = matched traversals of the station's link in that
    hour, divided by the sensor count. PR > 1 is flagged, never clamped."""
    stations: Dict[str, int] = {}
    sensor: Dict[Tuple[str, str], int] = {}
    for rec in atr:
        if known_links is not None and rec.link_id not in known_links:
            raise DomainError(f"station {rec.station_id}: link {rec.link_id} "
                              "not present in the network")
        stations[rec.station_id] = rec.link_id
        sensor[(rec.station_id, rec.hour_utc)] = rec.count

    link_to_stations: Dict[int, List[str]] = {}
    for sid, lid in stations.items():
        link_to_stations.setdefault(lid, []).append(sid)

    traversals: Dict[Tuple[str, str], int] = {}
    for m in matched:
        for lid, t in m.links:
            for sid in link_to_stations.get(lid, ()):
                key = (sid, _hour_key(t))
                if (key in sensor):
                    traversals[key] = traversals.get(key, 0) + 1

    per_station: Dict[str, PenetrationEstimate] = {}
    all_prs: List[float] = []
    for sid in sorted(stations):
        hourly: Dict[str, float] = {}
        anomalies: List[str] = []
        for (s, hour), cnt in sensor.items():
            if s != sid or cnt <= 0:
                continue
            pr = traversals.get((s, hour), 0) / cnt
            hourly[hour] = pr
            if pr > 1:
                anomalies.append(hour)
            all_prs.append(pr)
        per_station[sid] = PenetrationEstimate(sid, hourly, anomalies)
    if not all_prs:
        raise DomainError("no station-hours with positive sensor counts")
    all_prs.sort()
    return PenetrationSummary(
        per_station=per_station,
        mean_pr=sum(all_prs) / len(all_prs),
        median_pr=all_prs[(len(all_prs) - 1) // 2],
    )


# -- chord table export --------------------------------------------------------

def export_chord_table(m: ODMatrix, stream, min_flow: int = 0) -> None:
    """Tab-separated zone-pair flows, descending by flow; pairs below
    min_flow are pooled into a single OTHER row. Column order:
    origin_zone, dest_zone, count, expanded_count."""
    rows = sorted(m.counts.items(), key=lambda kv: (-kv[1], kv[0]))
    w = csv.writer(stream, delimiter="\t", lineterminator="\n")
    w.writerow(["origin_zone", "dest_zone", "count", "expanded_count"])
    other = 0
    other_exp = 0.0
    for (o, d), v in rows:
        exp = m.expanded.get((o, d), 0.0) if m.expanded else v
        if v < min_flow:
            other += v
            other_exp += exp
            continue
        w.writerow([o, d, v, f"{exp:.3f}"])
    if other:
        w.writerow(["OTHER", "OTHER", other, f"{other_exp:.3f}"])


def serialize_od_csv(m: ODMatrix, stream) -> None:
    """CSV rows: origin_zone, dest_zone, count, expanded_count."""
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(["origin_zone", "dest_zone", "count", "expanded_count"])
    for (o, d) in sorted(m.counts):
        v = m.counts[(o, d)]
        exp = m.expanded.get((o, d), float(v)) if m.expanded else float(v)
        w.writerow([o, d, v, f"{exp:.3f}"])


# -- corridor (single O-D pair) analysis ----------------------------------------

UNASSIGNED = "UNASSIGNED"

DEFAULT_TZ_OFFSET_H = -5  # US Eastern standard time; departure peaks are local


@dataclass(frozen=True)
class CorridorTrip:
    trip_id: str
    depart_hour_local: int
    weekday: bool
    travel_time_s: float
    route: str


@dataclass
class CorridorSummary:
    trips: List[CorridorTrip]
    # (day_type, hour) -> median travel time seconds; day_type in {weekday, weekend}
    hourly_median_s: Dict[Tuple[str, int], float]
    route_shares: Dict[str, float]  # over assigned trips; sums to 1


def corridor_analysis(trips: Iterable[Trip], region_a: GeoPolygon,
                      region_b: GeoPolygon,
                      corridors: Dict[str, GeoPolygon],
                      tz_offset_h: int = DEFAULT_TZ_OFFSET_H) -> CorridorSummary:
    """Travel-time and route-split analysis for trips moving from region A
    to region B.

    A trip qualifies when some waypoint in A precedes some waypoint in B.
    Travel time runs from the last waypoint in A (before B is first entered)
    to the first waypoint in B. Route = corridor holding a strict majority
    of the intermediate waypoints, else UNASSIGNED.
    """
    rows: List[CorridorTrip] = []
    for trip in trips:
        in_a = [point_in_polygon(w, region_a) for w in trip.waypoints]
        in_b = [point_in_polygon(w, region_b) for w in trip.waypoints]
        first_b = None
        for j, f in enumerate(in_b):
            if f and any(in_a[:j]):
                first_b = j
                break
        if first_b is None:
            continue
        last_a = max(i for i in range(first_b) if in_a[i])
        t_depart = trip.waypoints[last_a].t
        t_arrive = trip.waypoints[first_b].t
        mids = trip.waypoints[last_a + 1:first_b]
        route = UNASSIGNED
        if mids:
            best_name, best_n = None, 0
            for name in sorted(corridors):
                n = sum(1 for w in mids if point_in_polygon(w, corridors[name]))
                if n > best_n:
                    best_name, best_n = name, n
            if best_name is not None and best_n * 2 > len(mids):
                route = best_name
        local = datetime.fromtimestamp(t_depart / 1000.0, tz=timezone.utc) \
            + timedelta(hours=tz_offset_h)
        rows.append(CorridorTrip(
            trip_id=trip.trip_id,
            depart_hour_local=local.hour,
            weekday=local.weekday() < 5,
            travel_time_s=(t_arrive - t_depart) / 1000.0,
            route=route,
        ))

    buckets: Dict[Tuple[str, int], List[float]] = {}
    for r in rows:
        key = ("weekday" if r.weekday else "weekend", r.depart_hour_local)
        buckets.setdefault(key, []).append(r.travel_time_s)
    medians = {}
    for key, vals in buckets.items():
        vals.sort()
        medians[key] = vals[(len(vals) - 1) // 2]

    assigned = [r for r in rows if r.route != UNASSIGNED]
    shares: Dict[str, float] = {}
    if assigned:
        for r in assigned:
            shares[r.route] = shares.get(r.route, 0) + 1
        shares = {k: v / len(assigned) for k, v in shares.items()}
    return CorridorSummary(rows, medians, shares)


# -- origin heat map -------------------------------------------------------------

@dataclass
class OriginHeatmap:
    grid: GridSpec
    counts: Dict[Tuple[int, int], int]
    out_of_grid: int

    @property
    def total(self) -> int:
        return sum(self.counts.values()) + self.out_of_grid


def origin_heatmap(trips: Iterable[Trip], grid: GridSpec) -> OriginHeatmap:
    """Trip first-waypoint counts per grid cell."""
    counts: Dict[Tuple[int, int], int] = {}
    out = 0
    for trip in trips:
        cell = grid_index(trip.origin, grid)
        if cell is None:
            out += 1
        else:
            counts[cell] = counts.get(cell, 0) + 1
    return OriginHeatmap(grid, counts, out)


def load_zones_geojson(source, level: ZoneLevel) -> ZoneSystem:
    """Zones from a GeoJSON FeatureCollection with {zone_id, name, level}
    properties; only features matching `level` are loaded."""
    if isinstance(source, (str, bytes)):
        with open(source, "r", encoding="utf-8") as f:
            doc = json.load(f)
    else:
        doc = json.load(source) if hasattr(source, "read") else source
    zones: Dict[str, GeoPolygon] = {}
    names: Dict[str, str] = {}
    for feat in doc.get("features", []):
        props = feat.get("properties", {})
        if props.get("level") != level.value:
            continue
        zid = str(props["zone_id"])
        rings = feat["geometry"]["coordinates"]
        exterior = tuple((float(lat), float(lon)) for lon, lat in rings[0])
        holes = tuple(tuple((float(lat), float(lon)) for lon, lat in r) for r in rings[1:])
        zones[zid] = GeoPolygon(exterior, holes)
        names[zid] = props.get("name", zid)
    return ZoneSystem(level, zones, names)


def load_atr_csv(source) -> List[AtrRecord]:
    """ATR CSV: station_id, link_id, hour_utc, count."""
    if isinstance(source, (str, bytes)):
        f = open(source, "r", encoding="utf-8")
    else:
        f = source
    reader = csv.DictReader(f)
    return [AtrRecord(row["station_id"], int(row["link_id"]),
                      row["hour_utc"], int(row["count"]))
            for row in reader]

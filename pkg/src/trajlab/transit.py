"""Demand-vs-transit comparison.

O-D pairs of trips in a study region are clustered with OPTICS; each
cluster's matched trajectories are scored against the transit network as the
share of trajectory length lying within walk-access distance of any route.
Coverage is measured on matched (link-based) trajectories, so the score does
not depend on GPS sampling density.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .core import DomainError, LatLon, Trip, haversine, local_xy
from .cluster import (
    NOISE,
    ClusterLabeling,
    ReachabilityOrdering,
    extract_clusters,
    od_neighbor_fn,
    optics,
)
from .mapmatch import MatchedTrip
from .network import RoadNetwork

DEFAULT_BUFFER_M = 400.0   # ~5-minute walk access
DEFAULT_UNCOVERED_THRESHOLD = 0.5


@dataclass(frozen=True)
class TransitNetwork:
    routes: Dict[str, Tuple[LatLon, ...]]  # route id -> polyline
    names: Dict[str, str]

    def __post_init__(self):
        for rid, line in self.routes.items():
            if len(line) < 2:
                raise DomainError(f"transit route {rid}: polyline needs >=2 points")


def load_transit_geojson(source) -> TransitNetwork:
    """Transit routes from GeoJSON LineStrings with {route_id, name}."""
    if isinstance(source, (str, bytes)):
        with open(source, "r", encoding="utf-8") as f:
            doc = json.load(f)
    else:
        doc = json.load(source) if hasattr(source, "read") else source
    routes: Dict[str, Tuple[LatLon, ...]] = {}
    names: Dict[str, str] = {}
    for feat in doc.get("features", []):
        props = feat.get("properties", {})
        rid = str(props["route_id"])
        coords = feat["geometry"]["coordinates"]
        routes[rid] = tuple((float(lat), float(lon)) for lon, lat in coords)
        names[rid] = props.get("name", rid)
    return TransitNetwork(routes, names)


def cluster_od_pairs(trips: Sequence[Trip], min_pts: int,
                     extraction_threshold_m: float,
                     max_eps_m: Optional[float] = None) -> ClusterLabeling:
    """OPTICS over O-D pair distance, then horizontal-cut extraction.

    Pair distance is origin-origin plus destination-destination haversine.
    """
    if len(trips) < min_pts:
        raise DomainError(f"need at least min_pts={min_pts} trips")
    pairs = [(t.origin.latlon, t.destination.latlon) for t in trips]
    max_eps = max_eps_m if max_eps_m is not None else 4.0 * extraction_threshold_m
    ordering = optics(pairs, min_pts, max_eps,
                      neighbor_fn=od_neighbor_fn(pairs, max_eps))
    return extract_clusters(ordering, extraction_threshold_m)


class _RouteIndex:
    """Bucketed transit-route segments in a local planar frame, for fast
    point-within-buffer tests."""

    def __init__(self, tn: TransitNetwork, origin: LatLon, cell_m: float):
        self.origin = origin
        self.cell = cell_m
        self.buckets: Dict[Tuple[int, int], List[Tuple[float, float, float, float]]] = {}
        for line in tn.routes.values():
            xy = [local_xy(p, origin) for p in line]
            for (x1, y1), (x2, y2) in zip(xy, xy[1:]):
                r0 = math.floor(min(y1, y2) / cell_m) - 1
                r1 = math.floor(max(y1, y2) / cell_m) + 1
                c0 = math.floor(min(x1, x2) / cell_m) - 1
                c1 = math.floor(max(x1, x2) / cell_m) + 1
                for r in range(r0, r1 + 1):
                    for c in range(c0, c1 + 1):
                        self.buckets.setdefault((r, c), []).append((x1, y1, x2, y2))

    def within(self, x: float, y: float, buffer_m: float) -> bool:
        key = (math.floor(y / self.cell), math.floor(x / self.cell))
        for x1, y1, x2, y2 in self.buckets.get(key, ()):
            dx, dy = x2 - x1, y2 - y1
            L2 = dx * dx + dy * dy
            if L2 > 0:
                t = max(0.0, min(1.0, ((x - x1) * dx + (y - y1) * dy) / L2))
            else:
                t = 0.0
            qx, qy = x1 + t * dx, y1 + t * dy
            if (x - qx) ** 2 + (y - qy) ** 2 <= buffer_m * buffer_m:
                return True
        return False


def _trajectory_polyline(m: MatchedTrip, net: RoadNetwork) -> List[LatLon]:
    pts: List[LatLon] = []
    for lid, _t in m.links:
        geom = net.links[lid].geometry
        if pts and pts[-1] == geom[0]:
            pts.extend(geom[1:])
        else:
            pts.extend(geom)
    return pts


def coverage_score(matched: Sequence[MatchedTrip], tn: TransitNetwork,
                   net: RoadNetwork, buffer_m: float = DEFAULT_BUFFER_M,
                   step_m: float = 25.0) -> float:
    """Share of total matched-trajectory length within buffer_m of any
    transit route. Trajectories are walked in step_m increments; each sample
    carries its step length."""
    if buffer_m <= 0:
        raise DomainError("buffer must be positive")
    if not tn.routes:
        return 0.0
    if not matched:
        return 0.0
    origin = next(iter(tn.routes.values()))[0]
    index = _RouteIndex(tn, origin, cell_m=buffer_m)
    covered = 0.0
    total = 0.0
    for m in matched:
        line = _trajectory_polyline(m, net)
        xy = [local_xy(p, origin) for p in line]
        for (x1, y1), (x2, y2) in zip(xy, xy[1:]):
            seg = math.hypot(x2 - x1, y2 - y1)
            if seg == 0:
                continue
            n = max(1, int(math.ceil(seg / step_m)))
            piece = seg / n
            for k in range(n):
                t = (k + 0.5) / n
                if index.within(x1 + t * (x2 - x1), y1 + t * (y2 - y1), buffer_m):
                    covered += piece
                total += piece
    return covered / total if total > 0 else 0.0


@dataclass(frozen=True, slots=True)
class ClusterCoverage:
    cluster_id: int
    n_trips: int
    covered_fraction: float
    flagged: bool


@dataclass
class CoverageReport:
    clusters: List[ClusterCoverage]  # sorted by demand weight, descending
    heat_layer: dict  # GeoJSON link-traversal counts


def link_heat_layer(matched: Iterable[MatchedTrip], net: RoadNetwork) -> dict:
    """GeoJSON LineString per traversed link with its traversal count."""
    counts: Dict[int, int] = {}
    for m in matched:
        for lid, _t in m.links:
            counts[lid] = counts.get(lid, 0) + 1
    feats = []
    for lid in sorted(counts):
        geom = net.links[lid].geometry
        feats.append({
            "type": "Feature",
            "geometry": {
                "type": "LineString",
                "coordinates": [[round(lon, 6), round(lat, 6)] for lat, lon in geom],
            },
            "properties": {"link_id": lid, "traversals": counts[lid]},
        })
    return {"type": "FeatureCollection", "features": feats}


def demand_vs_transit_report(trips: Sequence[Trip],
                             matched_by_trip: Dict[str, MatchedTrip],
                             labeling: ClusterLabeling,
                             tn: TransitNetwork, net: RoadNetwork,
                             buffer_m: float = DEFAULT_BUFFER_M,
                             uncovered_threshold: float = DEFAULT_UNCOVERED_THRESHOLD
                             ) -> CoverageReport:
    """Score each O-D cluster's coverage; noise trips are excluded."""
    by_cluster: Dict[int, List[MatchedTrip]] = {}
    for trip, label in zip(trips, labeling.labels):
        if label == NOISE:
            continue
        m = matched_by_trip.get(trip.trip_id)
        if m is not None:
            by_cluster.setdefault(label, []).append(m)
    rows = []
    for cid in sorted(by_cluster):
        members = by_cluster[cid]
        frac = coverage_score(members, tn, net, buffer_m)
        rows.append(ClusterCoverage(cid, len(members), frac,
                                    flagged=frac < uncovered_threshold))
    rows.sort(key=lambda r: (-r.n_trips, r.cluster_id))
    all_matched = [m for ms in by_cluster.values() for m in ms]
    return CoverageReport(rows, link_heat_layer(all_matched, net))


def serialize_coverage_csv(report: CoverageReport, stream) -> None:
    """CSV rows: cluster_id, n_trips, covered_fraction, flagged."""
    import csv

    w = csv.writer(stream, lineterminator="\n")
    w.writerow(["cluster_id", "n_trips", "covered_fraction", "flagged"])
    for r in report.clusters:
        w.writerow([r.cluster_id, r.n_trips, f"{r.covered_fraction:.4f}",
                    int(r.flagged)])

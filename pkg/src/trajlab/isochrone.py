"""Trajectory-based isochrones.

Pipeline per time threshold: collect every waypoint reached within the
threshold by trips starting in the origin region, drop DBSCAN noise, and
bound the survivors with a concave hull (alpha-shape with alpha tied to the
DBSCAN radius, so one density scale controls both filtering and shape).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import Delaunay
from shapely.geometry import MultiPoint, Polygon
from shapely.ops import unary_union

from .core import (
    EARTH_RADIUS_M,
    DomainError,
    GeoPolygon,
    LatLon,
    Trip,
    local_xy,
    point_in_polygon,
)
from .cluster import NOISE, ClusterParams, dbscan

# Default per-threshold parameters for the 4 standard thresholds (minutes ->
# radius km, min points); tuned for dense metropolitan waypoint clouds and
# overridable since results are highly parameter-sensitive.
DEFAULT_THRESHOLD_PARAMS: Dict[int, ClusterParams] = {
    10: ClusterParams(eps_m=1100.0, min_pts=60),
    20: ClusterParams(eps_m=1300.0, min_pts=20),
    30: ClusterParams(eps_m=1400.0, min_pts=10),
    40: ClusterParams(eps_m=1600.0, min_pts=5),
}


@dataclass(frozen=True)
class IsochroneSpec:
    origin: GeoPolygon
    thresholds_min: Tuple[int, ...] = (10, 20, 30, 40)
    params: Dict[int, ClusterParams] = field(default_factory=lambda: dict(DEFAULT_THRESHOLD_PARAMS))

    def __post_init__(self):
        ts = self.thresholds_min
        if any(t <= 0 for t in ts) or any(b <= a for a, b in zip(ts, ts[1:])):
            raise DomainError("thresholds must be positive and strictly increasing")
        for t in ts:
            if t not in self.params:
                raise DomainError(f"no cluster parameters for threshold {t} min")


@dataclass(frozen=True)
class Isochrone:
    threshold_min: int
    boundary: Optional[GeoPolygon]  # None when every point was noise
    n_points_in: int
    n_outliers: int
    discarded_fraction: float = 0.0  # share of survivors outside the largest component


def collect_waypoints(trips: Iterable[Trip], origin: GeoPolygon,
                      threshold_min: float) -> List[LatLon]:
    """Waypoints reached within threshold_min of trip start, for trips whose
    first waypoint lies in the origin region. Cumulative in the threshold."""
    limit_ms = threshold_min * 60_000
    out: List[LatLon] = []
    for trip in trips:
        if not point_in_polygon(trip.origin, origin):
            continue
        t0 = trip.start_ms
        for wp in trip.waypoints:
            if wp.t - t0 <= limit_ms:
                out.append(wp.latlon)
    return out


def _alpha_shape_xy(xy: np.ndarray, alpha_m: float):
    """Union of Delaunay triangles with circumradius <= alpha (planar meters)."""
    if len(np.unique(xy, axis=0)) < 4:
        return MultiPoint([tuple(p) for p in xy]).convex_hull
    try:
        tri = Delaunay(xy)
    except Exception:
        # degenerate input (e.g. collinear cloud); fall back to the convex hull
        return MultiPoint([tuple(p) for p in xy]).convex_hull
    pts = xy[tri.simplices]
    a = np.linalg.norm(pts[:, 0] - pts[:, 1], axis=1)
    b = np.linalg.norm(pts[:, 1] - pts[:, 2], axis=1)
    c = np.linalg.norm(pts[:, 2] - pts[:, 0], axis=1)
    s = (a + b + c) / 2.0
    area2 = np.maximum(s * (s - a) * (s - b) * (s - c), 0.0)
    area = np.sqrt(area2)
    with np.errstate(divide="ignore", invalid="ignore"):
        circum = np.where(area > 0, a * b * c / (4.0 * area), np.inf)
    keep = tri.simplices[circum <= alpha_m]
    if len(keep) == 0:
        return MultiPoint([tuple(p) for p in xy]).convex_hull
    triangles = [Polygon(xy[t]) for t in keep]
    return unary_union(triangles)


def _largest_polygon(geom) -> Tuple[Optional[Polygon], float]:
    """Largest polygonal component and the area fraction it covers."""
    if geom.is_empty:
        return None, 0.0
    if geom.geom_type == "Polygon":
        return geom, 1.0
    if geom.geom_type in ("MultiPolygon", "GeometryCollection"):
        polys = [g for g in geom.geoms if g.geom_type == "Polygon"]
        if not polys:
            return None, 0.0
        total = sum(p.area for p in polys)
        best = max(polys, key=lambda p: p.area)
        return best, best.area / total if total > 0 else 1.0
    return None, 0.0


def _xy_to_polygon(poly: Polygon, origin: LatLon) -> GeoPolygon:
    olat, olon = origin
    coslat = math.cos(math.radians(olat))

    def back(x: float, y: float) -> LatLon:
        return (olat + math.degrees(y / EARTH_RADIUS_M),
                olon + math.degrees(x / (EARTH_RADIUS_M * coslat)))

    ext = [back(x, y) for x, y in poly.exterior.coords]
    holes = tuple(tuple(back(x, y) for x, y in ring.coords) for ring in poly.interiors)
    return GeoPolygon(tuple(ext), holes)


def filter_and_hull(points: Sequence[LatLon], params: ClusterParams,
                    threshold_min: int = 0) -> Isochrone:
    """DBSCAN-filter a point cloud and bound the survivors with an alpha-shape."""
    if len(points) < params.min_pts:
        raise DomainError(
            f"need at least min_pts={params.min_pts} points, got {len(points)}")
    labeling = dbscan(points, params)
    survivors = [p for p, l in zip(points, labeling.labels) if l != NOISE]
    n_out = len(points) - len(survivors)
    if not survivors:
        return Isochrone(threshold_min, None, 0, n_out)

    ref = survivors[0]
    xy = np.asarray([local_xy(p, ref) for p in survivors])
    shape = _alpha_shape_xy(xy, params.eps_m)
    poly, covered = _largest_polygon(shape)
    if poly is None:
        return Isochrone(threshold_min, None, 0, n_out)
    boundary = _xy_to_polygon(poly, ref)
    n_in = sum(1 for p in survivors if point_in_polygon(p, boundary))
    return Isochrone(threshold_min, boundary, n_in, n_out,
                     discarded_fraction=1.0 - covered)


def build_isochrones(trips: Iterable[Trip], spec: IsochroneSpec) -> List[Isochrone]:
    """One isochrone per threshold, each on its own cumulative point set."""
    trips = list(trips)
    out = []
    for t in spec.thresholds_min:
        pts = collect_waypoints(trips, spec.origin, t)
        params = spec.params[t]
        if len(pts) < params.min_pts:
            out.append(Isochrone(t, None, 0, len(pts)))
            continue
        iso = filter_and_hull(pts, params, threshold_min=t)
        out.append(iso)
    return out


def isochrones_geojson(isochrones: Sequence[Isochrone]) -> dict:
    """GeoJSON FeatureCollection of isochrone boundaries (lon, lat order)."""
    feats = []
    for iso in isochrones:
        if iso.boundary is None:
            continue
        rings = [[[round(lon, 6), round(lat, 6)] for lat, lon in iso.boundary.exterior]]
        for hole in iso.boundary.holes:
            rings.append([[round(lon, 6), round(lat, 6)] for lat, lon in hole])
        feats.append({
            "type": "Feature",
            "geometry": {"type": "Polygon", "coordinates": rings},
            "properties": {
                "threshold_min": iso.threshold_min,
                "n_points": iso.n_points_in,
                "n_outliers": iso.n_outliers,
            },
        })
    return {"type": "FeatureCollection", "features": feats}

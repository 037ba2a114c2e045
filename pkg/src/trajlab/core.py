"""Shared domain types and geodesic primitives.

Everything downstream (ingest, matching, clustering, demand, enforcement)
builds on the types and pure functions defined here. All types are immutable
after construction and safe to share across workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Sequence, Tuple

EARTH_RADIUS_M = 6_371_008.8

LatLon = Tuple[float, float]


class DomainError(ValueError):
    """Input violates a documented precondition."""


class ZeroDurationError(DomainError):
    """Speed requested over a non-positive time interval."""


def _check_latlon(lat: float, lon: float) -> None:
    if not (-90.0 <= lat <= 90.0):
        raise DomainError(f"latitude out of bounds: {lat}")
    if not (-180.0 <= lon <= 180.0):
        raise DomainError(f"longitude out of bounds: {lon}")


class Mode(Enum):
    VEHICLE = "Vehicle"
    PEDESTRIAN = "Pedestrian"
    UNKNOWN = "Unknown"


class WeightClass(Enum):
    """Vehicle weight bands in 1,000 lb units."""

    W0_14 = "W0_14"
    W14_26 = "W14_26"
    W26_PLUS = "W26_plus"
    UNKNOWN = "Unknown"


class Provider(Enum):
    FLEET = "Fleet"
    CONSUMER = "Consumer"
    UNKNOWN = "Unknown"


@dataclass(frozen=True, slots=True)
class Waypoint:
    """A single GPS fix: WGS84 degrees plus UTC epoch milliseconds.

    Coordinates are stored as float64 and serialized with at least six
    decimal digits; four-decimal rounding would already cost ~11 m.
    """

    lat: float
    lon: float
    t: int

    def __post_init__(self):
        _check_latlon(self.lat, self.lon)
        if self.t <= 0:
            raise DomainError(f"timestamp must be positive, got {self.t}")

    @property
    def latlon(self) -> LatLon:
        return (self.lat, self.lon)


@dataclass(frozen=True)
class Trip:
    """One device's recorded journey: ordered waypoints plus attributes."""

    trip_id: str
    device_id: str
    mode: Mode
    weight_class: WeightClass
    provider: Provider
    waypoints: Tuple[Waypoint, ...]

    def __post_init__(self):
        if len(self.waypoints) < 2:
            raise DomainError(f"trip {self.trip_id}: needs >=2 waypoints")
        ts = [w.t for w in self.waypoints]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise DomainError(f"trip {self.trip_id}: timestamps decrease")
        if not isinstance(self.waypoints, tuple):
            object.__setattr__(self, "waypoints", tuple(self.waypoints))

    @property
    def start_ms(self) -> int:
        return self.waypoints[0].t

    @property
    def end_ms(self) -> int:
        return self.waypoints[-1].t

    @property
    def duration_s(self) -> float:
        return (self.end_ms - self.start_ms) / 1000.0

    @property
    def origin(self) -> Waypoint:
        return self.waypoints[0]

    @property
    def destination(self) -> Waypoint:
        return self.waypoints[-1]


@dataclass(frozen=True)
class GeoPolygon:
    """Closed lat/lon ring with optional holes.

    Containment uses even-odd ray casting with an edge-inclusive tie-break:
    points exactly on a boundary count as inside, so zone assignment never
    drops boundary points.
    """

    exterior: Tuple[LatLon, ...]
    holes: Tuple[Tuple[LatLon, ...], ...] = ()

    def __post_init__(self):
        ext = tuple((float(a), float(b)) for a, b in self.exterior)
        object.__setattr__(self, "exterior", ext)
        object.__setattr__(
            self, "holes",
            tuple(tuple((float(a), float(b)) for a, b in h) for h in self.holes),
        )
        if len(self.exterior) < 4:
            raise DomainError("polygon ring needs >=4 vertices including closure")
        if self.exterior[0] != self.exterior[-1]:
            raise DomainError("polygon exterior ring is not closed")
        for lat, lon in self.exterior:
            _check_latlon(lat, lon)

    def bbox(self) -> Tuple[float, float, float, float]:
        lats = [p[0] for p in self.exterior]
        lons = [p[1] for p in self.exterior]
        return (min(lats), min(lons), max(lats), max(lons))


@dataclass(frozen=True, slots=True)
class GridSpec:
    """Uniform analysis grid anchored at origin_lat/origin_lon (cell (0,0)'s
    south-west corner), with square cells of cell_size_m meters."""

    origin_lat: float
    origin_lon: float
    cell_size_m: float
    rows: int
    cols: int

    def __post_init__(self):
        _check_latlon(self.origin_lat, self.origin_lon)
        if self.cell_size_m <= 0:
            raise DomainError("cell size must be positive")
        if self.rows < 1 or self.cols < 1:
            raise DomainError("grid needs at least one cell")


def _coerce(p) -> LatLon:
    if isinstance(p, Waypoint):
        return (p.lat, p.lon)
    lat, lon = p
    return (float(lat), float(lon))


def haversine(a, b) -> float:
    """Great-circle distance in meters on a sphere of mean Earth radius.

    Accepts Waypoints or (lat, lon) pairs.
    """
    alat, alon = _coerce(a)
    blat, blon = _coerce(b)
    _check_latlon(alat, alon)
    _check_latlon(blat, blon)
    phi1 = math.radians(alat)
    phi2 = math.radians(blat)
    dphi = math.radians(blat - alat)
    dlam = math.radians(blon - alon)
    s = (math.sin(dphi / 2.0) ** 2
         + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2.0) ** 2)
    return 2.0 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(s)))


def initial_bearing(a, b) -> float:
    """Initial great-circle bearing from a to b, degrees clockwise from north."""
    alat, alon = _coerce(a)
    blat, blon = _coerce(b)
    phi1 = math.radians(alat)
    phi2 = math.radians(blat)
    dlam = math.radians(blon - alon)
    y = math.sin(dlam) * math.cos(phi2)
    x = math.cos(phi1) * math.sin(phi2) - math.sin(phi1) * math.cos(phi2) * math.cos(dlam)
    return (math.degrees(math.atan2(y, x)) + 360.0) % 360.0


def segment_speed(a: Waypoint, b: Waypoint) -> float:
    """Average speed in m/s between two consecutive waypoints."""
    dt_ms = b.t - a.t
    if dt_ms <= 0:
        raise ZeroDurationError(f"non-positive duration: {dt_ms} ms")
    return haversine(a, b) / (dt_ms / 1000.0)


def _on_segment(p: LatLon, a: LatLon, b: LatLon, eps: float = 1e-12) -> bool:
    # Collinearity + bounding-box check in coordinate space.
    cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
    if abs(cross) > eps:
        return False
    return (min(a[0], b[0]) - eps <= p[0] <= max(a[0], b[0]) + eps
            and min(a[1], b[1]) - eps <= p[1] <= max(a[1], b[1]) + eps)


def _ring_contains(p: LatLon, ring: Sequence[LatLon]) -> Optional[bool]:
    """Even-odd ray cast. Returns None when p lies exactly on the ring."""
    lat, lon = p
    inside = False
    n = len(ring) - 1  # ring is closed
    for i in range(n):
        a = ring[i]
        b = ring[i + 1]
        if _on_segment(p, a, b):
            return None
        # Cast ray in +lon direction; edge crossing test on latitude.
        if (a[0] > lat) != (b[0] > lat):
            lon_cross = a[1] + (lat - a[0]) * (b[1] - a[1]) / (b[0] - a[0])
            if lon < lon_cross:
                inside = not inside
    return inside


def point_in_polygon(p, poly: GeoPolygon) -> bool:
    """Even-odd containment; boundary points (including hole edges) are IN."""
    pt = _coerce(p)
    ext = _ring_contains(pt, poly.exterior)
    if ext is None:
        return True
    if not ext:
        return False
    for hole in poly.holes:
        h = _ring_contains(pt, hole)
        if h is None:
            return True  # on a hole edge still counts as in
        if h:
            return False
    return True


def local_xy(p, origin) -> Tuple[float, float]:
    """Equirectangular projection of p to meters east/north of origin."""
    plat, plon = _coerce(p)
    olat, olon = _coerce(origin)
    x = math.radians(plon - olon) * math.cos(math.radians(olat)) * EARTH_RADIUS_M
    y = math.radians(plat - olat) * EARTH_RADIUS_M
    return (x, y)


def grid_index(p, g: GridSpec) -> Optional[Tuple[int, int]]:
    """Cell (row, col) containing p, or None when outside the grid.

    Floor binning in a local equirectangular frame around the grid origin;
    a point exactly on a cell boundary belongs to the higher-index cell.
    """
    x, y = local_xy(p, (g.origin_lat, g.origin_lon))
    col = math.floor(x / g.cell_size_m)
    row = math.floor(y / g.cell_size_m)
    if 0 <= row < g.rows and 0 <= col < g.cols:
        return (row, col)
    return None


def cell_center(row: int, col: int, g: GridSpec) -> LatLon:
    """Lat/lon of the center of grid cell (row, col)."""
    x = (col + 0.5) * g.cell_size_m
    y = (row + 0.5) * g.cell_size_m
    dlat = math.degrees(y / EARTH_RADIUS_M)
    dlon = math.degrees(x / (EARTH_RADIUS_M * math.cos(math.radians(g.origin_lat))))
    return (g.origin_lat + dlat, g.origin_lon + dlon)

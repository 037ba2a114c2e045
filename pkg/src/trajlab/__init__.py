"""trajlab: GPS trajectory analytics.

Ingest raw trip traces, map-match them to a road network, and run the
analysis suite: trip statistics, penetration-rate calibration, O-D matrices
with expansion scaling, corridor analysis, density-filtered isochrones,
transit-coverage comparison, speed heat grids, and weigh-station
circumvention detection.
"""

__version__ = "0.1.0"

from .core import (
    DomainError,
    GeoPolygon,
    GridSpec,
    Mode,
    Provider,
    Trip,
    Waypoint,
    WeightClass,
    haversine,
    point_in_polygon,
    segment_speed,
)

__all__ = [
    "__version__",
    "DomainError",
    "GeoPolygon",
    "GridSpec",
    "Mode",
    "Provider",
    "Trip",
    "Waypoint",
    "WeightClass",
    "haversine",
    "point_in_polygon",
    "segment_speed",
]

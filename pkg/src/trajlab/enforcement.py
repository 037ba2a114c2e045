"""Safety and weight-control analytics.

Speed screening: every consecutive-waypoint segment is attributed to the
grid cell of its midpoint (never both endpoints, so nothing is counted
twice), with its initial bearing binned into one of 8 compass octants.

WIM circumvention: a trip is relevant when it passes the upstream gate and
later the downstream gate; it is compliant when any waypoint between those
passes lies in the station buffer, else circumventing. Outputs carry
aggregate counts only -- no device identifier appears anywhere.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .core import (
    DomainError,
    GeoPolygon,
    GridSpec,
    LatLon,
    Trip,
    WeightClass,
    grid_index,
    initial_bearing,
    point_in_polygon,
    segment_speed,
)


class ThresholdMode(Enum):
    ABSOLUTE = "absolute"
    CELL_MEAN = "cell_mean"  # "higher than the cell's own average"


@dataclass
class SpeedCell:
    total: int = 0
    high: int = 0
    octants: List[int] = field(default_factory=lambda: [0] * 8)


@dataclass
class SpeedGrid:
    grid: GridSpec
    cells: Dict[Tuple[int, int], SpeedCell]
    out_of_grid: int
    threshold_mode: ThresholdMode
    threshold_mps: Optional[float]

    @property
    def total_segments(self) -> int:
        return sum(c.total for c in self.cells.values()) + self.out_of_grid


def _octant(bearing_deg: float) -> int:
    """8 compass octants centered on N, NE, E, ...; bin 0 spans [-22.5, 22.5)."""
    return int(((bearing_deg + 22.5) % 360.0) // 45.0)


def _midpoint(a: LatLon, b: LatLon) -> LatLon:
    return ((a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0)


def speed_grid(trips: Iterable[Trip], grid: GridSpec,
               threshold_mps: Optional[float] = None,
               mode: ThresholdMode = ThresholdMode.ABSOLUTE,
               directional: bool = True) -> SpeedGrid:
    """Count per-cell segment speeds above a threshold.

    Absolute mode compares against threshold_mps; cell-mean mode compares
    each segment against the mean speed of its own cell (two passes).
    Trips should be outlier-filtered first so device errors don't pose as
    speeding.
    """
    if mode == ThresholdMode.ABSOLUTE and threshold_mps is None:
        raise DomainError("absolute mode needs threshold_mps")
    cells: Dict[Tuple[int, int], SpeedCell] = {}
    out_of_grid = 0
    # cell-mean mode buffers per-cell speeds for the second pass
    buffered: Dict[Tuple[int, int], List[Tuple[float, int]]] = {}

    for trip in trips:
        wps = trip.waypoints
        for a, b in zip(wps, wps[1:]):
            if b.t <= a.t:
                continue
            cell = grid_index(_midpoint(a.latlon, b.latlon), grid)
            if cell is None:
                out_of_grid += 1
                continue
            v = segment_speed(a, b)
            oct_i = _octant(initial_bearing(a, b)) if directional else 0
            sc = cells.setdefault(cell, SpeedCell())
            sc.total += 1
            sc.octants[oct_i] += 1
            if mode == ThresholdMode.ABSOLUTE:
                if v > threshold_mps:
                    sc.high += 1
            else:
                buffered.setdefault(cell, []).append((v, oct_i))

    if mode == ThresholdMode.CELL_MEAN:
        for cell, obs in buffered.items():
            mean_v = sum(v for v, _ in obs) / len(obs)
            cells[cell].high = sum(1 for v, _ in obs if v > mean_v)

    return SpeedGrid(grid, cells, out_of_grid, mode, threshold_mps)


def serialize_speed_grid_csv(sg: SpeedGrid, stream) -> None:
    """CSV rows: row, col, total, high, octant_0..octant_7."""
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(["row", "col", "total", "high"] + [f"octant_{i}" for i in range(8)])
    for (r, c) in sorted(sg.cells):
        cell = sg.cells[(r, c)]
        w.writerow([r, c, cell.total, cell.high] + cell.octants)


def speed_grid_geojson(sg: SpeedGrid) -> dict:
    """Heat layer: one point feature per cell center with total/high counts."""
    from .core import cell_center

    feats = []
    for (r, c) in sorted(sg.cells):
        cell = sg.cells[(r, c)]
        lat, lon = cell_center(r, c, sg.grid)
        feats.append({
            "type": "Feature",
            "geometry": {"type": "Point", "coordinates": [round(lon, 6), round(lat, 6)]},
            "properties": {"row": r, "col": c, "total": cell.total, "high": cell.high},
        })
    return {"type": "FeatureCollection", "features": feats}


# -- weigh-in-motion circumvention ------------------------------------------------

@dataclass(frozen=True)
class WimSite:
    site_id: str
    station: LatLon
    corridor: GeoPolygon
    gate_up: GeoPolygon
    gate_down: GeoPolygon
    buffer: GeoPolygon


@dataclass(frozen=True, slots=True)
class EvasionRow:
    site_id: str
    weight_class: WeightClass
    relevant: int  # main-road trips passing both gates
    circumventing: int

    @property
    def compliant(self) -> int:
        return self.relevant - self.circumventing

    @property
    def percent(self) -> float:
        return 100.0 * self.circumventing / self.relevant if self.relevant else 0.0


@dataclass
class EvasionReport:
    rows: List[EvasionRow]
    # gate-to-gate seconds per trip, kept for detour-cost follow-up
    compliant_times_s: List[float] = field(default_factory=list)
    circumventing_times_s: List[float] = field(default_factory=list)


def _gate_passage(trip: Trip, site: WimSite) -> Optional[Tuple[int, int]]:
    """(index in upstream gate, later index in downstream gate), earliest such
    pair, or None."""
    first_up = None
    for i, wp in enumerate(trip.waypoints):
        if first_up is None:
            if point_in_polygon(wp, site.gate_up):
                first_up = i
        elif point_in_polygon(wp, site.gate_down):
            return first_up, i
    return None


def detect_wim_evasion(trips: Iterable[Trip], site: WimSite) -> EvasionReport:
    """Classify gate-to-gate trips as compliant or circumventing per weight class."""
    relevant: Dict[WeightClass, int] = {}
    circ: Dict[WeightClass, int] = {}
    compliant_times: List[float] = []
    circ_times: List[float] = []
    for trip in trips:
        passage = _gate_passage(trip, site)
        if passage is None:
            continue
        i_up, i_down = passage
        relevant[trip.weight_class] = relevant.get(trip.weight_class, 0) + 1
        between = trip.waypoints[i_up + 1:i_down]
        through_station = any(point_in_polygon(w, site.buffer) for w in between)
        dt = (trip.waypoints[i_down].t - trip.waypoints[i_up].t) / 1000.0
        if through_station:
            compliant_times.append(dt)
        else:
            circ[trip.weight_class] = circ.get(trip.weight_class, 0) + 1
            circ_times.append(dt)
    rows = [EvasionRow(site.site_id, wc, relevant[wc], circ.get(wc, 0))
            for wc in sorted(relevant, key=lambda w: w.value)]
    return EvasionReport(rows, compliant_times, circ_times)


def detour_cost(report: EvasionReport) -> Optional[float]:
    """Fraction of circumventing trips slower than the compliant gate-to-gate
    median; None when there is nothing to compare."""
    if not report.compliant_times_s:
        return None
    if not report.circumventing_times_s:
        return None
    s = sorted(report.compliant_times_s)
    median = s[(len(s) - 1) // 2]
    slower = sum(1 for t in report.circumventing_times_s if t > median)
    return slower / len(report.circumventing_times_s)


def serialize_evasion_csv(report: EvasionReport, stream) -> None:
    """CSV rows: site_id, weight_class, main_road_veh, circumvent_pct."""
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(["site_id", "weight_class", "main_road_veh", "circumvent_pct"])
    for row in report.rows:
        w.writerow([row.site_id, row.weight_class.value, row.relevant,
                    f"{row.percent:.2f}"])


def load_wim_sites_geojson(source) -> List[WimSite]:
    """WIM site file: FeatureCollection whose features carry {site_id, role}
    with role in {station, corridor, gate_up, gate_down, buffer}."""
    import json

    if isinstance(source, (str, bytes)):
        with open(source, "r", encoding="utf-8") as f:
            doc = json.load(f)
    else:
        doc = json.load(source) if hasattr(source, "read") else source
    parts: Dict[str, Dict[str, object]] = {}
    for feat in doc.get("features", []):
        props = feat.get("properties", {})
        sid = str(props["site_id"])
        role = props["role"]
        geom = feat["geometry"]
        if role == "station":
            lon, lat = geom["coordinates"]
            parts.setdefault(sid, {})[role] = (float(lat), float(lon))
        else:
            ring = geom["coordinates"][0]
            parts.setdefault(sid, {})[role] = GeoPolygon(
                tuple((float(lat), float(lon)) for lon, lat in ring))
    sites = []
    for sid in sorted(parts):
        p = parts[sid]
        missing = {"station", "corridor", "gate_up", "gate_down", "buffer"} - set(p)
        if missing:
            raise DomainError(f"WIM site {sid}: missing roles {sorted(missing)}")
        sites.append(WimSite(sid, p["station"], p["corridor"], p["gate_up"],
                             p["gate_down"], p["buffer"]))
    return sites

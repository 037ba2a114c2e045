"""Trip file parsing, outlier filtering, descriptive statistics, trip chaining.

File schemas:
  CSV  — one row per waypoint, header required:
         trip_id,device_id,mode,weight_class,provider,lat,lon,t_ms
         Rows of one trip must be contiguous; lat/lon carry >=6 decimals.
  JSONL — one trip object per line:
         {"trip_id":..., "device_id":..., "mode":..., "weight_class":...,
          "provider":..., "waypoints": [[lat, lon, t_ms], ...]}
Malformed records are counted and skipped; a batch never aborts on bad rows.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

from .core import (
    DomainError,
    GeoPolygon,
    Mode,
    Provider,
    Trip,
    Waypoint,
    WeightClass,
    haversine,
    point_in_polygon,
    segment_speed,
)

DEFAULT_VMAX_MPS = 67.0  # ~150 mph; well above legal speeds, catches GPS jumps


class TripFormat(Enum):
    CSV = "csv"
    JSONL = "jsonl"


class RegionRelation(Enum):
    INTERNAL = "Internal"
    OUTBOUND = "Outbound"
    INBOUND = "Inbound"
    THROUGH = "Through"
    EXTERNAL = "External"


@dataclass
class IngestReport:
    """Counters describing one parse pass; merged associatively across workers."""

    trips_read: int = 0
    trips_kept: int = 0
    trips_rejected: int = 0
    waypoints_read: int = 0
    waypoints_dropped_as_outliers: int = 0
    rejection_reasons: Dict[str, int] = field(default_factory=dict)

    def reject(self, reason: str) -> None:
        self.trips_rejected += 1
        self.rejection_reasons[reason] = self.rejection_reasons.get(reason, 0) + 1

    def merge(self, other: "IngestReport") -> "IngestReport":
        out = IngestReport(
            trips_read=self.trips_read + other.trips_read,
            trips_kept=self.trips_kept + other.trips_kept,
            trips_rejected=self.trips_rejected + other.trips_rejected,
            waypoints_read=self.waypoints_read + other.waypoints_read,
            waypoints_dropped_as_outliers=(
                self.waypoints_dropped_as_outliers + other.waypoints_dropped_as_outliers
            ),
            rejection_reasons=dict(self.rejection_reasons),
        )
        for k, v in other.rejection_reasons.items():
            out.rejection_reasons[k] = out.rejection_reasons.get(k, 0) + v
        return out

    def to_json(self) -> str:
        return json.dumps(
            {
                "trips_read": self.trips_read,
                "trips_kept": self.trips_kept,
                "trips_rejected": self.trips_rejected,
                "waypoints_read": self.waypoints_read,
                "waypoints_dropped_as_outliers": self.waypoints_dropped_as_outliers,
                "rejection_reasons": self.rejection_reasons,
            },
            sort_keys=True,
        )


@dataclass(frozen=True, slots=True)
class TripStats:
    duration_s: float
    length_m: float
    n_waypoints: int
    median_lapse_s: float
    median_spacing_m: float


def lower_median(values: Sequence[float]) -> float:
    """Median with the lower-of-two convention for even counts."""
    if not values:
        raise DomainError("median of empty sequence")
    s = sorted(values)
    return s[(len(s) - 1) // 2]


def _build_trip(trip_id, device_id, mode, weight_class, provider, wps) -> Trip:
    return Trip(
        trip_id=trip_id,
        device_id=device_id,
        mode=Mode(mode) if not isinstance(mode, Mode) else mode,
        weight_class=(WeightClass(weight_class)
                      if not isinstance(weight_class, WeightClass) else weight_class),
        provider=Provider(provider) if not isinstance(provider, Provider) else provider,
        waypoints=tuple(wps),
    )


def _parse_csv(stream: io.TextIOBase, report: IngestReport) -> Iterator[Trip]:
    reader = csv.reader(stream)
    header = next(reader, None)
    expected = ["trip_id", "device_id", "mode", "weight_class", "provider",
                "lat", "lon", "t_ms"]
    if header is None or [h.strip() for h in header] != expected:
        raise IOError(f"bad CSV header: {header!r}")

    cur_key: Optional[Tuple[str, ...]] = None
    cur_wps: List[Waypoint] = []
    bad_reason: Optional[str] = None

    def flush() -> Optional[Trip]:
        nonlocal cur_key, cur_wps, bad_reason
        if cur_key is None:
            return None
        report.trips_read += 1
        trip = None
        try:
            if bad_reason is not None:
                report.reject(bad_reason)
            else:
                trip = _build_trip(*cur_key, cur_wps)
                report.trips_kept += 1
        except (DomainError, ValueError) as e:
            report.reject(_reason(e))
        cur_key, cur_wps, bad_reason = None, [], None
        return trip

    for row in reader:
        if not row:
            continue
        key = tuple(row[:5]) if len(row) >= 8 else None
        if key != cur_key:
            t = flush()
            if t is not None:
                yield t
            cur_key = key
        if key is None:
            report.trips_read += 1
            report.reject("malformed waypoint rows")
            cur_key = None
            continue
        report.waypoints_read += 1
        try:
            cur_wps.append(Waypoint(float(row[5]), float(row[6]), int(row[7])))
        except (DomainError, ValueError) as e:
            # whole trip is rejected once, at flush; keep the first reason
            if bad_reason is None:
                bad_reason = _reason(e)
    t = flush()
    if t is not None:
        yield t


def _reason(e: Exception) -> str:
    msg = str(e)
    if "latitude" in msg or "longitude" in msg:
        return "coordinate bounds"
    if "timestamp" in msg and "decrease" not in msg:
        return "bad timestamp"
    if "decrease" in msg:
        return "timestamps decrease"
    if ">=2 waypoints" in msg:
        return "too few waypoints"
    return "invalid record"


def _parse_jsonl(stream: io.TextIOBase, report: IngestReport) -> Iterator[Trip]:
    for line in stream:
        line = line.strip()
        if not line:
            continue
        report.trips_read += 1
        try:
            obj = json.loads(line)
            wps = [Waypoint(float(a), float(b), int(t)) for a, b, t in obj["waypoints"]]
            report.waypoints_read += len(wps)
            trip = _build_trip(obj["trip_id"], obj["device_id"], obj.get("mode", "Unknown"),
                               obj.get("weight_class", "Unknown"),
                               obj.get("provider", "Unknown"), wps)
        except (KeyError, TypeError, ValueError, DomainError) as e:
            report.reject(_reason(e) if isinstance(e, (DomainError, ValueError)) else "invalid record")
            continue
        report.trips_kept += 1
        yield trip


def parse_trips(source, fmt: TripFormat) -> Tuple[Iterator[Trip], IngestReport]:
    """Stream trips out of a text file object or path.

    Returns a lazy iterator plus the report object, which is complete only
    after the iterator is exhausted.
    """
    if isinstance(source, (str, bytes)):
        source = open(source, "r", encoding="utf-8")
    report = IngestReport()
    if fmt == TripFormat.CSV:
        return _parse_csv(source, report), report
    if fmt == TripFormat.JSONL:
        return _parse_jsonl(source, report), report
    raise DomainError(f"unknown trip format: {fmt!r}")


def serialize_trips_csv(trips: Iterable[Trip], stream: io.TextIOBase) -> None:
    """Inverse of the CSV parser; coordinates keep six decimal digits minimum."""
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(["trip_id", "device_id", "mode", "weight_class", "provider",
                "lat", "lon", "t_ms"])
    for t in trips:
        head = [t.trip_id, t.device_id, t.mode.value, t.weight_class.value,
                t.provider.value]
        for p in t.waypoints:
            w.writerow(head + [f"{p.lat:.6f}", f"{p.lon:.6f}", p.t])


def filter_outlier_waypoints(trip: Trip, vmax: float = DEFAULT_VMAX_MPS) -> Tuple[Optional[Trip], int]:
    """Drop waypoints implying implausible speeds from the last kept point.

    Greedy forward scan; the first waypoint is always kept. Returns
    (filtered trip, dropped count); the trip is None when fewer than two
    waypoints survive.
    """
    if vmax <= 0:
        raise DomainError("vmax must be positive")
    kept = [trip.waypoints[0]]
    dropped = 0
    for wp in trip.waypoints[1:]:
        prev = kept[-1]
        if wp.t == prev.t:
            # zero lapse: identical position is fine, displacement is not
            if haversine(prev, wp) > 0:
                dropped += 1
                continue
            kept.append(wp)
            continue
        if segment_speed(prev, wp) > vmax:
            dropped += 1
            continue
        kept.append(wp)
    if len(kept) < 2:
        return None, dropped
    if dropped == 0:
        return trip, 0
    return _build_trip(trip.trip_id, trip.device_id, trip.mode,
                       trip.weight_class, trip.provider, kept), dropped


def trip_stats(trip: Trip) -> TripStats:
    wps = trip.waypoints
    lapses = [(b.t - a.t) / 1000.0 for a, b in zip(wps, wps[1:])]
    spacings = [haversine(a, b) for a, b in zip(wps, wps[1:])]
    return TripStats(
        duration_s=trip.duration_s,
        length_m=sum(spacings),
        n_waypoints=len(wps),
        median_lapse_s=lower_median(lapses),
        median_spacing_m=lower_median(spacings),
    )


@dataclass(frozen=True)
class CorpusSummary:
    """Quartiles and fixed-width histograms over a trip-stats stream."""

    n_trips: int
    quartiles: Dict[str, Tuple[float, float, float]]  # field -> (q1, median, q3)
    histograms: Dict[str, List[Tuple[float, float, int]]]  # (lo, hi, count)


_SUMMARY_FIELDS = ("duration_s", "length_m", "median_lapse_s", "median_spacing_m")


def _quartiles(values: List[float]) -> Tuple[float, float, float]:
    s = sorted(values)
    n = len(s)
    return (s[(n - 1) // 4], s[(n - 1) // 2], s[(3 * (n - 1)) // 4])


def _histogram(values: List[float], bins: int = 20) -> List[Tuple[float, float, int]]:
    lo, hi = min(values), max(values)
    if hi == lo:
        return [(lo, hi, len(values))]
    width = (hi - lo) / bins
    counts = [0] * bins
    for v in values:
        i = min(int((v - lo) / width), bins - 1)
        counts[i] += 1
    return [(lo + i * width, lo + (i + 1) * width, c) for i, c in enumerate(counts)]


def summarize_corpus(stats: Iterable[TripStats], bins: int = 20) -> CorpusSummary:
    """Exact full-sort quantiles; fine up to ~1e7 records.

    Above that an approximate sketch would be needed; this build targets
    desk-scale corpora and sorts exactly.
    """
    acc: Dict[str, List[float]] = {f: [] for f in _SUMMARY_FIELDS}
    n = 0
    for st in stats:
        n += 1
        for f in _SUMMARY_FIELDS:
            acc[f].append(getattr(st, f))
    if n == 0:
        raise DomainError("empty corpus")
    return CorpusSummary(
        n_trips=n,
        quartiles={f: _quartiles(v) for f, v in acc.items()},
        histograms={f: _histogram(v, bins) for f, v in acc.items()},
    )


def chain_device_trips(trips: Iterable[Trip], max_gap_s: float = 600.0) -> List[List[Trip]]:
    """Group each device's trips into chains split at idle gaps > max_gap_s.

    Vendors reset a trip after ~10 min idle, so 600 s is the default gap.
    """
    by_device: Dict[str, List[Trip]] = {}
    for t in trips:
        by_device.setdefault(t.device_id, []).append(t)
    chains: List[List[Trip]] = []
    for device_id in sorted(by_device):
        ordered = sorted(by_device[device_id], key=lambda t: (t.start_ms, t.trip_id))
        chain = [ordered[0]]
        for t in ordered[1:]:
            if (t.start_ms - chain[-1].end_ms) / 1000.0 <= max_gap_s:
                chain.append(t)
            else:
                chains.append(chain)
                chain = [t]
        chains.append(chain)
    return chains


def classify_trip_region(trip: Trip, region: GeoPolygon) -> RegionRelation:
    """Relate a trip to a region: Internal / Outbound / Inbound / Through / External."""
    inside = [point_in_polygon(wp, region) for wp in trip.waypoints]
    if all(inside):
        return RegionRelation.INTERNAL
    if inside[0] and not inside[-1]:
        return RegionRelation.OUTBOUND
    if not inside[0] and inside[-1]:
        return RegionRelation.INBOUND
    if inside[0] and inside[-1]:
        # both endpoints in but an excursion outside: counted Internal so the
        # five labels stay a partition
        return RegionRelation.INTERNAL
    if any(inside):
        return RegionRelation.THROUGH
    return RegionRelation.EXTERNAL

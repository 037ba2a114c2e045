"""Hidden-Markov map matching with Viterbi decoding.

Emission: log p ~ -d^2 / (2 sigma_gps^2) for projection distance d.
Transition: log p ~ -|route_dist - great_circle_dist| / beta.
All arithmetic stays in the log domain so long trips never underflow.

Waypoints without any candidate link split the trace: each segment is
matched independently and the results are concatenated with a gap marker.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .core import DomainError, Trip, haversine
from .network import LinkProjection, RoadNetwork, Route, dedupe_route_nodes


@dataclass(frozen=True, slots=True)
class HmmParams:
    sigma_gps_m: float = 4.07
    beta_m: float = 20.0
    candidate_radius_m: float = 200.0
    max_candidates: int = 8

    def __post_init__(self):
        if min(self.sigma_gps_m, self.beta_m, self.candidate_radius_m) <= 0:
            raise DomainError("HMM parameters must be positive")
        if self.max_candidates < 1:
            raise DomainError("max_candidates must be >= 1")


@dataclass(frozen=True)
class MatchedTrip:
    """A trip resolved to an ordered, router-connected link sequence."""

    trip_id: str
    links: Tuple[Tuple[int, int], ...]  # (link_id, first-entry t_ms)
    projections: Tuple[Optional[LinkProjection], ...]  # per kept waypoint
    log_likelihood: float
    emission_log: float = 0.0
    transition_log: float = 0.0
    gap_after: Tuple[int, ...] = ()  # indices into links where the trace broke


@dataclass
class MatchReport:
    matched: int = 0
    unmatchable: int = 0
    wall_time_s: float = 0.0

    @property
    def trips_per_s(self) -> float:
        return (self.matched + self.unmatchable) / self.wall_time_s if self.wall_time_s else 0.0


def _emission_logp(distance_m: float, sigma: float) -> float:
    return -(distance_m * distance_m) / (2.0 * sigma * sigma)


def _transition_logp(route_m: Optional[float], gc_m: float, beta: float) -> float:
    if route_m is None:
        return -math.inf
    return -abs(route_m - gc_m) / beta


def _node_dists(net: RoadNetwork, node: int, cutoff: float, cache: Dict) -> Dict[int, float]:
    key = ("nd", node)
    entry = cache.get(key)
    if entry is None or entry[0] < cutoff:
        dists = net.node_distances(node, cutoff)
        cache[key] = (cutoff, dists)
        return dists
    return entry[1]


def _route_distance(net: RoadNetwork, a: LinkProjection, b: LinkProjection,
                    gc_m: float, cache: Dict) -> Optional[float]:
    """Network distance between two projections via cached per-node Dijkstra.

    Routes wildly longer than the straight line contribute negligible
    probability, so the search is capped.
    """
    la = net.links[a.link_id]
    lb = net.links[b.link_id]
    if a.link_id == b.link_id:
        delta = b.offset_m - a.offset_m
        if delta >= 0 or not la.oneway:
            return abs(delta)
    cutoff = gc_m + max(2000.0, 10.0 * gc_m)
    exits = [(la.length_m - a.offset_m, la.to_node)]
    if not la.oneway:
        exits.append((a.offset_m, la.from_node))
    entries = [(b.offset_m, lb.from_node)]
    if not lb.oneway:
        entries.append((lb.length_m - b.offset_m, lb.to_node))
    best = math.inf
    for exit_cost, exit_node in exits:
        dists = _node_dists(net, exit_node, cutoff, cache)
        for entry_cost, entry_node in entries:
            d = dists.get(entry_node)
            if d is not None:
                best = min(best, exit_cost + d + entry_cost)
    return best if best < math.inf else None


def _layer_meta(net: RoadNetwork, layer):
    """Per-candidate routing endpoints: (exit list, entry list, link id,
    offset, oneway)."""
    meta = []
    for c in layer:
        l = net.links[c.link_id]
        exits = [(l.length_m - c.offset_m, l.to_node)]
        entries = [(c.offset_m, l.from_node)]
        if not l.oneway:
            exits.append((c.offset_m, l.from_node))
            entries.append((l.length_m - c.offset_m, l.to_node))
        meta.append((exits, entries, c.link_id, c.offset_m, l.oneway))
    return meta


def _viterbi_segment(net: RoadNetwork, wps, cands: List[List[LinkProjection]],
                     p: HmmParams, cache: Dict):
    """Decode one gap-free segment; returns (chosen projections, joint logp,
    emission sum, transition sum)."""
    n = len(cands)
    inv2s2 = 1.0 / (2.0 * p.sigma_gps_m * p.sigma_gps_m)
    beta = p.beta_m
    emis = [[-(c.distance_m * c.distance_m) * inv2s2 for c in layer]
            for layer in cands]
    score = list(emis[0])
    back: List[List[int]] = []
    trans_acc = [0.0] * len(cands[0])
    meta = _layer_meta(net, cands[0])
    neg_inf = -math.inf

    for t in range(1, n):
        gc = haversine(wps[t - 1], wps[t])
        cutoff = gc + max(2000.0, 10.0 * gc)
        prev_meta = meta
        meta = _layer_meta(net, cands[t])
        # one distance-map fetch per previous candidate exit node
        dmaps = [[(cost, _node_dists(net, node, cutoff, cache))
                  for cost, node in m[0]] for m in prev_meta]
        new_score = []
        new_trans = []
        bp = []
        for j, (_, entries, lid_j, off_j, _ow) in enumerate(meta):
            best = neg_inf
            best_i = 0
            best_tr = neg_inf
            for i, (_, _, lid_i, off_i, ow_i) in enumerate(prev_meta):
                si = score[i]
                if si == neg_inf:
                    continue
                route = None
                if lid_i == lid_j:
                    delta = off_j - off_i
                    if delta >= 0 or not ow_i:
                        route = delta if delta >= 0 else -delta
                if route is None:
                    r = math.inf
                    for exit_cost, dists in dmaps[i]:
                        for entry_cost, entry_node in entries:
                            d = dists.get(entry_node)
                            if d is not None:
                                total = exit_cost + d + entry_cost
                                if total < r:
                                    r = total
                    if r == math.inf:
                        continue
                    route = r
                tr = -abs(route - gc) / beta
                s = si + tr
                if s > best:
                    best, best_i, best_tr = s, i, tr
            new_score.append(best + emis[t][j])
            new_trans.append((trans_acc[best_i] + best_tr) if best > neg_inf else neg_inf)
            bp.append(best_i)
        score, trans_acc = new_score, new_trans
        back.append(bp)

    end = max(range(len(score)), key=lambda j: (score[j], -j))
    if score[end] == -math.inf:
        return None
    path = [end]
    for bp in reversed(back):
        path.append(bp[path[-1]])
    path.reverse()
    chosen = [cands[t][path[t]] for t in range(n)]
    emis_sum = sum(emis[t][path[t]] for t in range(n))
    return chosen, score[end], emis_sum, trans_acc[end]


def _expand_links(net: RoadNetwork, wps, chosen: List[LinkProjection],
                  cache: Dict) -> List[Tuple[int, int]]:
    """Full traversed link sequence with first-entry timestamps.

    Consecutive chosen links are joined through the router so the sequence
    is connected; intermediate links inherit the leading waypoint's time.
    """
    seq: List[Tuple[int, int]] = [(chosen[0].link_id, wps[0].t)]
    for t in range(1, len(chosen)):
        a, b = chosen[t - 1], chosen[t]
        if a.link_id == b.link_id:
            seq.append((b.link_id, wps[t].t))
            continue
        gc = haversine(wps[t - 1], wps[t])
        route = net.shortest_path(a, b, cutoff_m=gc + max(2000.0, 10.0 * gc))
        if route is not None and route.links:
            for lid in route.links[:-1]:
                seq.append((lid, wps[t - 1].t))
        seq.append((b.link_id, wps[t].t))
    return dedupe_route_nodes(seq)


def match(trip: Trip, net: RoadNetwork, p: HmmParams = HmmParams(),
          cache: Optional[Dict] = None) -> Optional[MatchedTrip]:
    """Match one trip; returns None when no waypoint has any candidate link.

    `cache` memoizes per-node routing distances; pass a shared dict when
    matching many trips on the same network.
    """
    wps = trip.waypoints
    cands = [net.nearest_links(w.latlon, p.candidate_radius_m, p.max_candidates)
             for w in wps]

    # split into contiguous segments of waypoints that do have candidates
    segments: List[Tuple[int, int]] = []  # [start, end) index ranges
    start = None
    for i, layer in enumerate(cands):
        if layer and start is None:
            start = i
        elif not layer and start is not None:
            segments.append((start, i))
            start = None
    if start is not None:
        segments.append((start, len(cands)))
    if not segments:
        return None

    links: List[Tuple[int, int]] = []
    projections: List[Optional[LinkProjection]] = [None] * len(wps)
    gaps: List[int] = []
    logp = 0.0
    emis_total = 0.0
    trans_total = 0.0
    if cache is None:
        cache = {}
    for k, (s, e) in enumerate(segments):
        result = _viterbi_segment(net, wps[s:e], cands[s:e], p, cache)
        if result is None:
            continue
        chosen, seg_logp, seg_emis, seg_trans = result
        for i, proj in enumerate(chosen):
            projections[s + i] = proj
        seg_links = _expand_links(net, wps[s:e], chosen, cache)
        if links:
            gaps.append(len(links) - 1)
        links.extend(seg_links)
        logp += seg_logp
        emis_total += seg_emis
        trans_total += seg_trans
    if not links:
        return None
    return MatchedTrip(
        trip_id=trip.trip_id,
        links=tuple(dedupe_route_nodes(links)),
        projections=tuple(projections),
        log_likelihood=logp,
        emission_log=emis_total,
        transition_log=trans_total,
        gap_after=tuple(gaps),
    )


def match_batch(trips: Iterable[Trip], net: RoadNetwork,
                p: HmmParams = HmmParams(), workers: int = 1):
    """Match a stream of trips; output ordered by trip_id regardless of the
    worker count, so parallel runs are byte-identical to sequential ones."""
    import time

    t0 = time.monotonic()
    trips = list(trips)
    cache: Dict = {}
    if workers <= 1:
        results = [match(t, net, p, cache) for t in trips]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda t: match(t, net, p, cache), trips))
    report = MatchReport()
    matched: List[MatchedTrip] = []
    for r in results:
        if r is None:
            report.unmatchable += 1
        else:
            report.matched += 1
            matched.append(r)
    matched.sort(key=lambda m: m.trip_id)
    report.wall_time_s = time.monotonic() - t0
    return matched, report


def parse_matched_csv(source) -> List[MatchedTrip]:
    """Read back the CSV form; projections and likelihoods are not stored."""
    import csv

    f = open(source, "r", encoding="utf-8") if isinstance(source, (str, bytes)) else source
    reader = csv.DictReader(f)
    by_trip: Dict[str, List[Tuple[int, int, int]]] = {}
    for row in reader:
        by_trip.setdefault(row["trip_id"], []).append(
            (int(row["seq"]), int(row["link_id"]), int(row["t_entry_ms"])))
    out = []
    for trip_id in sorted(by_trip):
        rows = sorted(by_trip[trip_id])
        out.append(MatchedTrip(
            trip_id=trip_id,
            links=tuple((lid, t) for _seq, lid, t in rows),
            projections=(), log_likelihood=0.0))
    return out


def serialize_matched_csv(matched: Iterable[MatchedTrip], stream) -> None:
    """CSV rows: trip_id, seq, link_id, t_entry_ms."""
    import csv

    w = csv.writer(stream, lineterminator="\n")
    w.writerow(["trip_id", "seq", "link_id", "t_entry_ms"])
    for m in matched:
        for seq, (lid, t) in enumerate(m.links):
            w.writerow([m.trip_id, seq, lid, t])

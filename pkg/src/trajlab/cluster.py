"""Density-based clustering: DBSCAN labeling and OPTICS reachability ordering.

The geographic metric is haversine on raw lat/lon (no projection), so radius
parameters are meters and comparable across study areas. Neighborhood
queries go through a uniform lat/lon bucket grid to stay subquadratic.
Expansion order is fixed by point index, which makes every labeling
deterministic for a given input order.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import EARTH_RADIUS_M, DomainError, LatLon

NOISE = -1


class Role(Enum):
    CORE = "Core"
    BORDER = "Border"
    NOISE = "Noise"


@dataclass(frozen=True, slots=True)
class ClusterParams:
    eps_m: float
    min_pts: int

    def __post_init__(self):
        if self.eps_m <= 0:
            raise DomainError("eps must be positive")
        if self.min_pts < 1:
            raise DomainError("min_pts must be >= 1")


@dataclass(frozen=True)
class ClusterLabeling:
    labels: Tuple[int, ...]  # cluster id >= 0, or NOISE
    roles: Tuple[Role, ...]

    @property
    def n_clusters(self) -> int:
        return len({l for l in self.labels if l != NOISE})

    def noise_indices(self) -> List[int]:
        return [i for i, l in enumerate(self.labels) if l == NOISE]


@dataclass(frozen=True)
class ReachabilityOrdering:
    order: Tuple[int, ...]
    reachability_m: Tuple[float, ...]  # inf = undefined, aligned with `order`
    core_distance_m: Tuple[float, ...]  # aligned with `order`; inf = never core


def _haversine_vec(lat: float, lon: float, lats: np.ndarray, lons: np.ndarray) -> np.ndarray:
    phi1 = math.radians(lat)
    phi2 = np.radians(lats)
    dphi = np.radians(lats - lat)
    dlam = np.radians(lons - lon)
    s = np.sin(dphi / 2) ** 2 + math.cos(phi1) * np.cos(phi2) * np.sin(dlam / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.minimum(1.0, np.sqrt(s)))


class GeoNeighborIndex:
    """Bucket grid over lat/lon supporting radius queries in meters."""

    def __init__(self, points: Sequence[LatLon], cell_m: float):
        self.lats = np.asarray([p[0] for p in points], dtype=float)
        self.lons = np.asarray([p[1] for p in points], dtype=float)
        self.dlat = math.degrees(cell_m / EARTH_RADIUS_M)
        ref = float(np.median(self.lats)) if len(points) else 0.0
        self.dlon = self.dlat / max(0.01, math.cos(math.radians(ref)))
        self.buckets: Dict[Tuple[int, int], List[int]] = {}
        for i in range(len(points)):
            key = (math.floor(self.lats[i] / self.dlat),
                   math.floor(self.lons[i] / self.dlon))
            self.buckets.setdefault(key, []).append(i)

    def query(self, i: int, radius_m: float) -> Tuple[np.ndarray, np.ndarray]:
        """Indices within radius_m of point i (inclusive, self included),
        sorted ascending by index, plus their distances."""
        reach = int(math.ceil(radius_m / EARTH_RADIUS_M / math.radians(self.dlat))) + 1
        r = math.floor(self.lats[i] / self.dlat)
        c = math.floor(self.lons[i] / self.dlon)
        cand: List[int] = []
        for dr in range(-reach, reach + 1):
            for dc in range(-reach, reach + 1):
                cand.extend(self.buckets.get((r + dr, c + dc), ()))
        cand_arr = np.asarray(sorted(cand), dtype=int)
        d = _haversine_vec(self.lats[i], self.lons[i],
                           self.lats[cand_arr], self.lons[cand_arr])
        keep = d <= radius_m
        return cand_arr[keep], d[keep]


def dbscan(points: Sequence[LatLon], params: ClusterParams) -> ClusterLabeling:
    """Standard DBSCAN over the haversine metric.

    Seeds expand in index order; a border point belongs to the first cluster
    that reaches it. Core status counts the point itself.
    """
    n = len(points)
    if n == 0:
        raise DomainError("dbscan: empty input")
    index = GeoNeighborIndex(points, params.eps_m)
    neighbors: List[Optional[np.ndarray]] = [None] * n

    def nbrs(i: int) -> np.ndarray:
        if neighbors[i] is None:
            neighbors[i], _ = index.query(i, params.eps_m)
        return neighbors[i]

    labels = [NOISE] * n
    roles = [Role.NOISE] * n
    cluster = 0
    for seed in range(n):
        if labels[seed] != NOISE:
            continue
        seed_nbrs = nbrs(seed)
        if len(seed_nbrs) < params.min_pts:
            continue
        labels[seed] = cluster
        roles[seed] = Role.CORE
        queue = [j for j in seed_nbrs.tolist() if j != seed]
        qpos = 0
        while qpos < len(queue):
            j = queue[qpos]
            qpos += 1
            if roles[j] == Role.NOISE and labels[j] == NOISE:
                labels[j] = cluster
                jn = nbrs(j)
                if len(jn) >= params.min_pts:
                    roles[j] = Role.CORE
                    queue.extend(k for k in jn.tolist()
                                 if labels[k] == NOISE and k != j)
                else:
                    roles[j] = Role.BORDER
        cluster += 1
    # points reached by no core stay noise
    return ClusterLabeling(tuple(labels), tuple(roles))


def optics(points: Sequence[LatLon], min_pts: int, max_eps_m: float,
           index: Optional[GeoNeighborIndex] = None,
           neighbor_fn: Optional[Callable[[int], Tuple[np.ndarray, np.ndarray]]] = None
           ) -> ReachabilityOrdering:
    """OPTICS ordering with core and reachability distances.

    Priority ties break on the smaller point index, so the ordering is
    deterministic. `neighbor_fn` overrides the geographic index for
    non-point inputs (e.g., trip O-D pairs).
    """
    n = len(points)
    if n == 0:
        raise DomainError("optics: empty input")
    if max_eps_m <= 0:
        raise DomainError("optics: max_eps must be positive")
    if neighbor_fn is None:
        geo = index or GeoNeighborIndex(points, max_eps_m)
        neighbor_fn = lambda i: geo.query(i, max_eps_m)

    processed = [False] * n
    reach = [math.inf] * n
    core_d = [math.inf] * n
    order: List[int] = []
    order_reach: List[float] = []
    order_core: List[float] = []

    def core_distance(idx_arr: np.ndarray, dists: np.ndarray) -> float:
        if len(idx_arr) < min_pts:
            return math.inf
        return float(np.partition(dists, min_pts - 1)[min_pts - 1])

    for start in range(n):
        if processed[start]:
            continue
        # expand one connected component from `start`
        idx_arr, dists = neighbor_fn(start)
        processed[start] = True
        cd = core_distance(idx_arr, dists)
        core_d[start] = cd
        order.append(start)
        order_reach.append(math.inf)
        order_core.append(cd)
        seeds: List[Tuple[float, int]] = []
        if cd != math.inf:
            _optics_update(idx_arr, dists, cd, processed, reach, seeds)
        while seeds:
            r, j = heapq.heappop(seeds)
            if processed[j] or r > reach[j]:
                continue
            jn, jd = neighbor_fn(j)
            processed[j] = True
            jcd = core_distance(jn, jd)
            core_d[j] = jcd
            order.append(j)
            order_reach.append(reach[j])
            order_core.append(jcd)
            if jcd != math.inf:
                _optics_update(jn, jd, jcd, processed, reach, seeds)
    return ReachabilityOrdering(tuple(order), tuple(order_reach), tuple(order_core))


def _optics_update(idx_arr, dists, core_dist, processed, reach, seeds) -> None:
    for j, d in zip(idx_arr.tolist(), dists.tolist()):
        if processed[j]:
            continue
        new_r = max(core_dist, d)
        if new_r < reach[j]:
            reach[j] = new_r
            heapq.heappush(seeds, (new_r, j))


def extract_clusters(ordering: ReachabilityOrdering, threshold_m: float) -> ClusterLabeling:
    """Horizontal-cut extraction from a reachability ordering.

    A new cluster starts where reachability exceeds the threshold and the
    point itself is core at the threshold; points above the threshold that
    are not core become noise.
    """
    if threshold_m <= 0:
        raise DomainError("extract_clusters: threshold must be positive")
    n = len(ordering.order)
    labels = [NOISE] * n
    roles = [Role.NOISE] * n
    cluster = -1
    open_cluster = False
    for pos in range(n):
        idx = ordering.order[pos]
        r = ordering.reachability_m[pos]
        cd = ordering.core_distance_m[pos]
        if r > threshold_m:
            if cd <= threshold_m:
                cluster += 1
                open_cluster = True
                labels[idx] = cluster
                roles[idx] = Role.CORE
            else:
                open_cluster = False
        else:
            if not open_cluster:
                cluster += 1
                open_cluster = True
            labels[idx] = cluster
            roles[idx] = Role.CORE if cd <= threshold_m else Role.BORDER
    return ClusterLabeling(tuple(labels), tuple(roles))


def od_pair_distance(a: Tuple[LatLon, LatLon], b: Tuple[LatLon, LatLon]) -> float:
    """Distance between trip O-D pairs: origin-origin plus dest-dest haversine."""
    from .core import haversine

    return haversine(a[0], b[0]) + haversine(a[1], b[1])


def od_neighbor_fn(pairs: Sequence[Tuple[LatLon, LatLon]], max_eps_m: float):
    """Brute-force vectorized neighbor query over O-D pairs, for OPTICS."""
    o_lats = np.asarray([p[0][0] for p in pairs])
    o_lons = np.asarray([p[0][1] for p in pairs])
    d_lats = np.asarray([p[1][0] for p in pairs])
    d_lons = np.asarray([p[1][1] for p in pairs])

    def fn(i: int):
        d = (_haversine_vec(float(o_lats[i]), float(o_lons[i]), o_lats, o_lons)
             + _haversine_vec(float(d_lats[i]), float(d_lons[i]), d_lats, d_lons))
        keep = np.flatnonzero(d <= max_eps_m)
        return keep, d[keep]

    return fn


def serialize_labeling_csv(labeling: ClusterLabeling, stream) -> None:
    """CSV rows: point_index, cluster_id (-1 for noise), role."""
    import csv

    w = csv.writer(stream, lineterminator="\n")
    w.writerow(["point_index", "cluster_id", "role"])
    for i, (lab, role) in enumerate(zip(labeling.labels, labeling.roles)):
        w.writerow([i, lab, role.value])

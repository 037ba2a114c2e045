"""Road network graph: GeoJSON loading, nearest-link queries, Dijkstra routing.

Input format: a GeoJSON FeatureCollection of LineString features with
properties {link_id, from_node, to_node, oneway}. Node coordinates are
implied by the geometry endpoints (GeoJSON order: [lon, lat]).
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .core import DomainError, LatLon, haversine, local_xy


class NetworkParseError(ValueError):
    """Network file violates the schema; message names the feature index."""


@dataclass(frozen=True, slots=True)
class Link:
    link_id: int
    from_node: int
    to_node: int
    geometry: Tuple[LatLon, ...]  # (lat, lon) vertices, from -> to
    length_m: float
    oneway: bool


@dataclass(frozen=True, slots=True)
class LinkProjection:
    """A point projected onto a link: offset along it plus perpendicular distance."""

    link_id: int
    point: LatLon
    offset_m: float
    distance_m: float


@dataclass(frozen=True)
class Route:
    """Shortest-path result; links in traversal order."""

    links: Tuple[int, ...]
    distance_m: float


class RoadNetwork:
    """Immutable after construction; shared read-only by concurrent matchers."""

    def __init__(self, nodes: Dict[int, LatLon], links: Dict[int, Link],
                 index_cell_m: float = 250.0):
        self.nodes = dict(nodes)
        self.links = dict(links)
        for link in self.links.values():
            if link.from_node not in self.nodes or link.to_node not in self.nodes:
                raise NetworkParseError(f"link {link.link_id}: dangling node reference")
        # adjacency: node -> [(neighbor node, link_id, length)]
        self._adj: Dict[int, List[Tuple[int, int, float]]] = {n: [] for n in self.nodes}
        for link in self.links.values():
            self._adj[link.from_node].append((link.to_node, link.link_id, link.length_m))
            if not link.oneway:
                self._adj[link.to_node].append((link.from_node, link.link_id, link.length_m))
        for lst in self._adj.values():
            lst.sort()
        self._build_spatial_index(index_cell_m)

    # -- spatial index --------------------------------------------------------
    # Link geometry is pre-projected once into a single equirectangular frame
    # (meters), so per-query projection is pure float arithmetic. Candidates
    # come from a uniform grid over link bounding boxes.

    def _build_spatial_index(self, cell_m: float) -> None:
        if self.nodes:
            self._origin = min(self.nodes.values())
        else:
            self._origin = (0.0, 0.0)
        self._dlat_per_m = math.degrees(1.0 / 6_371_008.8)
        self._dlon_per_m = math.degrees(
            1.0 / (6_371_008.8 * math.cos(math.radians(self._origin[0]))))
        self._cell_m = cell_m
        self._cells: Dict[Tuple[int, int], List[int]] = {}
        self._hood: Dict[Tuple[int, int, int], List[int]] = {}
        # per link: segment arrays (x1, y1, dx, dy, seg_len2, cum_offset_m),
        # planar->geodesic length scale, and planar bbox
        self._seg: Dict[int, list] = {}
        self._bbox: Dict[int, Tuple[float, float, float, float]] = {}
        for link in self.links.values():
            xy = [local_xy(p, self._origin) for p in link.geometry]
            segs = []
            cum = 0.0
            for (x1, y1), (x2, y2) in zip(xy, xy[1:]):
                dx, dy = x2 - x1, y2 - y1
                seg_len = math.hypot(dx, dy)
                segs.append((x1, y1, dx, dy, seg_len, cum))
                cum += seg_len
            scale = link.length_m / cum if cum > 0 else 0.0
            self._seg[link.link_id] = (segs, scale)
            xs = [q[0] for q in xy]
            ys = [q[1] for q in xy]
            bbox = (min(xs), min(ys), max(xs), max(ys))
            self._bbox[link.link_id] = bbox
            c0 = math.floor(bbox[0] / cell_m)
            c1 = math.floor(bbox[2] / cell_m)
            r0 = math.floor(bbox[1] / cell_m)
            r1 = math.floor(bbox[3] / cell_m)
            for r in range(r0, r1 + 1):
                for c in range(c0, c1 + 1):
                    self._cells.setdefault((r, c), []).append(link.link_id)

    def _candidate_links(self, x: float, y: float, radius_m: float) -> List[int]:
        reach = int(math.ceil(radius_m / self._cell_m))
        r = math.floor(y / self._cell_m)
        c = math.floor(x / self._cell_m)
        key = (r, c, reach)
        hood = self._hood.get(key)
        if hood is None:
            seen = set()
            hood = []
            for dr in range(-reach, reach + 1):
                for dc in range(-reach, reach + 1):
                    for lid in self._cells.get((r + dr, c + dc), ()):
                        if lid not in seen:
                            seen.add(lid)
                            hood.append(lid)
            self._hood[key] = hood
        return hood

    # -- queries --------------------------------------------------------------

    def _project_xy(self, x: float, y: float, link_id: int):
        """(squared distance, planar (qx, qy), offset in meters) of the
        closest point on the link."""
        segs, scale = self._seg[link_id]
        best_d2 = math.inf
        best_q = (0.0, 0.0)
        best_off = 0.0
        for x1, y1, dx, dy, seg_len, cum in segs:
            if seg_len > 0:
                t = ((x - x1) * dx + (y - y1) * dy) / (seg_len * seg_len)
                if t < 0.0:
                    t = 0.0
                elif t > 1.0:
                    t = 1.0
            else:
                t = 0.0
            qx, qy = x1 + t * dx, y1 + t * dy
            d2 = (x - qx) * (x - qx) + (y - qy) * (y - qy)
            if d2 < best_d2:
                best_d2 = d2
                best_q = (qx, qy)
                best_off = cum + t * seg_len
        offset = min(self.links[link_id].length_m, best_off * scale)
        return best_d2, best_q, offset

    def _xy_to_latlon(self, x: float, y: float) -> LatLon:
        return (self._origin[0] + y * self._dlat_per_m,
                self._origin[1] + x * self._dlon_per_m)

    def project_onto_link(self, p: LatLon, link_id: int) -> LinkProjection:
        """Closest point on the link's polyline, with offset from the from-node."""
        x, y = local_xy(p, self._origin)
        d2, q, offset = self._project_xy(x, y, link_id)
        return LinkProjection(link_id, self._xy_to_latlon(*q), offset, math.sqrt(d2))

    def nearest_links(self, p: LatLon, radius_m: float, k: int) -> List[LinkProjection]:
        """Up to k link projections within radius_m, ascending distance.

        Ties broken by link id; result identical to a brute-force scan.
        """
        x, y = local_xy(p, self._origin)
        r2 = radius_m * radius_m
        hits = []
        for lid in self._candidate_links(x, y, radius_m):
            bx0, by0, bx1, by1 = self._bbox[lid]
            if (x < bx0 - radius_m or x > bx1 + radius_m
                    or y < by0 - radius_m or y > by1 + radius_m):
                continue
            d2, q, offset = self._project_xy(x, y, lid)
            if d2 <= r2:
                hits.append((d2, lid, q, offset))
        hits.sort(key=lambda h: (h[0], h[1]))
        return [LinkProjection(lid, self._xy_to_latlon(*q), offset, math.sqrt(d2))
                for d2, lid, q, offset in hits[:k]]

    def _dijkstra(self, sources: List[Tuple[float, int]],
                  targets: Dict[int, float],
                  cutoff_m: Optional[float] = None) -> Tuple[Optional[int], float, Dict[int, Tuple[int, int]]]:
        """Multi-source Dijkstra to the cheapest target.

        sources: (initial cost, node); targets: node -> terminal cost added on
        arrival. Returns (best target node, total cost, predecessor map of
        node -> (prev node, link id)). Tie-breaks by smaller node id.
        """
        dist: Dict[int, float] = {}
        pred: Dict[int, Tuple[int, int]] = {}
        pq = [(c, n) for c, n in sources]
        heapq.heapify(pq)
        for c, n in sources:
            if n not in dist or c < dist[n]:
                dist[n] = c
        best_target = None
        best_total = math.inf
        while pq:
            d, u = heapq.heappop(pq)
            if d > dist.get(u, math.inf):
                continue
            if best_total < d:
                break  # every remaining path is at least d
            if u in targets:
                total = d + targets[u]
                if total < best_total or (total == best_total and
                                          (best_target is None or u < best_target)):
                    best_total = total
                    best_target = u
            if cutoff_m is not None and d > cutoff_m:
                continue
            for v, lid, w in self._adj[u]:
                nd = d + w
                if nd < dist.get(v, math.inf):
                    dist[v] = nd
                    pred[v] = (u, lid)
                    heapq.heappush(pq, (nd, v))
        return best_target, best_total, pred

    def shortest_path(self, a: LinkProjection, b: LinkProjection,
                      cutoff_m: Optional[float] = None) -> Optional[Route]:
        """Route from projection a to projection b honoring one-way flags.

        Partial first/last link offsets are included in the distance. Returns
        None when b is unreachable. The same-position case yields an empty
        route of distance 0.
        """
        la = self.links[a.link_id]
        lb = self.links[b.link_id]
        if a.link_id == b.link_id:
            delta = b.offset_m - a.offset_m
            if delta == 0:
                return Route((), 0.0)
            if delta > 0 or not la.oneway:
                return Route((a.link_id,), abs(delta))
            # oneway link, b behind a: must loop through the network

        # entry options: cost to leave a's link at one of its end nodes
        sources = [(la.length_m - a.offset_m, la.to_node)]
        if not la.oneway:
            sources.append((a.offset_m, la.from_node))
        # exit options: terminal cost from an end node of b's link
        targets = {lb.from_node: b.offset_m}
        if not lb.oneway:
            prevc = targets.get(lb.to_node, math.inf)
            targets[lb.to_node] = min(prevc, lb.length_m - b.offset_m)

        node, total, pred = self._dijkstra(sources, targets, cutoff_m)
        loop = None
        if node is not None:
            # reconstruct node chain back to whichever source it came from
            chain = []
            cur = node
            while cur in pred:
                prev, lid = pred[cur]
                chain.append(lid)
                cur = prev
            chain.reverse()
            links = [a.link_id] + chain + [b.link_id]
            # collapse duplicate first/last when the route enters b's link
            # directly or stays on a's link
            loop = Route(tuple(links), total)
        if a.link_id == b.link_id and la.oneway:
            # compare against nothing else; loop is the only option
            return loop
        return loop

    def node_distances(self, node: int, cutoff_m: float) -> Dict[int, float]:
        """Bounded single-source Dijkstra: distances to all nodes within
        cutoff_m of `node` along directed links."""
        dist = {node: 0.0}
        pq = [(0.0, node)]
        while pq:
            d, u = heapq.heappop(pq)
            if d > dist.get(u, math.inf) or d > cutoff_m:
                continue
            for v, _lid, w in self._adj[u]:
                nd = d + w
                if nd <= cutoff_m and nd < dist.get(v, math.inf):
                    dist[v] = nd
                    heapq.heappush(pq, (nd, v))
        return dist

    def stats(self) -> Dict[str, int]:
        return {"n_nodes": len(self.nodes), "n_links": len(self.links)}


def _polyline_length(geometry: Sequence[LatLon]) -> float:
    return sum(haversine(a, b) for a, b in zip(geometry, geometry[1:]))


def load_network(source) -> RoadNetwork:
    """Load a RoadNetwork from a GeoJSON file path or file object."""
    if isinstance(source, (str, bytes)):
        with open(source, "r", encoding="utf-8") as f:
            doc = json.load(f)
    elif hasattr(source, "read"):
        doc = json.load(source)
    else:
        doc = source
    if doc.get("type") != "FeatureCollection":
        raise NetworkParseError("expected a GeoJSON FeatureCollection")
    nodes: Dict[int, LatLon] = {}
    links: Dict[int, Link] = {}
    for i, feat in enumerate(doc.get("features", [])):
        try:
            props = feat["properties"]
            lid = int(props["link_id"])
            fn = int(props["from_node"])
            tn = int(props["to_node"])
            oneway = bool(props["oneway"])
            coords = feat["geometry"]["coordinates"]
            if feat["geometry"]["type"] != "LineString" or len(coords) < 2:
                raise KeyError("geometry")
        except (KeyError, TypeError, ValueError):
            raise NetworkParseError(f"feature {i}: missing or invalid fields")
        geometry = tuple((float(lat), float(lon)) for lon, lat in coords)
        for node_id, pt in ((fn, geometry[0]), (tn, geometry[-1])):
            if node_id in nodes and haversine(nodes[node_id], pt) > 1.0:
                raise NetworkParseError(
                    f"feature {i}: node {node_id} placed at conflicting coordinates")
            nodes.setdefault(node_id, pt)
        if lid in links:
            raise NetworkParseError(f"feature {i}: duplicate link_id {lid}")
        links[lid] = Link(lid, fn, tn, geometry, _polyline_length(geometry), oneway)
    return RoadNetwork(nodes, links)


def dedupe_route_nodes(matched: Sequence[Tuple[int, int]]) -> List[Tuple[int, int]]:
    """Collapse consecutive repeats of the same link id, keeping the earliest
    timestamp of each run."""
    out: List[Tuple[int, int]] = []
    for link_id, t in matched:
        if out and out[-1][0] == link_id:
            continue
        out.append((link_id, t))
    return out

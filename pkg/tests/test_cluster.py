import io
import math
import random

import numpy as np
import pytest

from trajlab.core import haversine
from trajlab.cluster import (
    NOISE,
    ClusterParams,
    GeoNeighborIndex,
    Role,
    dbscan,
    extract_clusters,
    od_neighbor_fn,
    od_pair_distance,
    optics,
    serialize_labeling_csv,
)
from trajlab import synth


def random_points(rng, n, n_blobs=3, blob_m=300.0, extent_m=5000.0):
    """A few dense blobs plus uniform background noise."""
    centers = [(synth.BASE_LAT + synth.meters_to_dlat(rng.uniform(0, extent_m)),
                synth.BASE_LON + synth.meters_to_dlon(rng.uniform(0, extent_m)))
               for _ in range(n_blobs)]
    pts = []
    for _ in range(n):
        if rng.random() < 0.75:
            c = rng.choice(centers)
            pts.append((c[0] + synth.meters_to_dlat(rng.gauss(0, blob_m)),
                        c[1] + synth.meters_to_dlon(rng.gauss(0, blob_m))))
        else:
            pts.append((synth.BASE_LAT + synth.meters_to_dlat(rng.uniform(0, extent_m)),
                        synth.BASE_LON + synth.meters_to_dlon(rng.uniform(0, extent_m))))
    return pts


def reference_dbscan_sets(points, eps_m, min_pts):
    """Brute-force O(n^2) reference: core set, noise set, and the partition of
    core points into clusters (connected components of the core-core graph).
    Border membership is order-dependent in DBSCAN, so the reference only
    constrains it to *some* adjacent cluster."""
    n = len(points)
    d = [[haversine(points[i], points[j]) for j in range(n)] for i in range(n)]
    nbrs = [[j for j in range(n) if d[i][j] <= eps_m] for i in range(n)]
    core = {i for i in range(n) if len(nbrs[i]) >= min_pts}
    # components over cores
    comp = {}
    cid = 0
    for i in sorted(core):
        if i in comp:
            continue
        stack = [i]
        comp[i] = cid
        while stack:
            u = stack.pop()
            for v in nbrs[u]:
                if v in core and v not in comp:
                    comp[v] = cid
                    stack.append(v)
        cid += 1
    noise = {i for i in range(n) if i not in core
             and not any(j in core for j in nbrs[i])}
    return core, noise, comp


def check_against_reference(points, labeling, eps_m, min_pts):
    core, noise, comp = reference_dbscan_sets(points, eps_m, min_pts)
    got_core = {i for i, r in enumerate(labeling.roles) if r == Role.CORE}
    got_noise = {i for i, l in enumerate(labeling.labels) if l == NOISE}
    assert got_core == core
    assert got_noise == noise
    # core labels must be a relabeling of the reference components
    mapping = {}
    for i in core:
        got = labeling.labels[i]
        want = comp[i]
        assert mapping.setdefault(want, got) == got
    assert len(set(mapping.values())) == len(mapping)
    # border points: member of a cluster owning a core within eps
    for i, (lab, role) in enumerate(zip(labeling.labels, labeling.roles)):
        if role == Role.BORDER:
            assert lab != NOISE
            assert any(labeling.labels[j] == lab and j in core
                       for j in range(len(points))
                       if haversine(points[i], points[j]) <= eps_m)


class TestDbscan:
    def test_matches_brute_force_reference_many_datasets(self):
        rng = random.Random(2024)
        for trial in range(60):
            n = rng.randint(10, 120)
            pts = random_points(rng, n)
            eps = rng.choice([200.0, 400.0, 800.0])
            min_pts = rng.choice([3, 5, 8])
            labeling = dbscan(pts, ClusterParams(eps, min_pts))
            check_against_reference(pts, labeling, eps, min_pts)

    def test_single_blob_one_cluster(self):
        rng = random.Random(1)
        c = (synth.BASE_LAT, synth.BASE_LON)
        pts = [(c[0] + synth.meters_to_dlat(rng.gauss(0, 50)),
                c[1] + synth.meters_to_dlon(rng.gauss(0, 50)))
               for _ in range(40)]
        labeling = dbscan(pts, ClusterParams(500.0, 5))
        assert labeling.n_clusters == 1
        assert labeling.noise_indices() == []

    def test_all_isolated_all_noise(self):
        pts = [(synth.BASE_LAT + synth.meters_to_dlat(i * 5000.0), synth.BASE_LON)
               for i in range(10)]
        labeling = dbscan(pts, ClusterParams(100.0, 2))
        assert labeling.n_clusters == 0
        assert set(labeling.noise_indices()) == set(range(10))

    def test_empty_raises(self):
        from trajlab.core import DomainError
        with pytest.raises(DomainError):
            dbscan([], ClusterParams(100.0, 2))

    def test_deterministic(self):
        rng = random.Random(9)
        pts = random_points(rng, 80)
        p = ClusterParams(400.0, 4)
        assert dbscan(pts, p) == dbscan(pts, p)


class TestNeighborIndex:
    def test_matches_brute_force(self):
        rng = random.Random(8)
        pts = random_points(rng, 150)
        index = GeoNeighborIndex(pts, 400.0)
        for i in range(len(pts)):
            got_idx, got_d = index.query(i, 400.0)
            want = [(j, haversine(pts[i], pts[j])) for j in range(len(pts))
                    if haversine(pts[i], pts[j]) <= 400.0]
            assert got_idx.tolist() == [j for j, _ in want]
            assert np.allclose(got_d, [d for _, d in want])

    def test_self_included(self):
        pts = [(synth.BASE_LAT, synth.BASE_LON)] * 3
        index = GeoNeighborIndex(pts, 100.0)
        idx, d = index.query(1, 100.0)
        assert 1 in idx.tolist()


class TestOptics:
    def test_ordering_is_permutation(self):
        rng = random.Random(3)
        pts = random_points(rng, 100)
        ordering = optics(pts, min_pts=5, max_eps_m=1000.0)
        assert sorted(ordering.order) == list(range(100))
        assert len(ordering.reachability_m) == 100
        assert len(ordering.core_distance_m) == 100

    def test_first_point_of_component_has_undefined_reachability(self):
        rng = random.Random(4)
        pts = random_points(rng, 50)
        ordering = optics(pts, min_pts=5, max_eps_m=1000.0)
        assert ordering.reachability_m[0] == math.inf

    def test_reachability_at_least_core_distance_of_predecessor_bound(self):
        # every finite reachability is >= the min core distance seen so far
        rng = random.Random(5)
        pts = random_points(rng, 80)
        ordering = optics(pts, min_pts=4, max_eps_m=1500.0)
        finite_cd = [c for c in ordering.core_distance_m if c < math.inf]
        if finite_cd:
            lo = min(finite_cd)
            for r in ordering.reachability_m:
                if r < math.inf:
                    assert r >= lo - 1e-9

    def test_extraction_matches_dbscan_on_well_separated_blobs(self):
        # far-apart tight blobs: horizontal cut and DBSCAN agree exactly
        rng = random.Random(6)
        pts = []
        for b in range(3):
            c = (synth.BASE_LAT + synth.meters_to_dlat(b * 10_000.0), synth.BASE_LON)
            pts.extend((c[0] + synth.meters_to_dlat(rng.gauss(0, 60)),
                        c[1] + synth.meters_to_dlon(rng.gauss(0, 60)))
                       for _ in range(25))
        eps, min_pts = 500.0, 5
        ordering = optics(pts, min_pts, max_eps_m=4 * eps)
        extracted = extract_clusters(ordering, eps)
        flat = dbscan(pts, ClusterParams(eps, min_pts))
        # same grouping up to label permutation
        def canon(labels):
            seen = {}
            out = []
            for l in labels:
                if l == NOISE:
                    out.append(NOISE)
                else:
                    out.append(seen.setdefault(l, len(seen)))
            return out
        assert canon(extracted.labels) == canon(flat.labels)

    def test_deterministic(self):
        rng = random.Random(11)
        pts = random_points(rng, 60)
        a = optics(pts, 4, 1000.0)
        b = optics(pts, 4, 1000.0)
        assert a == b


class TestOdPairs:
    def test_distance_is_sum_of_endpoints(self):
        a = ((39.0, -76.8), (39.1, -76.8))
        b = ((39.0, -76.7), (39.1, -76.7))
        want = haversine(a[0], b[0]) + haversine(a[1], b[1])
        assert od_pair_distance(a, b) == pytest.approx(want)
        assert od_pair_distance(a, b) == pytest.approx(od_pair_distance(b, a))

    def test_neighbor_fn_matches_pairwise(self):
        rng = random.Random(13)
        pairs = [((synth.BASE_LAT + synth.meters_to_dlat(rng.uniform(0, 3000)),
                   synth.BASE_LON),
                  (synth.BASE_LAT,
                   synth.BASE_LON + synth.meters_to_dlon(rng.uniform(0, 3000))))
                 for _ in range(50)]
        fn = od_neighbor_fn(pairs, 2000.0)
        for i in range(len(pairs)):
            idx, d = fn(i)
            want = [j for j in range(len(pairs))
                    if od_pair_distance(pairs[i], pairs[j]) <= 2000.0]
            assert idx.tolist() == want


class TestSerialization:
    def test_csv_shape(self):
        rng = random.Random(14)
        pts = random_points(rng, 30)
        labeling = dbscan(pts, ClusterParams(400.0, 4))
        buf = io.StringIO()
        serialize_labeling_csv(labeling, buf)
        lines = buf.getvalue().strip().split("\n")
        assert lines[0] == "point_index,cluster_id,role"
        assert len(lines) == 31

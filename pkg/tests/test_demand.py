import io
import random

import pytest

from trajlab.core import DomainError, GridSpec, Mode, Provider, Trip, Waypoint, WeightClass
from trajlab.demand import (
    AtrRecord,
    ZoneLevel,
    aggregate_matrix,
    build_od_matrix,
    corridor_analysis,
    derive_expansion_factor,
    estimate_penetration,
    expand_matrix,
    export_chord_table,
    load_zones_geojson,
    origin_heatmap,
    serialize_od_csv,
    UNASSIGNED,
)
from trajlab.mapmatch import MatchedTrip
from trajlab import synth


@pytest.fixture(scope="module")
def zone_world():
    doc, taz_to_county, county_to_state = synth.make_zone_hierarchy(20_000.0)
    return {
        "taz": load_zones_geojson(doc, ZoneLevel.TAZ),
        "county": load_zones_geojson(doc, ZoneLevel.COUNTY),
        "state": load_zones_geojson(doc, ZoneLevel.STATE),
        "taz_to_county": taz_to_county,
        "county_to_state": county_to_state,
    }


class TestExpansion:
    def test_paper_value(self):
        assert derive_expansion_factor(0.0186) == 54

    def test_simple_reciprocals(self):
        assert derive_expansion_factor(0.5) == 2
        assert derive_expansion_factor(1.0) == 1

    def test_bounds(self):
        with pytest.raises(DomainError):
            derive_expansion_factor(0.0)
        with pytest.raises(DomainError):
            derive_expansion_factor(1.5)

    def test_expand_matrix_keeps_raw_counts(self, zone_world):
        trips = synth.gen_zone_trips(50, 20_000.0, random.Random(1))
        m = build_od_matrix(trips, zone_world["taz"])
        e = expand_matrix(m, 54)
        assert e.counts == m.counts
        assert all(e.expanded[k] == 54 * v for k, v in e.counts.items())
        with pytest.raises(DomainError):
            expand_matrix(m, 0)


class TestOdMatrix:
    def test_conservation_all_levels(self, zone_world):
        trips = synth.gen_zone_trips(2000, 20_000.0, random.Random(2))
        for level in ("taz", "county", "state"):
            m = build_od_matrix(trips, zone_world[level])
            assert m.total + m.unassigned == 2000

    def test_hierarchy_aggregation_equals_direct(self, zone_world):
        trips = synth.gen_zone_trips(2000, 20_000.0, random.Random(3))
        county = build_od_matrix(trips, zone_world["county"])
        state_direct = build_od_matrix(trips, zone_world["state"])
        state_rolled = aggregate_matrix(county, zone_world["county_to_state"],
                                        ZoneLevel.STATE)
        assert state_rolled.counts == state_direct.counts
        assert state_rolled.unassigned == state_direct.unassigned

    def test_endpoint_outside_zones_is_unassigned(self, zone_world):
        t = Trip("t", "d", Mode.VEHICLE, WeightClass.UNKNOWN, Provider.FLEET,
                 (Waypoint(synth.BASE_LAT + 0.001, synth.BASE_LON + 0.001, 1000),
                  Waypoint(10.0, 10.0, 2000)))
        m = build_od_matrix([t], zone_world["taz"])
        assert m.total == 0
        assert m.unassigned == 1

    def test_merge_adds_counts(self, zone_world):
        trips = synth.gen_zone_trips(100, 20_000.0, random.Random(4))
        m1 = build_od_matrix(trips[:50], zone_world["state"])
        m2 = build_od_matrix(trips[50:], zone_world["state"])
        merged = m1.merge(m2)
        whole = build_od_matrix(trips, zone_world["state"])
        assert merged.counts == whole.counts


def hour_key(h):
    return f"2015-10-05T{h:02d}"


class TestPenetration:
    def mk_matched(self, link_id, hour, n):
        t0 = 1_444_003_200_000 + hour * 3_600_000  # 2015-10-05T00 UTC
        return [MatchedTrip(f"m{hour}_{i}", ((link_id, t0 + i * 1000),), (), 0.0)
                for i in range(n)]

    def test_known_ratio(self):
        atr = [AtrRecord("S1", 7, hour_key(8), 100)]
        matched = self.mk_matched(7, 8, 2)
        summary = estimate_penetration(matched, atr)
        assert summary.per_station["S1"].hourly_pr == {hour_key(8): 0.02}
        assert summary.median_pr == 0.02

    def test_pr_above_one_flagged_not_clamped(self):
        atr = [AtrRecord("S1", 7, hour_key(8), 2)]
        matched = self.mk_matched(7, 8, 5)
        summary = estimate_penetration(matched, atr)
        est = summary.per_station["S1"]
        assert est.hourly_pr[hour_key(8)] == 2.5
        assert est.anomalies == [hour_key(8)]

    def test_zero_count_hours_skipped(self):
        atr = [AtrRecord("S1", 7, hour_key(8), 100),
               AtrRecord("S1", 7, hour_key(9), 0)]
        summary = estimate_penetration(self.mk_matched(7, 8, 1), atr)
        assert list(summary.per_station["S1"].hourly_pr) == [hour_key(8)]

    def test_unknown_link_rejected_when_network_known(self):
        atr = [AtrRecord("S1", 99, hour_key(8), 10)]
        with pytest.raises(DomainError):
            estimate_penetration([], atr, known_links={1, 2, 3})

    def test_no_positive_hours_raises(self):
        atr = [AtrRecord("S1", 7, hour_key(8), 0)]
        with pytest.raises(DomainError):
            estimate_penetration([], atr)

    def test_negative_count_rejected(self):
        with pytest.raises(DomainError):
            AtrRecord("S1", 7, hour_key(8), -1)

    def test_recovers_planted_rate(self):
        rng = random.Random(7)
        atr, matched, p = synth.gen_penetration_world(0.02, 500, 200, rng)
        summary = estimate_penetration(matched, atr)
        assert abs(summary.median_pr - p) <= 0.003
        assert abs(summary.mean_pr - p) <= 0.0015


class TestExports:
    def test_chord_table_descending_with_other_pool(self, zone_world):
        trips = synth.gen_zone_trips(500, 20_000.0, random.Random(5))
        m = build_od_matrix(trips, zone_world["state"])
        buf = io.StringIO()
        export_chord_table(m, buf, min_flow=20)
        lines = buf.getvalue().strip().split("\n")
        assert lines[0] == "origin_zone\tdest_zone\tcount\texpanded_count"
        counts = [int(l.split("\t")[2]) for l in lines[1:-1]
                  if not l.startswith("OTHER")]
        assert counts == sorted(counts, reverse=True)
        pooled = [l for l in lines if l.startswith("OTHER")]
        total = sum(int(l.split("\t")[2]) for l in lines[1:])
        assert total == m.total
        assert len(pooled) <= 1

    def test_od_csv_sorted(self, zone_world):
        trips = synth.gen_zone_trips(100, 20_000.0, random.Random(6))
        m = build_od_matrix(trips, zone_world["state"])
        buf = io.StringIO()
        serialize_od_csv(m, buf)
        lines = buf.getvalue().strip().split("\n")[1:]
        keys = [tuple(l.split(",")[:2]) for l in lines]
        assert keys == sorted(keys)


class TestCorridor:
    def test_planted_peaks_and_flat_weekends(self):
        rng = random.Random(8)
        trips, truth = synth.gen_corridor_trips(7, 4, rng)
        region_a = synth.rect_polygon(*truth["region_a"])
        region_b = synth.rect_polygon(*truth["region_b"])
        route = synth.rect_polygon(*truth["route_corridor"])
        summary = corridor_analysis(trips, region_a, region_b, {"main": route})

        weekday = {h: v for (d, h), v in summary.hourly_median_s.items()
                   if d == "weekday"}
        am = max((h for h in weekday if h < 12), key=lambda h: weekday[h])
        pm = max((h for h in weekday if h >= 12), key=lambda h: weekday[h])
        assert am in truth["am_peak_hours"]
        assert pm in truth["pm_peak_hours"]

        weekend = [v for (d, h), v in summary.hourly_median_s.items()
                   if d == "weekend"]
        mean = sum(weekend) / len(weekend)
        assert all(abs(v - mean) / mean < 0.10 for v in weekend)

    def test_route_shares_sum_to_one(self):
        rng = random.Random(9)
        trips, truth = synth.gen_corridor_trips(2, 3, rng)
        summary = corridor_analysis(
            trips, synth.rect_polygon(*truth["region_a"]),
            synth.rect_polygon(*truth["region_b"]),
            {"main": synth.rect_polygon(*truth["route_corridor"])})
        assert sum(summary.route_shares.values()) == pytest.approx(1.0)
        assert summary.route_shares.get("main", 0) > 0.9

    def test_b_before_a_does_not_qualify(self):
        a = synth.rect_polygon(38.9, -77.0, 39.1, -76.9)
        b = synth.rect_polygon(38.9, -76.5, 39.1, -76.4)
        # moves from B to A only
        t = Trip("t", "d", Mode.VEHICLE, WeightClass.UNKNOWN, Provider.FLEET,
                 (Waypoint(39.0, -76.45, 1000), Waypoint(39.0, -76.95, 600_000)))
        summary = corridor_analysis([t], a, b, {})
        assert summary.trips == []

    def test_no_majority_is_unassigned(self):
        a = synth.rect_polygon(38.9, -77.0, 39.1, -76.9)
        b = synth.rect_polygon(38.9, -76.5, 39.1, -76.4)
        t = Trip("t", "d", Mode.VEHICLE, WeightClass.UNKNOWN, Provider.FLEET,
                 (Waypoint(39.0, -76.95, 1000),
                  Waypoint(39.0, -76.7, 300_000),   # not in any corridor
                  Waypoint(39.0, -76.45, 600_000)))
        summary = corridor_analysis([t], a, b, {})
        assert summary.trips[0].route == UNASSIGNED


class TestHeatmap:
    def test_counts_plus_out_of_grid_conserve(self):
        trips = synth.gen_zone_trips(300, 20_000.0, random.Random(10))
        g = GridSpec(synth.BASE_LAT, synth.BASE_LON, 1000.0, 10, 10)
        hm = origin_heatmap(trips, g)
        assert hm.total == 300
        assert sum(hm.counts.values()) + hm.out_of_grid == 300


class TestZoneLoading:
    def test_level_filtering(self, zone_world):
        assert len(zone_world["taz"].zones) == 64
        assert len(zone_world["county"].zones) == 16
        assert len(zone_world["state"].zones) == 4

    def test_boundary_assignment_lowest_id(self, zone_world):
        # corner shared by four states resolves to the lowest zone id
        zs = zone_world["state"]
        corner = zs.zones["S0000"].exterior[2]  # NE corner of S0000
        assert zs.assign(corner) == "S0000"

    def test_nesting_taz_in_county(self, zone_world):
        rng = random.Random(11)
        inside = 0
        for _ in range(500):
            p = synth.random_point_in(20_000.0, rng)
            taz = zone_world["taz"].assign(p)
            county = zone_world["county"].assign(p)
            if taz is not None and county is not None:
                if zone_world["taz_to_county"][taz] == county:
                    inside += 1
        assert inside >= 495  # >=99% containment away from shared edges

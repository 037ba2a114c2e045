"""Throughput benchmarks on the synthetic grid world.

Two floors are checked by the acceptance suite:
  ingest + per-trip stats >= 100,000 waypoints/s
  map matching           >=  50 trips/s per worker

Run directly for a human-readable report, or with --json for machine use.
"""

from __future__ import annotations

import argparse
import io
import json
import random
import time

from trajlab import ingest, mapmatch, synth


def build_trips(n_trips: int, seed: int, spacing_m: float = 200.0):
    net = synth.load_grid_network(10, spacing_m)
    rng = random.Random(seed)
    trips = []
    while len(trips) < n_trips:
        links = synth.random_grid_route(net, rng, min_links=4)
        if links is None:
            continue
        i = len(trips)
        trips.append(synth.sample_trip_along(
            synth.route_polyline(net, links), 12.0, 1.0, 4.0, rng, f"b{i:05d}"))
    return net, trips


def bench_ingest(trips) -> dict:
    buf = io.StringIO()
    ingest.serialize_trips_csv(trips, buf)
    data = buf.getvalue()
    n_waypoints = sum(len(t.waypoints) for t in trips)

    t0 = time.monotonic()
    parsed, _report = ingest.parse_trips(io.StringIO(data), ingest.TripFormat.CSV)
    summary = ingest.summarize_corpus(ingest.trip_stats(t) for t in parsed)
    wall = time.monotonic() - t0
    assert summary.n_trips == len(trips)
    return {"n_waypoints": n_waypoints, "wall_s": wall,
            "waypoints_per_s": n_waypoints / wall}


def bench_matching(net, trips, workers: int = 1) -> dict:
    matched, report = mapmatch.match_batch(trips, net, workers=workers)
    return {"n_trips": len(trips), "matched": report.matched,
            "workers": workers, "wall_s": report.wall_time_s,
            "trips_per_s_per_worker": report.trips_per_s / workers}


def run(n_trips: int = 200, seed: int = 11) -> dict:
    net, trips = build_trips(n_trips, seed)
    return {"ingest": bench_ingest(trips),
            "matching": bench_matching(net, trips, workers=1)}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--trips", type=int, default=200)
    ap.add_argument("--seed", type=int, default=11)
    ap.add_argument("--json", action="store_true")
    args = ap.parse_args()
    results = run(args.trips, args.seed)
    if args.json:
        print(json.dumps(results))
        return
    ing = results["ingest"]
    mat = results["matching"]
    print(f"ingest+stats: {ing['n_waypoints']:,} waypoints in {ing['wall_s']:.2f}s "
          f"-> {ing['waypoints_per_s']:,.0f} waypoints/s (floor 100,000)")
    print(f"matching:     {mat['n_trips']} trips in {mat['wall_s']:.2f}s "
          f"-> {mat['trips_per_s_per_worker']:.1f} trips/s/worker (floor 50)")


if __name__ == "__main__":
    main()

import random

import pytest

from trajlab import synth


@pytest.fixture(scope="session")
def grid_net():
    """10x10 grid road network, 200 m spacing."""
    return synth.load_grid_network(10, 200.0)


@pytest.fixture()
def rng():
    return random.Random(1234)


def make_noisy_route_trips(net, n, rng, noise_m=4.0, speed_mps=12.0, hz=1.0,
                           min_links=4):
    """Random shortest-path trips plus their ground-truth link lists."""
    trips, truth = [], []
    while len(trips) < n:
        links = synth.random_grid_route(net, rng, min_links=min_links)
        if links is None:
            continue
        i = len(trips)
        trips.append(synth.sample_trip_along(
            synth.route_polyline(net, links), speed_mps, hz, noise_m, rng,
            f"t{i:05d}"))
        truth.append(links)
    return trips, truth

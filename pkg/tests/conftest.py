"""Shared helpers for the test suite."""

import numpy as np
import pytest

from prevmap.geodata import Location, SurveyRecord


def rand_locations(rng, n, lo=(0.0, 0.0), hi=(8.0, 8.0)):
    xy = rng.uniform(lo, hi, (n, 2))
    return [Location(float(a), float(b)) for a, b in xy]


def records_from(locs, examined, positive):
    return [
        SurveyRecord(loc, int(n), int(h))
        for loc, n, h in zip(locs, np.broadcast_to(examined, len(locs)),
                             np.broadcast_to(positive, len(locs)))
    ]


def binomial_records(rng, locs, p, n_tests=85):
    p = np.broadcast_to(p, len(locs))
    h = rng.binomial(n_tests, p)
    return [SurveyRecord(loc, n_tests, int(k)) for loc, k in zip(locs, h)]


@pytest.fixture
def rng():
    return np.random.default_rng(20240829)

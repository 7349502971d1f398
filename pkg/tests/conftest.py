import itertools

import numpy as np
import pytest


def brute_force_kts(table, m):
    """Enumerate every cut placement; lexicographically first among the minima."""
    n = table.shape[0] - 1
    best_cost, best_cuts = None, None
    for cuts in itertools.combinations(range(1, n), m - 1):
        bounds = (0, *cuts, n)
        cost = 0.0
        for a, b in zip(bounds[:-1], bounds[1:]):
            cost += table[a, b]
        if best_cost is None or cost < best_cost - 1e-12 * max(1.0, abs(best_cost)):
            best_cost, best_cuts = cost, cuts
    return best_cuts, best_cost


def direct_scatter(frames):
    """Two-pass within-segment scatter: mean first, then squared deviations."""
    mu = frames.mean(axis=0)
    return float(((frames - mu) ** 2).sum())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

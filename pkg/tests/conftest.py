import itertools

import numpy as np
import pytest


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def brute_force_assignment(C):
    """All optimal permutations by enumeration (list of tuples) and the optimum."""
    n = C.shape[0]
    best, arg = np.inf, []
    for p in itertools.permutations(range(n)):
        v = C[np.arange(n), p].sum()
        if v < best - 1e-9:
            best, arg = v, [p]
        elif abs(v - best) <= 1e-9:
            arg.append(p)
    return best, arg


def unique_optimum_cost(rng, n, high=50):
    while True:
        C = rng.integers(0, high, (n, n)).astype(float)
        best, arg = brute_force_assignment(C)
        if len(arg) == 1:
            return C, best, np.array(arg[0])


def dense_marginal_matrix(n):
    """Explicit 2n x n^2 marginal operator for row-major vectorization."""
    M = np.zeros((2 * n, n * n))
    for i in range(n):
        for j in range(n):
            M[i, i * n + j] = 1
            M[n + j, i * n + j] = 1
    return M

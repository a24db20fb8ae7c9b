import math

import numpy as np
import pytest

from fuchsian_walks.automata import build_acceptor
from fuchsian_walks.coxeter import INFINITY, build_coxeter_system, build_generic_system
from fuchsian_walks.walk import BuildingParams, WalkSpec


def reflection_matrices(m):
    """Geometric representation matrices, built straight from the Coxeter matrix."""
    n = len(m)
    B = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            if i == j:
                B[i, j] = 1.0
            elif m[i][j] == INFINITY:
                B[i, j] = -1.0
            else:
                B[i, j] = -math.cos(math.pi / m[i][j])
    mats = []
    for s in range(n):
        S = np.eye(n)
        S[s, :] -= 2 * B[s, :]
        mats.append(S)
    return mats


def matrix_ball(m, radius):
    """ShortLex-least words by level, found by a breadth-first search on matrices.

    Level ``k`` is listed in ShortLex order, and each new element is first met
    through its least word, because parents are scanned in that order and
    letters in increasing order.
    """
    mats = reflection_matrices(m)
    n = len(m)
    key = lambda M: tuple(np.round(M, 6).ravel())
    seen = {key(np.eye(n))}
    level = [((), np.eye(n))]
    levels = [[()]]
    for _ in range(radius):
        nxt = []
        for w, M in level:
            for s in range(n):
                Ms = M @ mats[s]
                k = key(Ms)
                if k not in seen:
                    seen.add(k)
                    nxt.append((w + (s,), Ms))
        level = nxt
        levels.append([w for w, _ in nxt])
    return levels


@pytest.fixture(scope="session")
def g732():
    return build_coxeter_system((7, 3, 2))


@pytest.fixture(scope="session")
def acc732(g732):
    return build_acceptor(g732)


@pytest.fixture(scope="session")
def g542():
    return build_coxeter_system((5, 4, 2))


@pytest.fixture(scope="session")
def dihedral_inf():
    return build_generic_system([[1, INFINITY], [INFINITY, 1]])


@pytest.fixture(scope="session")
def nn732(g732):
    return WalkSpec.nearest_neighbour(g732)


@pytest.fixture(scope="session")
def q2():
    return BuildingParams.uniform(3, 2)

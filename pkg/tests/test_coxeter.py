import itertools
import math
import random

import numpy as np
import pytest

from conftest import matrix_ball
from fuchsian_walks.coxeter import (
    INFINITY,
    NEGATIVE,
    NON_MINIMAL,
    CoxeterSystem,
    Element,
    GroupClass,
    InvalidData,
    InvalidMatrix,
    NotHyperbolic,
    build_coxeter_system,
    build_generic_system,
    classify,
    distance,
    is_right_descent,
    minimal_roots,
    multiply_right,
    shortlex_normal_form,
)

GROUPS = [(7, 3, 2), (4, 3, 3), (5, 4, 2), (3, 3, 3, 3), (5, 5, 3), (8, 3, 2)]


def E(sys, text):
    return sys.element(text)


# -- construction ------------------------------------------------------------


def test_732_orders(g732):
    assert g732.m[0][1] == 7 and g732.m[1][2] == 3 and g732.m[0][2] == 2


def test_3333_has_infinite_diagonals():
    sys = build_coxeter_system((3, 3, 3, 3))
    assert sys.n == 4
    assert sys.m[0][2] == INFINITY and sys.m[1][3] == INFINITY
    assert [sys.m[i][(i + 1) % 4] for i in range(4)] == [3, 3, 3, 3]


@pytest.mark.parametrize("polygon", [(3, 3, 3), (4, 4, 2), (6, 3, 2), (2, 2, 2, 2)])
def test_euclidean_or_spherical_rejected(polygon):
    with pytest.raises(NotHyperbolic):
        build_coxeter_system(polygon)


@pytest.mark.parametrize("polygon", [(7, 1, 2), (7, 3), ()])
def test_bad_polygon_data(polygon):
    with pytest.raises(InvalidData):
        build_coxeter_system(polygon)


def test_bilinear_form(g732):
    B = g732.bilinear_form
    assert np.allclose(np.diag(B), 1.0)
    assert np.allclose(B, B.T)
    assert B[0, 1] == pytest.approx(-math.cos(math.pi / 7))
    assert B[0, 2] == pytest.approx(0.0, abs=1e-15)
    off = B[~np.eye(3, dtype=bool)]
    assert np.all(off <= 1e-15) and np.all(off >= -1)


def test_generic_matches_polygon(g732):
    m = [[1, 7, 2], [7, 1, 3], [2, 3, 1]]
    gen = build_generic_system(m)
    assert gen.polygon is None
    assert gen.same_group(g732)
    assert classify(gen) is GroupClass.NON_FUCHSIAN


def test_infinite_dihedral(dihedral_inf):
    assert dihedral_inf.n == 2
    assert dihedral_inf.bilinear_form[0, 1] == -1.0


@pytest.mark.parametrize("m", [
    [[1, 1], [1, 1]],
    [[1, 3], [4, 1]],
    [[2, 3], [3, 1]],
])
def test_invalid_matrix(m):
    with pytest.raises(InvalidMatrix):
        build_generic_system(m)


@pytest.mark.parametrize("polygon,cls", [
    ((4, 3, 3), GroupClass.CLASS_I),
    ((3, 4, 3), GroupClass.CLASS_I),
    ((5, 4, 2), GroupClass.CLASS_II),
    ((5, 5, 3), GroupClass.CLASS_I),
    ((7, 3, 2), GroupClass.CLASS_III),
    ((2, 3, 8), GroupClass.CLASS_III),
    ((3, 3, 3, 3), GroupClass.CLASS_IV),
    ((4, 4, 3), GroupClass.CLASS_I),
])
def test_classify(polygon, cls):
    assert classify(build_coxeter_system(polygon)) is cls


def test_serialization_round_trip(g732):
    d = g732.to_dict()
    assert d["generators"] == 3
    assert sorted(map(tuple, d["orders"])) == [(1, 2, 7), (1, 3, 2), (2, 3, 3)]
    assert CoxeterSystem.from_dict(d) == g732
    sys4 = build_coxeter_system((3, 3, 3, 3))
    d4 = sys4.to_dict()
    assert [1, 3, 0] in d4["orders"]
    assert CoxeterSystem.from_dict({"generators": 4, "orders": d4["orders"]}).same_group(sys4)


def test_element_strings(g732):
    w = E(g732, "1213")
    assert w.word == (0, 1, 0, 2)
    assert g732.format(w) == "1213"
    assert E(g732, "") == g732.identity() and g732.identity().is_identity()


# -- minimal roots -----------------------------------------------------------


def test_infinite_dihedral_roots(dihedral_inf):
    table = minimal_roots(dihedral_inf)
    assert len(table) == 2
    assert table.reflect[0, 0] == NEGATIVE and table.reflect[1, 1] == NEGATIVE
    assert table.reflect[1, 0] == NON_MINIMAL and table.reflect[0, 1] == NON_MINIMAL


@pytest.mark.parametrize("polygon", GROUPS)
def test_simple_root_reflects_negative(polygon):
    t = minimal_roots(build_coxeter_system(polygon))
    for s in range(len(polygon)):
        assert t.reflect[s, s] == NEGATIVE


def _elementary_root_count(B, depth):
    """Positive roots up to ``depth`` that dominate no other root of smaller or equal depth."""
    n = len(B)
    key = lambda v: tuple(np.round(v, 7))
    roots = {key(np.eye(n)[s]): (np.eye(n)[s], 1) for s in range(n)}
    frontier = [np.eye(n)[s] for s in range(n)]
    for d in range(2, depth + 1):
        nxt = []
        for b in frontier:
            for s in range(n):
                c = float(np.eye(n)[s] @ B @ b)
                if c < -1e-12:
                    nb = b - 2 * c * np.eye(n)[s]
                    k = key(nb)
                    if k not in roots:
                        roots[k] = (nb, d)
                        nxt.append(nb)
        frontier = nxt
    vals = list(roots.values())
    count = 0
    for i, (b, db) in enumerate(vals):
        dominates = any(j != i and dg <= db and float(b @ B @ g) >= 1 - 1e-9 for j, (g, dg) in enumerate(vals))
        count += not dominates
    return count


@pytest.mark.parametrize("polygon", [(7, 3, 2), (4, 3, 3), (5, 4, 2)])
def test_minimal_root_count_matches_dominance_oracle(polygon):
    sys = build_coxeter_system(polygon)
    assert len(minimal_roots(sys)) == _elementary_root_count(sys.bilinear_form, 10)


# -- descents and normal forms --------------------------------------------


def test_descent_examples(g732):
    assert not any(is_right_descent(g732, g732.identity(), s) for s in range(3))
    assert is_right_descent(g732, E(g732, "13"), 2)
    assert not is_right_descent(g732, E(g732, "121"), 1)


@pytest.mark.parametrize("word,nf", [("33", ""), ("31", "13"), ("2121212", "1212121"), ("", ""), ("1313", "")])
def test_normal_form_examples(g732, word, nf):
    got = shortlex_normal_form(g732, [int(c) - 1 for c in word])
    assert g732.format(got) == nf


def test_longest_dihedral_elements_odd_bonds(g732):
    for s, t in [(0, 1), (1, 2)]:
        m = g732.m[s][t]
        a = shortlex_normal_form(g732, [s, t] * (m // 2) + [s])
        b = shortlex_normal_form(g732, [t, s] * (m // 2) + [t])
        assert a == b and a.length == m


@pytest.mark.parametrize("w,s,out,delta", [("3", 0, "13", 1), ("1212121", 1, "212121", -1), ("", 1, "2", 1)])
def test_multiply_right_examples(g732, w, s, out, delta):
    got, d = multiply_right(g732, E(g732, w), s)
    assert (g732.format(got), d) == (out, delta)


@pytest.mark.parametrize("polygon,radius", [((7, 3, 2), 10), ((4, 3, 3), 7), ((5, 4, 2), 8), ((3, 3, 3, 3), 5)])
def test_normal_forms_match_matrix_bfs(polygon, radius):
    sys = build_coxeter_system(polygon)
    levels = matrix_ball(sys.m, radius)
    for k, words in enumerate(levels):
        for w in words:
            assert shortlex_normal_form(sys, w).word == w
    # every neighbour of the ball normalizes to a known element of the right length
    known = {w: k for k, ws in enumerate(levels) for w in ws}
    for w in levels[radius - 1]:
        for s in range(sys.n):
            v, d = multiply_right(sys, Element(w), s)
            assert known[v.word] == radius - 1 + d


def test_bijectivity_words_up_to_8(g732):
    """Normalizing every word of length <= 8 hits exactly the matrix ball of radius 8."""
    levels = matrix_ball(g732.m, 8)
    expected = sum(len(l) for l in levels)
    seen = set()
    for n in range(9):
        for word in itertools.product(range(3), repeat=n):
            seen.add(g732.multiply_word((), word))
    assert len(seen) == expected


@pytest.mark.parametrize("polygon", GROUPS)
def test_involution_and_exchange(polygon):
    sys = build_coxeter_system(polygon)
    radius = 10 if sys.n == 3 else 6
    levels = matrix_ball(sys.m, radius)
    for ws in levels:
        for w in ws:
            el = Element(w)
            for s in range(sys.n):
                v, d = multiply_right(sys, el, s)
                assert multiply_right(sys, v, s)[0] == el
                assert (d == 1) == (not is_right_descent(sys, el, s))


def test_distance(g732):
    w = E(g732, "12123")
    assert distance(g732, w, w) == 0
    assert distance(g732, g732.identity(), w) == 5
    assert distance(g732, E(g732, "1"), E(g732, "13")) == 1


def test_distance_metric_on_samples(g732):
    rng = random.Random(3)
    pts = [shortlex_normal_form(g732, [rng.randrange(3) for _ in range(rng.randrange(12))]) for _ in range(40)]
    for u, v, w in itertools.islice(itertools.product(pts, repeat=3), 0, 64000, 37):
        assert distance(g732, u, v) == distance(g732, v, u)
        assert distance(g732, u, w) <= distance(g732, u, v) + distance(g732, v, w)

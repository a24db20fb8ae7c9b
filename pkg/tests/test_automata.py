import itertools

import numpy as np
import pytest

from conftest import matrix_ball
from fuchsian_walks.automata import (
    boundary_rays,
    build_acceptor,
    cone_membership,
    cone_type,
    geodesic_cone_types,
    l_boundary,
    recurrent_subgraph,
    representation_sphere_sizes,
    sphere_counts,
    to_csv,
    to_dot,
)
from fuchsian_walks.ball import CayleyBall
from fuchsian_walks.coxeter import Element, build_coxeter_system, shortlex_normal_form

ONE_PER_CLASS = [(4, 3, 3), (5, 4, 2), (7, 3, 2), (3, 3, 3, 3)]


@pytest.fixture(scope="module")
def acceptors():
    return {p: build_acceptor(build_coxeter_system(p)) for p in ONE_PER_CLASS + [(5, 5, 2)]}


def test_counts_first_levels(acc732):
    assert sphere_counts(acc732, 2) == [1, 3, 5]


def test_infinite_dihedral_acceptor(dihedral_inf):
    acc = build_acceptor(dihedral_inf)
    assert acc.n_states == 3
    a, b = acc.step(0, 0), acc.step(0, 1)
    assert acc.step(a, 0) == -1 and acc.step(a, 1) == b
    assert acc.step(b, 1) == -1 and acc.step(b, 0) == a
    assert sphere_counts(acc, 6) == [1] + [2] * 6


@pytest.mark.parametrize("polygon", ONE_PER_CLASS)
def test_start_state(acceptors, polygon):
    acc = acceptors[polygon]
    assert acc.start == 0
    assert all(acc.step(0, s) >= 0 for s in range(acc.system.n))
    assert all(t != acc.start for _, _, t in acc.edges())


@pytest.mark.parametrize("polygon,radius", [((4, 3, 3), 10), ((5, 4, 2), 10), ((7, 3, 2), 12), ((3, 3, 3, 3), 7)])
def test_counts_match_matrix_bfs(acceptors, polygon, radius):
    acc = acceptors[polygon]
    expected = [len(l) for l in matrix_ball(acc.system.m, radius)]
    assert sphere_counts(acc, radius) == expected
    assert representation_sphere_sizes(acc.system, radius) == expected


@pytest.mark.parametrize("polygon", ONE_PER_CLASS)
def test_accepted_words_are_normal_forms(acceptors, polygon):
    acc = acceptors[polygon]
    radius = 8 if acc.system.n == 3 else 5
    for k, words in enumerate(matrix_ball(acc.system.m, radius)):
        for w in words:
            assert acc.accepts(w)
    # the rejected extensions are exactly the non-normal-form words
    for w in matrix_ball(acc.system.m, radius - 1)[-1]:
        for s in range(acc.system.n):
            nf = shortlex_normal_form(acc.system, w + (s,)).word
            assert acc.accepts(w + (s,)) == (nf == w + (s,))


def test_element_reps_reach_their_state(acc732):
    for q, rep in enumerate(acc732.element_rep):
        assert acc732.run(rep) == q
    lengths = [len(r) for r in acc732.element_rep]
    assert lengths[0] == 0


def test_cone_type_examples(g732, acc732):
    assert cone_type(acc732, g732.identity()) == acc732.start
    assert cone_type(acc732, g732.element("1")) != cone_type(acc732, g732.element("2"))
    nf = shortlex_normal_form(g732, [2, 0])
    assert cone_type(acc732, nf) == cone_type(acc732, g732.element("13"))
    with pytest.raises(ValueError):
        cone_type(acc732, Element((2, 0)))


def test_cone_membership_examples(g732):
    e = g732.element
    assert cone_membership(e("12"), e("1"))
    assert not cone_membership(shortlex_normal_form(g732, [0, 2]), e("3"))
    for w in ["", "1", "2121", "3212"]:
        assert cone_membership(e(w), g732.identity())


def test_cones_disjoint_or_nested(acc732):
    ball = CayleyBall(acc732, 10)
    masks = {}
    for k in range(1, 7):
        nodes = list(ball.sphere(k))
        for u, v in itertools.islice(itertools.combinations(nodes, 2), 0, None, max(1, len(nodes) // 15)):
            mu, mv = ball.cone_mask(u), ball.cone_mask(v)
            assert not np.any(mu & mv)
    # transitivity of prefix cones
    words = [ball.word(u) for u in range(0, ball.size, 97)]
    for u, w, x in itertools.islice(itertools.product(words, repeat=3), 0, 20000, 7):
        if cone_membership(Element(u), Element(w)) and cone_membership(Element(w), Element(x)):
            assert cone_membership(Element(u), Element(x))


@pytest.mark.parametrize("polygon", ONE_PER_CLASS + [(5, 5, 2)])
def test_strongly_connected(acceptors, polygon):
    rec = recurrent_subgraph(acceptors[polygon])
    assert rec.strongly_connected and rec.n_components == 1


@pytest.mark.parametrize("polygon,count", [((4, 3, 3), 4), ((5, 5, 2), 6), ((7, 3, 2), 11), ((3, 3, 3, 3), 1)])
def test_transient_cone_type_counts(acceptors, polygon, count):
    assert len(recurrent_subgraph(acceptors[polygon]).transient_cone_types) == count


def test_transient_sets(acceptors):
    assert recurrent_subgraph(acceptors[(4, 3, 3)]).transient_cone_types == ("", "1", "2", "3")
    assert set(recurrent_subgraph(acceptors[(7, 3, 2)]).transient_cone_types) == {
        "", "1", "2", "3", "12", "21", "32", "121", "212", "321", "2121"}


def test_cone_type_automaton_accepts_all_geodesics(g732):
    cta = geodesic_cone_types(g732)
    accepted, geodesic = set(), set()
    for word in itertools.product(range(3), repeat=6):
        if shortlex_normal_form(g732, word).length == 6:
            geodesic.add(word)
        q = 0
        for a in word:
            q = cta.transitions[q, a]
            if q < 0:
                break
        if q >= 0:
            accepted.add(word)
    # brute-force oracle: the accepted words are exactly the geodesics
    assert accepted == geodesic
    assert len(geodesic) == 38


def test_K_separates_recurrent_types(acc732):
    rec = recurrent_subgraph(acc732)
    assert rec.K == 5
    ball = CayleyBall(acc732, 12)
    for k in range(rec.K + 1, 13):
        for u in ball.sphere(k):
            q = int(ball.state[u])
            assert q in rec.recurrent_states or q in rec.finite_cone_states


def test_finite_cone_dead_end(g732, acc732):
    rec = recurrent_subgraph(acc732)
    q = acc732.run((2, 1, 0, 1, 2))
    assert q in rec.finite_cone_states
    assert all(acc732.step(q, s) < 0 for s in range(3))


def test_l_boundary_contains_root(g732, acc732):
    for w in ["1", "12", "2121", "321"]:
        el = g732.element(w)
        assert el in l_boundary(acc732, el, 1, 3)
        assert l_boundary(acc732, el, 1, 0) == {el}


def test_l_boundary_near_rays(g732, acc732):
    w = g732.element("1")
    ball = CayleyBall(acc732, 1 + 4 + 2 + 6)
    bnd = l_boundary(acc732, w, 2, 4, ball=ball)
    r1, r2 = boundary_rays(acc732, w, 8, ball=ball)
    ray_nodes = set()
    for ray in (r1, r2):
        u = ball.index(w.word)
        ray_nodes.add(u)
        for s in ray:
            u = int(ball.child[u, s])
            ray_nodes.add(u)
    dist = ball.distances_from(sorted(ray_nodes)).min(axis=0)
    assert max(int(dist[ball.index(b.word)]) for b in bnd) <= 2


def test_boundary_rays_over_4_ball(acc732):
    depth = 6
    ball = CayleyBall(acc732, 4 + depth + 1)
    for k in range(1, 5):
        for u in ball.sphere(k):
            w = Element(ball.word(u))
            r1, r2 = boundary_rays(acc732, w, depth, ball=ball)
            for ray in (r1, r2):
                assert acc732.accepts(w.word + ray)
                assert shortlex_normal_form(acc732.system, w.word + ray).length == w.length + len(ray)


def test_boundary_rays_eventually_periodic(g732, acc732):
    w = g732.element("12")
    for ray in boundary_rays(acc732, w, 40):
        states, q = [], acc732.run(w.word)
        for s in ray:
            q = acc732.step(q, s)
            states.append(q)
        # after n_states steps the state sequence has some period p <= n_states
        found = False
        for p in range(1, acc732.n_states + 1):
            if all(states[i] == states[i + p] for i in range(acc732.n_states, len(states) - p)):
                found = True
                break
        assert found


def test_identity_has_no_rays(acc732, g732):
    with pytest.raises(ValueError):
        boundary_rays(acc732, g732.identity(), 3)


def test_exports(acc732):
    csv_text = to_csv(acc732)
    lines = csv_text.strip().splitlines()
    assert lines[0] == "from_state,label,to_state"
    assert len(lines) - 1 == sum(1 for _ in acc732.edges())
    dot = to_dot(acc732)
    assert dot.startswith("digraph") and dot.count("->") == len(lines) - 1
    assert '[label="1"]' in dot

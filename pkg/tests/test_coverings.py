import math

import numpy as np
import pytest

from fuchsian_walks.automata import recurrent_subgraph
from fuchsian_walks.coverings import (
    ConeGeometry,
    CoveringSpec,
    ErgodicAverages,
    LastEntryRecord,
    TooFewRecords,
    build_covering,
    build_covering_spec,
    capped_distance,
    choose_L1,
    detect_last_entries,
    ergodic_averages,
    extract_W_Y,
    formula_crosscheck,
    hyperbolicity_constant,
    tail_fit,
    verify_covering,
)
from fuchsian_walks.green import EstimatorReport, drift_estimator
from fuchsian_walks.walk import TrajectoryRecord, WordLog, simulate

L1 = 6


@pytest.fixture(scope="module")
def cov(acc732):
    return build_covering_spec(acc732, L1, 8)


@pytest.fixture(scope="module")
def sim_records(nn732, q2, cov):
    tr = simulate(nn732, q2, 5000, 24, seed=1, keep_words=True, path_offset=1 << 32)
    return tr, [detect_last_entries(r, cov) for r in tr]


def make_record(words):
    """A trajectory record whose word log holds the given normal forms."""
    keep, offsets, data = [], [0], bytearray()
    prev = b""
    for w in words:
        w = bytes(w)
        k = 0
        while k < min(len(prev), len(w)) and prev[k] == w[k]:
            k += 1
        keep.append(k)
        data += w[k:]
        offsets.append(len(data))
        prev = w
    log = WordLog(np.array(keep), np.array(offsets), bytes(data))
    n = len(words) - 1
    return TrajectoryRecord(0, 0, (n,), (), None, np.zeros(1), None, log)


# -- L1 ----------------------------------------------------------------------


def test_L1_override(g732, acc732):
    assert choose_L1(g732, acc732, 1, override=3) == 3


def test_L1_formula(g732, acc732):
    delta = hyperbolicity_constant(g732, acc732, radius=6)
    assert choose_L1(g732, acc732, 1, radius=6) == max(1, delta) + 1
    assert choose_L1(g732, acc732, 9, radius=6) == 10


def test_L1_732(g732, acc732):
    delta = hyperbolicity_constant(g732, acc732)
    assert 0 < delta < math.inf
    assert choose_L1(g732, acc732, 1) == L1 <= 6


# -- distances ----------------------------------------------------------------


def test_capped_distance_matches_ball(g732, acc732):
    geo = ConeGeometry(acc732, 6, 8, types=[acc732.run((0, 1))])
    T = acc732.run((0, 1))
    ball = geo.ball
    root = geo.root[T]
    dist = geo.distances(T)
    r = len(acc732.element_rep[T])
    members = ball.cone_members(root, 8)
    assert len(members) > 50
    for u in members:
        word = ball.word(int(u))
        assert capped_distance(g732, word, r, 6) == min(int(dist[u]), 7)
        assert geo.distance(T, word[r:]) == min(int(dist[u]), 7)


def test_long_suffix_distance(g732, cov):
    T = sorted(cov.recurrent)[0]
    tc = cov.per_type[T]
    rep = tuple(cov.acc.element_rep[T])
    u = tc.offsets[0]
    y = u
    for _ in range(4):
        t = cov.acc.run(rep + y)
        y = y + cov.per_type[t].offsets[0] if t in cov.per_type else y
    assert len(y) > cov.geometry.reach
    assert cov.geometry.distance(T, y) == capped_distance(g732, rep + y, len(rep), 3 * L1)


# -- coverings ---------------------------------------------------------------


def test_covering_properties_depth_8(acc732, cov):
    reports = verify_covering(acc732, cov, 8)
    assert len(reports) == len(cov.recurrent) == 12
    for rep in reports:
        assert rep.ok, (rep.type_id, rep.passed)
        assert rep.details["2_min_distance"] > L1
        assert 0 <= rep.details["5_witnessed_L"] < cov.per_type[rep.type_id].fill_start


def test_covering_properties_depth_10(acc732):
    rs = recurrent_subgraph(acc732)
    types = sorted(rs.recurrent_states)[:3]
    geo = ConeGeometry(acc732, 3 * L1, 3 * L1 + 10 + 16, types=types)
    per_type = {T: build_covering(acc732, T, L1, 10, geo, rs.recurrent_states) for T in types}
    spec = CoveringSpec(acc732, L1, rs.K, per_type, rs.recurrent_states, rs.finite_cone_states, geo)
    for rep in verify_covering(acc732, spec, 10):
        assert rep.passed["1_interior"] and rep.passed["3_disjoint"]
        assert rep.passed["4_all_recurrent_types"]
        assert per_type[rep.type_id].depth == 10


def test_covering_realizes_types(cov):
    for T, tc in cov.per_type.items():
        assert set(tc.targets) == set(cov.recurrent)
        assert tc.n_seeds == len(cov.recurrent)
        assert len(tc.offsets) > tc.n_seeds


def test_covering_rejects_transient(acc732):
    with pytest.raises(ValueError):
        build_covering(acc732, acc732.start, L1, 2)


def test_match_prefix_free(cov):
    tc = next(iter(cov.per_type.values()))
    u = tc.offsets[-1]
    assert tc.match(u + (0, 1)) == (u, tc.targets[-1])
    assert tc.match(u[:-1]) is None or len(tc.match(u[:-1])[0]) < len(u)


# -- last entries ------------------------------------------------------------


def _nested_word(cov, levels, first):
    """A normal form running through ``levels`` nested covering roots."""
    r0 = first
    word = tuple(r0)
    roots = [len(word)]
    t = cov.acc.run(word)
    for i in range(levels):
        tc = cov.per_type[t]
        u = tc.offsets[i % tc.n_seeds]
        word += u
        roots.append(len(word))
        t = cov.acc.run(word)
    return word, roots


def _first_shell_root(cov):
    ball = cov.geometry.ball
    for u in ball.sphere(cov.K + 1):
        if int(ball.state[u]) in cov.per_type:
            return ball.word(int(u))
    raise AssertionError


def _oracle_entries(cov, word, roots, N, B):
    """Entry indices along the ray ``X_m = word[:m]`` straight from the definition."""
    sys = cov.acc.system
    out = []
    for r in roots:
        inside = [m >= r and capped_distance(sys, word[:m], r, L1) > L1 for m in range(N + 1)]
        deep = [m >= r and capped_distance(sys, word[:m], r, 3 * L1) > 3 * L1 for m in range(N + 1)]
        if not inside[N]:
            break
        tau = max(m for m in range(N + 1) if not inside[m])
        e = next((m for m in range(tau + 1, N + 1) if deep[m]), None)
        if e is None:
            break
        out.append((e, e > N - B))
    return out


def test_synthetic_ray(cov):
    word, roots = _nested_word(cov, 4, _first_shell_root(cov))
    tail = word + cov.per_type[cov.acc.run(word)].offsets[0]
    N = len(tail)
    rec = make_record([tail[:m] for m in range(N + 1)])
    got = detect_last_entries(rec, cov, buffer=5)
    expect = _oracle_entries(cov, tail, roots, N, 5)
    assert [(r.e_k, r.censored) for r in got] == expect
    assert len(got) >= 4
    for r in got:
        assert r.R_k == tail[:roots[r.k]]
        assert r.X_at_entry == tail[:r.e_k]


def test_return_to_identity_has_no_uncensored_records(cov):
    word, _ = _nested_word(cov, 3, _first_shell_root(cov))
    out = [word[:m] for m in range(len(word) + 1)]
    back = [word[:m] for m in range(len(word) - 1, -1, -1)]
    words = out + back[:-1] + [()] + [word[:1]]
    rec = make_record(words)
    recs = detect_last_entries(rec, cov, buffer=2)
    assert not [r for r in recs if not r.censored]


def test_simulated_entries(sim_records, cov):
    tr, records = sim_records
    for traj, recs in zip(tr, records):
        es = [r.e_k for r in recs]
        assert all(a < b for a, b in zip(es, es[1:]))
        assert [r.k for r in recs] == list(range(len(recs)))
        final = list(traj.steps.words())[-1]
        for r in recs:
            assert tuple(final[:len(r.R_k)]) == r.R_k
            assert cov.geometry.distance(r.type_id, r.X_at_entry[len(r.R_k):], cap=3 * L1) > 3 * L1


def test_censoring_monotone(nn732, q2, cov):
    short = simulate(nn732, q2, 3000, 4, seed=2, keep_words=True)
    long = simulate(nn732, q2, 5000, 4, seed=2, keep_words=True)
    for a, b in zip(short, long):
        ra = {r.k: r for r in detect_last_entries(a, cov) if not r.censored}
        rb = {r.k: r for r in detect_last_entries(b, cov)}
        for k, r in ra.items():
            if k in rb:
                assert not rb[k].censored and (rb[k].e_k, rb[k].R_k) == (r.e_k, r.R_k)


def test_records_per_path(sim_records):
    _, records = sim_records
    frac = np.mean([sum(not r.censored for r in recs) >= 5 for recs in records])
    assert frac >= 0.9, frac


# -- W / Y and averages -------------------------------------------------------


def test_extract_W_Y(sim_records):
    _, records = sim_records
    recs = max(records, key=len)
    W, Y = extract_W_Y(recs)
    assert Y[0] == recs[0].R_k
    prefix = ()
    for w, r in zip(W, recs):
        prefix += w.offset
        assert prefix + w.tail == r.X_at_entry
    for k in range(1, len(Y)):
        assert (Y[k].prev_type, Y[k].type_id, Y[k].offset) == (W[k - 1].type_id, W[k].type_id, W[k].offset)


def test_too_few_records():
    r = LastEntryRecord(0, 10, (0, 1), (0, 1, 2), False, 3, (0, 1))
    with pytest.raises(TooFewRecords):
        extract_W_Y([r])
    with pytest.raises(TooFewRecords):
        extract_W_Y([r, LastEntryRecord(1, 20, (0, 1, 2), (0, 1, 2), True, 3, (2,))])


def test_ergodic_averages(sim_records, q2):
    tr, records = sim_records
    avg = ergodic_averages(records, q2)
    assert avg.n_increments >= 30
    assert avg.mean_de > 0 and avg.mean_d > 0 and avg.mean_logq > 0
    assert avg.mean_logq == pytest.approx(avg.mean_d * math.log(2), rel=1e-12)
    with pytest.raises(TooFewRecords):
        ergodic_averages(records[:1], q2, min_increments=1000)


def test_tail_fit_exponential():
    x = np.random.default_rng(0).exponential(20.0, 5000)
    slope, r2 = tail_fit(x)
    assert slope == pytest.approx(-1 / 20, rel=0.1)
    assert r2 > 0.95


def _avg(mean_de, mean_d, se=0.0):
    return ErgodicAverages(100, mean_de, se, mean_d, se, mean_d * math.log(2), se, mean_d / mean_de, se,
                           mean_d * math.log(2) / mean_de, se, -0.1, 0.9)


def test_crosscheck_synthetic():
    rep = formula_crosscheck(_avg(8.0, 2.0), EstimatorReport(0.25, 0.0, 10, "x"))
    assert rep.residuals["drift_formula"] == 0.0 and rep.flags["drift_formula"]
    rep = formula_crosscheck(_avg(8.0, 2.0), EstimatorReport(0.3, 0.001, 10, "x"))
    assert not rep.flags["drift_formula"]


def test_crosscheck_uniform_hq():
    hq = EstimatorReport(0.25 * math.log(2), 0.0, 10, "x")
    rep = formula_crosscheck(_avg(8.0, 2.0), EstimatorReport(0.25, 0.0, 10, "x"), hq=hq)
    assert rep.residuals["hq_formula"] == pytest.approx(0.0, abs=1e-15)


def test_crosscheck_simulated(sim_records, q2):
    tr, records = sim_records
    avg = ergodic_averages(records, q2)
    drift = drift_estimator(tr)
    hbar = EstimatorReport(0.05, 0.001, 10, "x")
    rep = formula_crosscheck(avg, drift, hbar=hbar)
    assert rep.flags["H_Y_positive"]
    assert rep.values["H_Y"] > 0

import math

import numpy as np
import pytest

from fuchsian_walks.coxeter import build_coxeter_system
from fuchsian_walks.green import (
    NoConvergence,
    OutOfBall,
    TooFewSamples,
    agree,
    consistency_report,
    decay_fit,
    drift_estimator,
    entropy_sequence,
    estimate_spectral_radius,
    green_distance,
    green_function,
    green_rate_estimator,
    hq_estimator,
    last_visit_gen,
    last_visit_table,
    return_probabilities,
    splitting_check,
)
from fuchsian_walks.walk import BuildingParams, WalkSpec, simulate


@pytest.fixture(scope="module")
def G8(nn732, q2):
    return green_function(nn732, q2, 8)


@pytest.fixture(scope="module")
def L8(nn732, q2, G8):
    return last_visit_table(nn732, q2, 8, rho_hat=G8.rho_hat)


@pytest.fixture(scope="module")
def H16(nn732, q2):
    return entropy_sequence(nn732, q2, 16)


# -- spectral radius --------------------------------------------------------


@pytest.mark.parametrize("polygon,q", [((7, 3, 2), 2), ((4, 3, 3), 2), ((5, 4, 2), 3), ((3, 3, 3, 3), 2)])
def test_rho_below_one(polygon, q):
    sys = build_coxeter_system(polygon)
    rho = estimate_spectral_radius(WalkSpec.nearest_neighbour(sys), BuildingParams.uniform(sys.n, q), 12)
    assert 0 < rho < 1


def test_rho_thin(g732, nn732):
    rho = estimate_spectral_radius(nn732, BuildingParams.uniform(3, 1), 16)
    assert rho < 1


def test_rho_value(nn732, q2):
    assert estimate_spectral_radius(nn732, q2, 16) == pytest.approx(0.70974, abs=5e-6)


@pytest.mark.parametrize("bad", [8, 13])
def test_rho_needs_even_n(nn732, q2, bad):
    with pytest.raises(ValueError):
        estimate_spectral_radius(nn732, q2, bad)


def test_return_roots_monotone(nn732, q2, dihedral_inf):
    p = return_probabilities(nn732, q2, 16)
    roots = [p[n] ** (1 / n) for n in range(2, 17, 2)]
    assert all(b >= a for a, b in zip(roots, roots[1:]))
    # thin line walk with p = 0.3: two-step moves are symmetric, the roots creep up to 1
    line = WalkSpec.nearest_neighbour(dihedral_inf, [0.3, 0.7])
    p = return_probabilities(line, BuildingParams.uniform(2, 1), 30)
    roots = [p[n] ** (1 / n) for n in range(2, 31, 2)]
    assert all(b >= a for a, b in zip(roots, roots[1:])) and roots[-1] < 1


# -- Green tables ------------------------------------------------------------


def test_green_identity_value(g732, G8):
    # radius 8 is a lower bound for the radius 12 value 1.43189
    assert 1.43 < G8.value(g732.identity()) <= 1.43189
    assert np.all(G8.array > 0)
    assert np.all(G8.tail_bound >= 0)
    assert G8.upper(g732.identity()) >= G8.value(g732.identity())


def test_zero_iterations_is_delta(g732, nn732, q2):
    t = green_function(nn732, q2, 4, max_iter=0, rho_hat=0.7)
    assert t.value(g732.identity()) == 1.0
    assert np.count_nonzero(t.array) == 1


def test_green_monotone_in_radius(nn732, q2, G8):
    G6 = green_function(nn732, q2, 6, rho_hat=G8.rho_hat)
    k = G6.ball.size
    assert np.all(G8.array[:k] >= G6.array - 1e-15)


def test_green_monotone_in_iterations(nn732, q2):
    a = green_function(nn732, q2, 6, rho_hat=0.7, tol=1e-4)
    b = green_function(nn732, q2, 6, rho_hat=0.7, tol=1e-10)
    assert b.iterations > a.iterations
    assert np.all(b.array >= a.array)


def test_no_convergence(dihedral_inf, nn732, q2):
    line = WalkSpec.nearest_neighbour(dihedral_inf, [0.3, 0.7])
    with pytest.raises(NoConvergence):
        green_function(line, BuildingParams.uniform(2, 1), 6, rho_hat=1.0)
    with pytest.raises(NoConvergence):
        green_function(nn732, q2, 6, max_iter=3)


def test_last_visit_identity(g732, L8):
    assert L8.value(g732.identity()) == 1.0


def test_splitting(G8, L8):
    rep = splitting_check(G8, L8, radius=5)
    assert rep.passed and rep.max_residual <= rep.max_bound
    assert rep.n_elements == 37  # |B_5|


def _ruin_last_visit(p1, R):
    """Start at e, count visits to "1" before returning to e, with the ray killed past length R."""
    # positions 1..R on the ray 1, 12, 121, ...; outward probability alternates p2, p1
    p2 = 1 - p1
    n = R
    A = np.eye(n)
    b = np.zeros(n)
    for k in range(1, R + 1):
        out = p2 if k % 2 else p1
        back = 1 - out
        i = k - 1
        if k + 1 <= R:
            A[i, i + 1] -= out
        if k - 1 >= 1:
            A[i, i - 1] -= back
    b[0] = 1.0
    visits = np.linalg.solve(A.T, b)  # expected visits to k from 1 before absorption
    return p1 * visits[0]


def test_last_visit_thin_line_closed_form(dihedral_inf):
    line = WalkSpec.nearest_neighbour(dihedral_inf, [0.3, 0.7])
    got = last_visit_gen(dihedral_inf.element("1"), line, BuildingParams.uniform(2, 1), 8, rho_hat=0.5)
    assert got == pytest.approx(_ruin_last_visit(0.3, 8), abs=1e-10)
    assert got == pytest.approx(0.851063829787, abs=1e-10)


def test_decay(G8):
    fit = decay_fit(G8)
    assert fit.r_envelope < -0.9
    assert fit.slope_envelope < 0


def test_green_distance(g732, G8):
    assert green_distance(G8, g732.identity()).value == 0.0
    vals = G8.array
    assert np.all(vals[1:] < vals[0])
    d = green_distance(G8, g732.element("12"))
    assert 0 < d.lower <= d.value <= d.upper
    with pytest.raises(OutOfBall):
        green_distance(G8, g732.element("321213212"))


def test_green_distance_sphere_means_increase(G8):
    value = -np.log(G8.array / G8.array[0])
    b = G8.ball
    means = [value[b.level_start[k]:b.level_start[k + 1]].mean() for k in range(G8.ball_radius + 1)]
    assert all(y > x for x, y in zip(means, means[1:]))


# -- estimators --------------------------------------------------------------


def test_too_few_samples(nn732, q2):
    tr = simulate(nn732, q2, 10, 1, seed=0)
    for est in (drift_estimator, hq_estimator):
        with pytest.raises(TooFewSamples):
            est(tr)


def test_hq_thin_zero(nn732):
    tr = simulate(nn732, BuildingParams.uniform(3, 1), 30, 50, seed=1)
    rep = hq_estimator(tr)
    assert rep.estimate == 0.0 and rep.stderr == 0.0


def test_hq_uniform_is_drift_times_logq(nn732, q2):
    tr = simulate(nn732, q2, 50, 400, seed=2)
    v, h = drift_estimator(tr), hq_estimator(tr)
    assert h.estimate == pytest.approx(v.estimate * math.log(2), rel=1e-12)


def test_hq_mixed_thickness(g542):
    spec = WalkSpec.nearest_neighbour(g542)
    tr = simulate(spec, BuildingParams((2, 2, 3)), 200, 500, seed=3)
    v, h = drift_estimator(tr), hq_estimator(tr)
    assert 0 < h.estimate <= v.estimate * math.log(3)


def test_thick_drift_exceeds_thin(nn732, q2):
    thick = drift_estimator(simulate(nn732, q2, 200, 1000, seed=4))
    thin = drift_estimator(simulate(nn732, BuildingParams.uniform(3, 1), 200, 1000, seed=4))
    assert thick.estimate >= thin.estimate


def test_burn_in_must_be_checkpoint(nn732, q2):
    tr = simulate(nn732, q2, 20, 10, seed=0, checkpoints=[10, 20])
    with pytest.raises(ValueError):
        drift_estimator(tr, burn_in=5)
    assert drift_estimator(tr, burn_in=10).method == "length/n[10,20]"


def test_green_rate_n0(nn732, q2, G8):
    tr = simulate(nn732, q2, 0, 5, seed=0)
    assert green_rate_estimator(tr, G8).estimate == 0.0


def test_green_rate_positive(nn732, q2, G8):
    tr = simulate(nn732, q2, 12, 2000, seed=5)
    rep = green_rate_estimator(tr, G8)
    assert rep.estimate > 0
    lo, hi = rep.interval
    assert lo <= rep.estimate <= hi
    assert 0 <= rep.extras["out_of_ball_fraction"] < 0.5


def test_green_rate_out_of_ball(nn732, q2, G8):
    tr = simulate(nn732, q2, 60, 50, seed=5)
    with pytest.raises(OutOfBall):
        green_rate_estimator(tr, G8)


# -- exact entropies ---------------------------------------------------------


def test_entropy_n1(H16):
    assert H16.H_w[1] == pytest.approx(math.log(3), abs=1e-15)
    assert H16.H_delta[1] == pytest.approx(math.log(6), abs=1e-14)


def test_entropy_identities(H16):
    assert H16.lift_residual < 1e-10
    np.testing.assert_allclose(H16.ElogQ, math.log(2) * H16.E_length, atol=1e-12)


def test_entropy_thin(nn732):
    h = entropy_sequence(nn732, BuildingParams.uniform(3, 1), 8)
    np.testing.assert_array_equal(h.H_delta, h.H_w)


def test_entropy_frozen_values(H16):
    expected = [0.419, 0.393, 0.371, 0.351, 0.334, 0.319, 0.305]
    got = [H16.rate(n) for n in range(10, 17)]
    np.testing.assert_allclose(got, expected, atol=1e-3)


def test_entropy_stabilization_window(H16):
    rates = [H16.rate(n) for n in range(10, 17)]
    diffs = np.abs(np.diff(rates))
    assert np.all(diffs < 0.02), f"successive differences {np.round(diffs, 4).tolist()}"


def test_green_rate_matches_entropy_at_n(nn732, q2):
    n = 12
    G = green_function(nn732, q2, n)
    tr = simulate(nn732, q2, n, 20_000, seed=6)
    rep = green_rate_estimator(tr, G)
    h = entropy_sequence(nn732, q2, n).rate(n)
    width = rep.interval[1] - rep.interval[0]
    assert abs(rep.estimate - h) <= max(0.1 * h, width), f"green {rep.estimate:.4f} vs H_n/n {h:.4f}"


# -- consistency -------------------------------------------------------------


def test_agree():
    assert agree(1.0, 0.0, 1.05, 0.0)[0]
    assert not agree(1.0, 0.0, 1.2, 0.0)[0]
    assert agree(1.0, 0.1, 1.2, 0.0, rel=0.0)[0]


def test_consistency_report(H16, nn732, q2):
    tr = simulate(nn732, q2, 100, 400, seed=7, checkpoints=[50, 100])
    rep = consistency_report(H16, q2, drift=drift_estimator(tr, 50), hq=hq_estimator(tr, 50))
    assert rep.residuals["lift_identity"] < 1e-10
    assert rep.flags["uniform_thickness"] and rep.flags["h_q_vs_drift_logq"]
    assert rep.estimates["hbar_entropy"]["window"] == [12, 16]
    assert set(rep.to_dict()) == {"residuals", "estimates", "flags"}

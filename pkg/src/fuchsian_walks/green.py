"""Green functions, Green distance, spectral radius and rate estimators.

Green and last-visit functions are accumulated on a finite ball with
absorbing truncation, so every stored value is a lower bound.  The tail
correction is a geometric bound on the mass still inside the ball when the
iteration stops; it is heuristic because the spectral radius is itself only
estimated from below.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .ball import CayleyBall
from .coxeter import Element
from .walk import (
    BuildingParams,
    RetractedKernel,
    Trajectories,
    WalkSpec,
    _node_logq,
    ball_for,
    exact_sequence,
    validate,
)

__all__ = [
    "NoConvergence",
    "OutOfBall",
    "TooFewSamples",
    "GreenTable",
    "GreenDistance",
    "EstimatorReport",
    "EntropySequence",
    "ConsistencyReport",
    "return_probabilities",
    "estimate_spectral_radius",
    "green_function",
    "last_visit_table",
    "last_visit_gen",
    "green_distance",
    "SplittingCheck",
    "splitting_check",
    "DecayFit",
    "decay_fit",
    "drift_estimator",
    "hq_estimator",
    "green_rate_estimator",
    "entropy_sequence",
    "consistency_report",
    "agree",
]


class NoConvergence(RuntimeError):
    pass


class OutOfBall(LookupError):
    pass


class TooFewSamples(ValueError):
    pass


# ---------------------------------------------------------------------------
# spectral radius


def return_probabilities(spec: WalkSpec, params: BuildingParams, n_max: int) -> np.ndarray:
    """``p^(n)(e, e)`` for ``n = 0..n_max`` from the exact law."""
    it = exact_sequence(spec, params, n_max)
    next(it)
    return np.array([vec[0] for _, vec, _ in it])


def estimate_spectral_radius(spec: WalkSpec, params: BuildingParams, n_max: int = 16) -> float:
    """Largest of ``p^(n)(e,e)^(1/n)`` over the last three even ``n <= n_max``.

    This approaches the spectral radius from below.
    """
    if n_max < 10 or n_max % 2:
        raise ValueError("n_max must be even and >= 10")
    p = return_probabilities(spec, params, n_max)
    ns = [n_max, n_max - 2, n_max - 4]
    return max(float(p[n]) ** (1.0 / n) for n in ns)


# ---------------------------------------------------------------------------
# Green tables


@dataclass
class GreenTable:
    """Lower bounds of a generating function ``F(e, .)`` at ``z = 1`` on a ball.

    Attributes
    ----------
    ball_radius : int
    array : ndarray
        Values indexed by ball node (ShortLex breadth-first order).
    tail_bound : ndarray
        Upper-bound correction per node; ``array + tail_bound`` is the upper value.
    rho_hat : float
    iterations : int
    ball : CayleyBall
    """

    ball_radius: int
    array: np.ndarray
    tail_bound: np.ndarray
    rho_hat: float
    iterations: int
    ball: CayleyBall = field(repr=False)

    def node(self, v: Element) -> int:
        if v.length > self.ball_radius:
            raise OutOfBall(f"{self.ball.system.format(v)} lies outside the ball of radius {self.ball_radius}")
        u = self.ball.index(v.word)
        if u < 0:
            raise OutOfBall(f"{v.word} is not a normal form")
        return u

    def value(self, v: Element) -> float:
        return float(self.array[self.node(v)])

    def upper(self, v: Element) -> float:
        u = self.node(v)
        return float(self.array[u] + self.tail_bound[u])

    def __contains__(self, v: Element) -> bool:
        return v.length <= self.ball_radius and self.ball.index(v.word) >= 0

    @property
    def values(self) -> dict:
        """``{Element: value}`` for all positive entries (built on demand)."""
        nz = np.nonzero(self.array > 0)[0]
        return {Element(self.ball.word(int(u))): float(self.array[u]) for u in nz}


def _accumulate(spec, params, ball_radius, tol, max_iter, rho_hat, taboo):
    validate(params, spec)
    if ball_radius < 2 * spec.L0:
        raise ValueError("ball_radius must be at least 2 * L0")
    if rho_hat is None:
        rho_hat = estimate_spectral_radius(spec, params, 16)
    if rho_hat >= 1 - 1e-6:
        raise NoConvergence(f"estimated spectral radius {rho_hat} is not below 1")
    ball = ball_for(spec.system, ball_radius)
    kernel = RetractedKernel(spec, params, ball)
    vec = np.zeros(ball.size)
    vec[0] = 1.0
    acc = vec.copy()
    prev_mass = 1.0
    ratio = rho_hat
    it = 0
    while it < max_iter:
        vec = kernel.push(vec)
        if taboo:
            vec[0] = 0.0
        acc += vec
        it += 1
        mass = float(vec.sum())
        if prev_mass > 0:
            ratio = max(rho_hat, min(mass / prev_mass, 1.0 - 1e-12))
        prev_mass = mass
        if mass < tol:
            break
    else:
        if max_iter > 0 and prev_mass >= tol:
            raise NoConvergence(f"added mass {prev_mass:.3e} still above tol after {max_iter} iterations")
    tail = np.full(ball.size, prev_mass * ratio / (1.0 - ratio) if it else 0.0)
    if taboo:
        tail[0] = 0.0
    return GreenTable(ball_radius, acc, tail, float(rho_hat), it, ball)


def green_function(spec: WalkSpec, params: BuildingParams, ball_radius: int, tol: float = 1e-12,
                   max_iter: int = 100_000, rho_hat: float | None = None) -> GreenTable:
    """``G(e, .)`` on the ball of radius ``ball_radius``.

    Raises
    ------
    NoConvergence
        If the estimated spectral radius is not below ``1 - 1e-6`` or the
        iteration does not reach ``tol``.
    """
    return _accumulate(spec, params, ball_radius, tol, max_iter, rho_hat, taboo=False)


def last_visit_table(spec: WalkSpec, params: BuildingParams, ball_radius: int, tol: float = 1e-12,
                     max_iter: int = 100_000, rho_hat: float | None = None) -> GreenTable:
    """``L(e, .)``: visits after the last return to ``e`` (paths avoiding ``e`` after time 0)."""
    return _accumulate(spec, params, ball_radius, tol, max_iter, rho_hat, taboo=True)


def last_visit_gen(v: Element, spec: WalkSpec, params: BuildingParams, ball_radius: int,
                   tol: float = 1e-12, rho_hat: float | None = None) -> float:
    return last_visit_table(spec, params, ball_radius, tol, rho_hat=rho_hat).value(v)


@dataclass(frozen=True)
class SplittingCheck:
    max_residual: float
    max_bound: float
    n_elements: int
    passed: bool


def splitting_check(G: GreenTable, L: GreenTable, radius: int = 5) -> SplittingCheck:
    """``G(e,v) = G(e,e) L(e,v)`` for ``l(v) <= radius`` against the combined truncation bounds.

    Both tables live on the same truncated chain, for which the last-exit
    decomposition is exact; only the iteration tails separate the sides.
    """
    if G.ball_radius != L.ball_radius:
        raise ValueError("tables must share the ball")
    end = int(G.ball.level_start[min(radius, G.ball_radius) + 1])
    g, tg = G.array[:end], G.tail_bound[:end]
    l, tl = L.array[:end], L.tail_bound[:end]
    g0, t0 = g[0], tg[0]
    resid = np.abs(g - g0 * l)
    bound = np.maximum(tg, (g0 + t0) * (l + tl) - g0 * l) + 1e-12 * np.maximum(g, 1.0)
    return SplittingCheck(float(resid.max()), float(bound.max()), end, bool(np.all(resid <= bound)))


@dataclass(frozen=True)
class GreenDistance:
    value: float
    lower: float
    upper: float


def green_distance(table: GreenTable, v: Element) -> GreenDistance:
    """``-log(G(e,v) / G(e,e))`` with the interval implied by the tail bounds."""
    u = table.node(v)
    g, g0 = float(table.array[u]), float(table.array[0])
    if g <= 0:
        return GreenDistance(math.inf, math.inf, math.inf)
    t, t0 = float(table.tail_bound[u]), float(table.tail_bound[0])
    value = -math.log(g / g0)
    if u == 0:
        return GreenDistance(0.0, 0.0, 0.0)
    return GreenDistance(value, -math.log((g + t) / g0), -math.log(g / (g0 + t0)))


def _green_distance_array(table: GreenTable) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    g, t = table.array, table.tail_bound
    with np.errstate(divide="ignore"):
        value = -np.log(g / g[0])
        low = -np.log((g + t) / g[0])
        high = -np.log(g / (g[0] + t[0]))
    low[0] = high[0] = value[0] = 0.0
    return value, low, high


@dataclass(frozen=True)
class DecayFit:
    """Linear fits of ``log G(e, .)`` against word length.

    ``r_envelope`` uses the largest value on each sphere (the quantity an
    upper bound ``C lambda^d`` controls), ``r_mean`` the sphere means and
    ``r_elements`` every element as one point.
    """

    r_envelope: float
    r_mean: float
    r_elements: float
    slope_envelope: float


def decay_fit(table: GreenTable, radius: int | None = None) -> DecayFit:
    radius = table.ball_radius if radius is None else min(radius, table.ball_radius)
    b = table.ball
    end = int(b.level_start[radius + 1])
    d = b.length[:end].astype(np.float64)
    lg = np.log(table.array[:end])
    ks = np.arange(radius + 1, dtype=np.float64)
    env = np.array([lg[b.level_start[k]:b.level_start[k + 1]].max() for k in range(radius + 1)])
    mean = np.array([lg[b.level_start[k]:b.level_start[k + 1]].mean() for k in range(radius + 1)])
    return DecayFit(
        float(np.corrcoef(ks, env)[0, 1]),
        float(np.corrcoef(ks, mean)[0, 1]),
        float(np.corrcoef(d, lg)[0, 1]),
        float(np.polyfit(ks, env, 1)[0]),
    )


# ---------------------------------------------------------------------------
# estimators


@dataclass(frozen=True)
class EstimatorReport:
    """Sample mean with standard error; ``interval`` adds known systematic bounds."""

    estimate: float
    stderr: float
    n_samples: int
    method: str
    interval: tuple[float, float] | None = None
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"estimate": self.estimate, "stderr": self.stderr, "n_samples": self.n_samples, "method": self.method}
        if self.interval is not None:
            out["interval"] = list(self.interval)
        if self.extras:
            out.update(self.extras)
        return out


def _mean_stderr(x: np.ndarray) -> tuple[float, float]:
    x = np.asarray(x, dtype=np.float64)
    if len(x) < 2:
        raise TooFewSamples(f"need at least 2 paths, got {len(x)}")
    return float(np.mean(x)), float(np.std(x, ddof=1) / math.sqrt(len(x)))


def _checkpoint_columns(records) -> tuple[tuple[int, ...], np.ndarray, np.ndarray]:
    if isinstance(records, Trajectories):
        return records.checkpoints, np.asarray(records.ckpt_lengths), np.asarray(records.ckpt_logq)
    records = list(records)
    if not records:
        raise TooFewSamples("no paths")
    ck = records[0].checkpoints
    lengths = np.array([[p.length for p in r.positions] for r in records], dtype=np.float64)
    logq = np.array([r.logq for r in records], dtype=np.float64)
    return ck, lengths, logq


def _windowed(ck, column: np.ndarray, burn_in: int | None, tag: str) -> tuple[np.ndarray, str]:
    N = ck[-1]
    if burn_in is None:
        if N == 0:
            return np.zeros(len(column)), tag
        return column[:, -1] / N, tag
    if burn_in not in ck or burn_in >= N:
        raise ValueError(f"burn_in {burn_in} must be a checkpoint below the final one {N}")
    b = ck.index(burn_in)
    return (column[:, -1] - column[:, b]) / (N - burn_in), f"{tag}[{burn_in},{N}]"


def drift_estimator(records, burn_in: int | None = None) -> EstimatorReport:
    """Mean of ``l(X_N)/N`` over paths, or of ``(l(X_N) - l(X_b)) / (N - b)`` with ``burn_in = b``.

    Raises
    ------
    TooFewSamples
        With fewer than two paths.
    """
    ck, lengths, _ = _checkpoint_columns(records)
    x, tag = _windowed(ck, lengths.astype(np.float64), burn_in, "length/n")
    m, se = _mean_stderr(x)
    return EstimatorReport(m, se, len(x), tag)


def hq_estimator(records, burn_in: int | None = None) -> EstimatorReport:
    """Mean of ``log q_{X_N} / N`` over paths (same windowing as :func:`drift_estimator`)."""
    ck, _, logq = _checkpoint_columns(records)
    x, tag = _windowed(ck, logq, burn_in, "logq/n")
    m, se = _mean_stderr(x)
    return EstimatorReport(m, se, len(x), tag)


def green_rate_estimator(records: Trajectories, table: GreenTable, checkpoint: int | None = None) -> EstimatorReport:
    """Mean of ``l_G(X_n) / n`` at a checkpoint whose positions lie in the table's ball.

    Paths outside the ball are dropped and their fraction reported.

    Raises
    ------
    OutOfBall
        If more than half of the paths are outside the ball.
    """
    ck = records.checkpoints
    c = len(ck) - 1 if checkpoint is None else ck.index(checkpoint)
    n = ck[c]
    value, low, high = _green_distance_array(table)
    nodes = []
    out = 0
    for i in range(len(records)):
        w = records.position(i, c)
        u = table.ball.index(w.word) if w.length <= table.ball_radius else -1
        if u < 0:
            out += 1
        else:
            nodes.append(u)
    frac = out / max(len(records), 1)
    if frac > 0.5:
        raise OutOfBall(f"{out} of {len(records)} positions at step {n} are outside the Green ball")
    nodes = np.array(nodes, dtype=np.int64)
    if n == 0:
        return EstimatorReport(0.0, 0.0, len(nodes), "green/n", (0.0, 0.0), {"n": 0, "out_of_ball_fraction": frac})
    m, se = _mean_stderr(value[nodes] / n)
    lo = float(np.mean(low[nodes] / n)) - 3 * se
    hi = float(np.mean(high[nodes] / n)) + 3 * se
    return EstimatorReport(m, se, len(nodes), "green/n", (lo, hi), {"n": n, "out_of_ball_fraction": frac})


# ---------------------------------------------------------------------------
# exact entropies


@dataclass(frozen=True)
class EntropySequence:
    """Exact finite-``n`` entropies of the retracted and building walks."""

    n: np.ndarray
    H_w: np.ndarray
    H_delta: np.ndarray
    ElogQ: np.ndarray
    E_length: np.ndarray
    lift_residual: float

    def rows(self) -> list[dict]:
        return [
            {"n": int(n), "H_w_over_n": hw / n, "H_delta_over_n": hd / n, "ElogQ_over_n": eq / n}
            for n, hw, hd, eq in zip(self.n, self.H_w, self.H_delta, self.ElogQ)
            if n > 0
        ]

    def rate(self, n: int) -> float:
        return float(self.H_w[n] / n)

    def tail_average(self, lo: int, hi: int) -> float:
        """Average of ``H_n^W / n`` over ``lo <= n <= hi``."""
        return float(np.mean([self.H_w[n] / n for n in range(lo, hi + 1)]))


def entropy_sequence(spec: WalkSpec, params: BuildingParams, n_max: int, max_nodes: int = 3_000_000) -> EntropySequence:
    """Exact ``H_n^W``, ``H_n^Delta`` and ``E[log q_{X_n}]`` for ``n = 0..n_max``.

    ``H_n^Delta`` is computed from ``pi_n(u) / q_u`` directly; the identity
    ``H^Delta = H^W + E[log q]`` is enforced to ``1e-10``.

    Raises
    ------
    MemoryBudgetExceeded
    ArithmeticError
        If the identity fails.
    """
    validate(params, spec)
    from .walk import _entropy_terms

    it = exact_sequence(spec, params, n_max, max_nodes=max_nodes)
    _, ball, _ = next(it)
    logq = _node_logq(ball, params)
    length = ball.length.astype(np.float64)
    rows = []
    for n, vec, _ in it:
        H_bld, H_ret, ElogQ = _entropy_terms(vec, logq)
        rows.append((n, H_ret, H_bld, ElogQ, math.fsum(vec * length)))
    arr = np.array(rows)
    residual = float(np.max(np.abs(arr[:, 2] - arr[:, 1] - arr[:, 3])))
    if residual >= 1e-10:
        raise ArithmeticError(f"lift identity residual {residual:.3e}")
    return EntropySequence(arr[:, 0].astype(int), arr[:, 1], arr[:, 2], arr[:, 3], arr[:, 4], residual)


# ---------------------------------------------------------------------------
# consistency


def agree(a: float, sa: float, b: float, sb: float, rel: float = 0.1, k: float = 3.0) -> tuple[bool, float, float]:
    """``|a - b| <= max(rel * mean(|a|, |b|), k * sqrt(sa^2 + sb^2))``; returns (ok, diff, tolerance)."""
    diff = abs(a - b)
    tol = max(rel * 0.5 * (abs(a) + abs(b)), k * math.hypot(sa, sb))
    return diff <= tol, diff, tol


@dataclass
class ConsistencyReport:
    residuals: dict
    estimates: dict
    flags: dict

    @property
    def passed(self) -> bool:
        return all(self.flags.values())

    def to_dict(self) -> dict:
        return {"residuals": self.residuals, "estimates": self.estimates, "flags": self.flags}


def consistency_report(entropy: EntropySequence, params: BuildingParams, drift: EstimatorReport | None = None,
                       hq: EstimatorReport | None = None, green_rate: EstimatorReport | None = None,
                       coverings_hbar: EstimatorReport | None = None, window: Sequence[int] = (12, 16),
                       rel: float = 0.1) -> ConsistencyReport:
    """Residuals and pass/fail flags for the entropy identities.

    ``hbar`` from the entropy sequence is the tail average of ``H_n^W / n``
    over ``window``; it has no sampling error.
    """
    residuals: dict = {"lift_identity": entropy.lift_residual}
    flags: dict = {"lift_identity": entropy.lift_residual < 1e-10}
    uniform = len(set(params.q)) == 1
    if uniform:
        lq = math.log(params.q[0])
        r = float(np.max(np.abs(entropy.ElogQ - lq * entropy.E_length)))
        residuals["uniform_thickness"] = r
        flags["uniform_thickness"] = r < 1e-10
    lo, hi = window
    hi = min(hi, int(entropy.n[-1]))
    estimates: dict = {"hbar_entropy": {"estimate": entropy.tail_average(lo, hi), "stderr": 0.0, "window": [lo, hi]}}
    if drift is not None:
        estimates["drift"] = drift.to_dict()
    if hq is not None:
        estimates["h_q"] = hq.to_dict()
        if drift is not None and uniform:
            ok, diff, tol = agree(hq.estimate, hq.stderr, drift.estimate * lq, drift.stderr * lq, rel=0.0)
            residuals["h_q_vs_drift_logq"] = diff
            flags["h_q_vs_drift_logq"] = ok
    others = {}
    if green_rate is not None:
        estimates["hbar_green"] = green_rate.to_dict()
        others["green"] = green_rate
    if coverings_hbar is not None:
        estimates["hbar_coverings"] = coverings_hbar.to_dict()
        others["coverings"] = coverings_hbar
    h_e = estimates["hbar_entropy"]["estimate"]
    values = {"entropy": (h_e, 0.0)} | {k: (v.estimate, v.stderr) for k, v in others.items()}
    names = list(values)
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            a, b = names[i], names[j]
            ok, diff, tol = agree(*values[a], *values[b], rel=rel)
            residuals[f"hbar_{a}_vs_{b}"] = diff
            flags[f"hbar_{a}_vs_{b}"] = ok
    flags["positive"] = all(v[0] > 0 for v in values.values()) and (hq is None or hq.estimate >= 0) and (
        drift is None or drift.estimate > 0)
    return ConsistencyReport(residuals, estimates, flags)

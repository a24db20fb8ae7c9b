"""Nested cone coverings and last-entry times of the retracted walk.

Cones are ShortLex cones ``C(w)`` (normal forms with prefix ``w``); a cone
type is an acceptor state.  Distances to cone complements are invariant
under left multiplication, so they are read off one ball around the type
representatives; suffixes too long for that ball fall back to an exact
breadth-first search on the group, run on a window of the word (see
:class:`ConeGeometry`).

Depth conventions: ``Int_{3L1} C(w)`` only starts ``3 L1`` levels below
``w``, so covering depths count levels past the seeding shell.
"""
from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .automata import Acceptor, recurrent_subgraph
from .ball import CayleyBall
from .coxeter import CoxeterSystem, Element
from .green import EstimatorReport, agree
from .walk import BuildingParams, TrajectoryRecord

__all__ = [
    "SeedingFailed",
    "TooFewRecords",
    "hyperbolicity_constant",
    "choose_L1",
    "ConeGeometry",
    "TypeCovering",
    "CoveringSpec",
    "PropertyReport",
    "build_covering",
    "build_covering_spec",
    "verify_covering",
    "LastEntryRecord",
    "WSample",
    "YSample",
    "detect_last_entries",
    "extract_W_Y",
    "ErgodicAverages",
    "ergodic_averages",
    "CrosscheckReport",
    "formula_crosscheck",
    "tail_fit",
]


class SeedingFailed(RuntimeError):
    pass


class TooFewRecords(ValueError):
    pass


# ---------------------------------------------------------------------------
# L1


def hyperbolicity_constant(sys: CoxeterSystem, acc: Acceptor, radius: int = 8) -> int:
    """Thinness of normal-form triangles ``(e, u, v)`` with ``u, v`` in ``B_radius``.

    Sides are the normal-form paths ``e -> u``, ``e -> v`` and ``u -> v``
    (``u`` followed by the normal form of ``u^-1 v``); by left invariance
    every triangle with vertices in the ball is a translate of one through
    ``e``.  Distances are exact graph distances in ``B_{4 radius}``.
    """
    from scipy.sparse.csgraph import shortest_path

    ball = CayleyBall(acc, 4 * radius)
    inner = int(ball.level_start[radius + 1])
    mid = int(ball.level_start[2 * radius + 1])
    D = np.empty((mid, mid), dtype=np.int32)
    g = ball.graph()
    for lo in range(0, mid, 32):
        idx = np.arange(lo, min(lo + 32, mid))
        D[idx] = shortest_path(g, unweighted=True, directed=False, indices=idx)[:, :mid]
    words = [ball.word(u) for u in range(inner)]
    radial = [np.array([ball.index(w[:k]) for k in range(len(w) + 1)]) for w in words]
    best = 0
    for i in range(inner):
        inv = sys.inverse(Element(words[i])).word
        for j in range(i + 1, inner):
            w = list(words[i])
            third = [ball.index(tuple(w))]
            for a in sys.multiply_word(inv, words[j]):
                sys._multiply(w, a)
                third.append(ball.index(tuple(w)))
            third = np.array(third)
            sides = (radial[i], radial[j], third)
            for k in range(3):
                others = np.concatenate([sides[(k + 1) % 3], sides[(k + 2) % 3]])
                best = max(best, int(D[np.ix_(sides[k], others)].min(axis=1).max()))
    return best


def choose_L1(sys: CoxeterSystem, acc: Acceptor, L0: int, override: int | None = None, radius: int = 8) -> int:
    """``max(L0, delta_hat) + 1``, with ``e(0)`` folded into ``delta_hat``; or ``override``."""
    if override is not None:
        return int(override)
    return max(int(L0), hyperbolicity_constant(sys, acc, radius)) + 1


# ---------------------------------------------------------------------------
# cone geometry


class _Unsafe(Exception):
    pass


def _descent_local(refl, word, s, safe_start: bool) -> int:
    r = s
    for j in range(len(word) - 1, -1, -1):
        a = word[j]
        if r == a:
            return j
        r = refl[r][a]
        if r < 0:
            return -1
    if not safe_start:
        raise _Unsafe
    return -1


def _append_local(refl, n, word, x, safe_start: bool) -> int:
    r = x
    best = -1
    best_t = -1
    for i in range(len(word) - 1, -1, -1):
        r = refl[r][word[i]]
        if r < 0:
            break
        if r < n and r < word[i]:
            best, best_t = i, r
    else:
        if not safe_start:
            raise _Unsafe
    if best < 0:
        word.append(x)
        return len(word) - 1
    word.insert(best, best_t)
    return best


def _multiply_local(refl, n, word: list, s: int, safe_start: bool) -> int:
    """``word <- NF(word s)`` on a window; raises :class:`_Unsafe` if the rewrite might reach before it."""
    j = _descent_local(refl, word, s, safe_start)
    if j < 0:
        return _append_local(refl, n, word, s, safe_start)
    tail = word[j + 1:]
    del word[j:]
    first = j
    for x in tail:
        first = min(first, _append_local(refl, n, word, x, safe_start))
    return first


def capped_distance(sys: CoxeterSystem, word: Sequence[int], r: int, cap: int) -> int:
    """``min(d(x, W - C(word[:r])), cap + 1)`` for ``x = word`` by breadth-first search."""
    refl, n = sys._refl, sys.n
    word = tuple(word)
    W = min(len(word), max(4 * cap, 32))
    while True:
        p = len(word) - W
        try:
            return _bfs_window(refl, n, word, p, r, cap)
        except _Unsafe:
            W = min(len(word), 2 * W)


def _bfs_window(refl, n, word, p, r, cap):
    safe = p == 0
    head = word[p:r] if p < r else ()
    cut = r - p
    start = word[p:]
    seen = {start}
    frontier = [start]
    for d in range(1, cap + 1):
        nxt = []
        for node in frontier:
            for s in range(n):
                w = list(node)
                first = _multiply_local(refl, n, w, s, safe)
                if cut > 0 and first < cut and tuple(w[:cut]) != head:
                    return d
                t = tuple(w)
                if t not in seen:
                    seen.add(t)
                    nxt.append(t)
        frontier = nxt
    return cap + 1


class ConeGeometry:
    """Capped distances ``d(w_T y, W - C(w_T))`` for every cone type ``T``.

    Parameters
    ----------
    acc : Acceptor
    cap : int
        Largest distance that must be resolved (``3 L1``).
    reach : int
        Suffix length served from the ball; longer suffixes use
        :func:`capped_distance`.
    """

    def __init__(self, acc: Acceptor, cap: int, reach: int, types: Iterable[int] | None = None,
                 max_nodes: int = 8_000_000):
        self.acc = acc
        self.system = acc.system
        self.cap = int(cap)
        self.reach = int(reach)
        reps = acc.element_rep
        types = list(range(acc.n_states)) if types is None else sorted(set(types))
        self.types = types
        longest = max(len(reps[t]) for t in types)
        self.ball = CayleyBall(acc, longest + self.reach + self.cap, max_nodes=max_nodes)
        self.root = {t: self.ball.index(reps[t]) for t in types}
        self._dist: dict[int, np.ndarray] = {}

    def distances(self, T: int) -> np.ndarray:
        """Per-node capped distances for the cone of ``w_T`` (exact up to length ``|w_T| + reach``)."""
        if T not in self._dist:
            self._dist[T] = self.ball.distance_to_complement(self.root[T], self.cap).astype(np.int16)
        return self._dist[T]

    def distance(self, T: int, y: Sequence[int], cap: int | None = None) -> int:
        cap = self.cap if cap is None else min(cap, self.cap)
        rep = self.acc.element_rep[T]
        if len(y) <= self.reach:
            u = self.root[T]
            child = self.ball.child
            for a in y:
                u = child[u, a]
                if u < 0:
                    raise ValueError("suffix is not a continuation of the cone type")
            return min(int(self.distances(T)[u]), cap + 1)
        # the subcone at y[:m] lies inside C(w_T), so its distance is a lower bound
        m = len(y) - self.reach
        sub = self.acc.run(tuple(rep) + tuple(y[:m]))
        if sub in self.root and self.distance(sub, y[m:], cap) > cap:
            return cap + 1
        return capped_distance(self.system, tuple(rep) + tuple(y), len(rep), cap)


# ---------------------------------------------------------------------------
# coverings


@dataclass(frozen=True)
class TypeCovering:
    """``Cov(T)`` up to a finite depth.

    ``offsets[i]`` is a suffix ``u_i`` with ``w_T u_i`` in normal form and
    ``targets[i]`` its cone type.  ``fill_start`` is the suffix length from
    which every uncovered interior element was added.
    """

    type_id: int
    offsets: tuple[tuple[int, ...], ...]
    targets: tuple[int, ...]
    n_seeds: int
    fill_start: int
    depth: int
    _by_length: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        by_len: dict[int, dict] = {}
        for u, t in zip(self.offsets, self.targets):
            by_len.setdefault(len(u), {})[u] = t
        object.__setattr__(self, "_by_length", by_len)
        object.__setattr__(self, "_lengths", sorted(by_len))

    @property
    def horizon(self) -> int:
        return self.fill_start + self.depth

    def match(self, y: Sequence[int]) -> tuple[tuple[int, ...], int] | None:
        """The offset that is a prefix of ``y``, if any (offsets are prefix-free)."""
        for n in self._lengths:
            if n > len(y):
                break
            key = tuple(y[:n])
            t = self._by_length[n].get(key)
            if t is not None:
                return key, t
        return None

    def count_within(self, n: int) -> int:
        return sum(1 for u in self.offsets if len(u) <= n)


@dataclass
class CoveringSpec:
    """Coverings for all recurrent types plus the level-0 shell ``M_0 = S_{K+1}``."""

    acc: Acceptor
    L1: int
    K: int
    per_type: dict
    recurrent: frozenset
    finite: frozenset
    geometry: ConeGeometry = field(repr=False)

    def match(self, T: int, y: Sequence[int]) -> tuple[tuple[int, ...], int] | None:
        """Offset of ``Cov(T)`` that prefixes ``y``, extending the fill lazily past the built depth.

        Past the horizon the fill rule adds, level by level, every uncovered
        interior element of recurrent type; along ``y`` that is the first such
        prefix, since nothing shorter covers it.
        """
        tc = self.per_type[T]
        hit = tc.match(y)
        if hit is not None or len(y) <= tc.horizon:
            return hit
        rep = tuple(self.acc.element_rep[T])
        big = 3 * self.L1
        q = self.acc.run(rep + tuple(y[:tc.horizon]))
        for m in range(tc.horizon + 1, len(y) + 1):
            q = self.acc.step(q, y[m - 1])
            if q in self.recurrent and self.geometry.distance(T, y[:m], cap=big) > big:
                return tuple(y[:m]), q
        return None

    def seed_root(self, word: Sequence[int]) -> tuple[int, ...] | None:
        """Level-0 root of a long normal form: its prefix of length ``K + 1`` if that has a covering."""
        if len(word) < self.K + 1:
            return None
        root = tuple(word[:self.K + 1])
        return root if self.acc.run(root) in self.per_type else None


def build_covering(acc: Acceptor, type_id: int, L1: int, depth: int, geometry: ConeGeometry | None = None,
                   recurrent: frozenset | None = None) -> TypeCovering:
    """Seed and fill ``Cov(T)`` for the representative ``w_T``.

    Seeding takes, in ShortLex order, the first element of
    ``Int_{3L1} C(w_T)`` of each recurrent type not yet realized whose cone
    is disjoint from the earlier seeds.  Filling then adds every uncovered
    interior element of recurrent type at suffix lengths
    ``fill_start .. fill_start + depth``, where ``fill_start`` is the length
    of the longest seed.

    Raises
    ------
    SeedingFailed
        If some recurrent type does not occur in the interior within the
        geometry ball.
    """
    if recurrent is None:
        recurrent = recurrent_subgraph(acc).recurrent_states
    if type_id not in recurrent:
        raise ValueError(f"cone type {type_id} is not recurrent")
    if geometry is None:
        geometry = ConeGeometry(acc, 3 * L1, 3 * L1 + depth + 16, types=[type_id])
    ball = geometry.ball
    big = 3 * L1
    dist = geometry.distances(type_id)
    root = geometry.root[type_id]
    base = int(ball.length[root])
    mask = ball.cone_mask(root)
    limit = base + geometry.reach  # exact distances up to this length
    covered = np.zeros(ball.size, dtype=bool)
    state = ball.state
    need = set(recurrent)
    offsets: list[int] = []

    def take(u: int):
        offsets.append(u)
        covered[u] = True

    def propagate(lo_level: int, hi_level: int):
        for k in range(lo_level, hi_level + 1):
            sl = slice(int(ball.level_start[k]), int(ball.level_start[k + 1]))
            covered[sl] |= covered[ball.parent[sl]]

    # seeding, one level at a time so that cones of earlier seeds are known
    k = base
    while need and k < limit:
        k += 1
        propagate(k, k)
        lo, hi = int(ball.level_start[k]), int(ball.level_start[k + 1])
        cand = np.nonzero(mask[lo:hi] & (dist[lo:hi] > big) & ~covered[lo:hi])[0] + lo
        for u in cand:
            s = int(state[u])
            if s in need:
                need.discard(s)
                take(int(u))
    if need:
        raise SeedingFailed(
            f"types {sorted(need)} not found in Int_{big} C({acc.system.format(acc.element_rep[type_id])}) "
            f"within {geometry.reach} levels")
    n_seeds = len(offsets)
    fill_start = k - base
    top = min(k + depth, limit)
    for j in range(k, top + 1):
        propagate(j, j)
        lo, hi = int(ball.level_start[j]), int(ball.level_start[j + 1])
        sl = np.arange(lo, hi)
        sel = sl[mask[lo:hi] & (dist[lo:hi] > big) & ~covered[lo:hi]]
        for u in sel:
            if int(state[u]) in recurrent:
                take(int(u))
    words = [ball.word(u)[base:] for u in offsets]
    targets = [int(state[u]) for u in offsets]
    return TypeCovering(type_id, tuple(words), tuple(targets), n_seeds, fill_start, top - k)


def build_covering_spec(acc: Acceptor, L1: int, depth: int, reach: int | None = None,
                        max_nodes: int = 8_000_000) -> CoveringSpec:
    rs = recurrent_subgraph(acc)
    recurrent = frozenset(rs.recurrent_states)
    if reach is None:
        reach = 3 * L1 + depth + 16
    geometry = ConeGeometry(acc, 3 * L1, reach, types=recurrent, max_nodes=max_nodes)
    per_type = {t: build_covering(acc, t, L1, depth, geometry, recurrent) for t in sorted(recurrent)}
    return CoveringSpec(acc, L1, rs.K, per_type, recurrent, frozenset(rs.finite_cone_states), geometry)


@dataclass
class PropertyReport:
    type_id: int
    passed: dict
    details: dict

    @property
    def ok(self) -> bool:
        return all(self.passed.values())


def verify_covering(acc: Acceptor, cov: CoveringSpec, depth: int) -> list[PropertyReport]:
    """Check the six covering properties for every type, ``depth`` levels past each seeding shell.

    1. offsets lie in ``Int_{3L1}``; 2. their cones (``depth`` levels deep)
    stay in ``Int_{L1}``; 3. the cones are pairwise disjoint; 4. the targets
    are exactly the recurrent types; 5. uncovered elements lie in
    ``∂_{3L1}``, in a finite cone, or within the witnessed distance ``L`` of
    the root; 6. offsets within ``n`` levels grow at most linearly.
    """
    geo = cov.geometry
    ball = geo.ball
    big, small = 3 * cov.L1, cov.L1
    reports = []
    for T, tc in cov.per_type.items():
        root = geo.root[T]
        base = int(ball.length[root])
        dist = geo.distances(T)
        mask = ball.cone_mask(root)
        top_level = base + min(tc.fill_start + depth, geo.reach)
        end = int(ball.level_start[top_level + 1])
        nodes = [ball.index(tuple(acc.element_rep[T]) + u) for u in tc.offsets]
        passed, details = {}, {}
        # 1
        passed["1_interior"] = all(int(dist[u]) > big for u in nodes)
        # 2
        sub = np.zeros(ball.size, dtype=bool)
        sub[nodes] = True
        lo_level = base + 1
        worst = big + 1
        sub_end = min(ball.radius - big, base + geo.reach)
        for k in range(lo_level, sub_end + 1):
            sl = slice(int(ball.level_start[k]), int(ball.level_start[k + 1]))
            sub[sl] |= sub[ball.parent[sl]]
        in_sub = np.nonzero(sub[:int(ball.level_start[sub_end + 1])])[0]
        in_sub = in_sub[ball.length[in_sub] <= np.minimum(ball.length[np.array(nodes)].max() + depth, sub_end)] \
            if len(nodes) else in_sub
        if len(in_sub):
            worst = int(dist[in_sub].min())
        passed["2_subcones_in_L1_interior"] = worst > small
        details["2_min_distance"] = worst
        # 3
        ws = sorted(tc.offsets, key=lambda u: (len(u), u))
        pref = set()
        disjoint = True
        for u in ws:
            if any(u[:i] in pref for i in range(1, len(u) + 1)):
                disjoint = False
                break
            pref.add(u)
        passed["3_disjoint"] = disjoint and len(set(tc.offsets)) == len(tc.offsets)
        # 4
        passed["4_all_recurrent_types"] = set(tc.targets) == set(cov.recurrent)
        # 5
        region = np.nonzero(mask[:end])[0]
        region = region[region != root]
        cov_mask = np.zeros(ball.size, dtype=bool)
        cov_mask[nodes] = True
        for k in range(base + 1, top_level + 1):
            sl = slice(int(ball.level_start[k]), int(ball.level_start[k + 1]))
            cov_mask[sl] |= cov_mask[ball.parent[sl]]
        residue = region[~cov_mask[region]]
        fin = np.zeros(acc.n_states, dtype=bool)
        fin[list(cov.finite)] = True
        in_finite = _in_finite_branch(ball, residue, fin, base)
        deep = residue[(dist[residue] > big) & ~in_finite]
        L = int(ball.length[deep].max()) - base if len(deep) else 0
        passed["5_residue"] = L < tc.fill_start
        details["5_witnessed_L"] = L
        details["5_residue_in_finite_cones"] = int(((dist[residue] > big) & in_finite).sum())
        # 6
        span = min(tc.fill_start + depth, geo.reach)
        counts = [tc.count_within(n) for n in range(1, span + 1)]
        window = np.arange(tc.fill_start, span + 1)
        ratios = np.array([counts[n - 1] / n for n in window])
        half = max(len(ratios) // 2, 1)
        details["6_counts"] = counts
        details["6_ratio_per_level"] = [round(float(r), 6) for r in ratios]
        # bounded |Cov ∩ B_n| / n over the fill window (the cone spheres themselves grow exponentially)
        passed["6_linear_growth"] = bool(ratios[half:].max() <= 2 * ratios[:half].max())
        details["6_sphere_sizes"] = [int(mask[ball.level_start[base + n]:ball.level_start[base + n + 1]].sum())
                                     for n in window]
        reports.append(PropertyReport(T, passed, details))
    return reports


def _in_finite_branch(ball: CayleyBall, nodes: np.ndarray, finite_state: np.ndarray, base: int) -> np.ndarray:
    """Whether each node's ancestor chain below level ``base`` enters a finite-cone state."""
    out = finite_state[ball.state[nodes]]
    cur = nodes.copy()
    while True:
        up = ball.length[cur] > base + 1
        if not up.any():
            return out
        cur = np.where(up, ball.parent[cur], cur)
        out |= finite_state[ball.state[cur]] & up
# ---------------------------------------------------------------------------
# last entries


@dataclass(frozen=True)
class LastEntryRecord:
    k: int
    e_k: int
    R_k: tuple[int, ...]
    X_at_entry: tuple[int, ...]
    censored: bool
    type_id: int
    offset: tuple[int, ...]


def _lcp(a: bytes, b: bytes, hint: int = 0) -> int:
    lo, hi = 0, min(len(a), len(b))
    if hint:
        hint = min(hint, hi)
        if a[:hint] == b[:hint]:
            lo = hint
        else:
            hi = hint
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if a[lo:mid] == b[lo:mid]:
            lo = mid
        else:
            hi = mid - 1
    return lo


def detect_last_entries(traj: TrajectoryRecord, cov: CoveringSpec, buffer: int | None = None) -> list[LastEntryRecord]:
    """Last entry times ``e_k`` and roots ``R_k`` along one path (horizon ``N`` = path length).

    The roots are the nested covering cones containing the final position.
    ``tau_k`` is the last step outside ``Int_{L1} C(R_k)``; ``e_k`` is the
    first later step inside ``Int_{3L1} C(R_k)``.  A step inside
    ``C(R_{k+1})`` counts as inside ``Int_{L1} C(R_k)`` (covering property 2).
    Records with ``e_k > N - buffer`` are flagged censored.
    """
    if traj.steps is None:
        raise ValueError("trajectory was simulated without keep_words")
    words = list(traj.steps.words())
    N = len(words) - 1
    B = max(50, N // 10) if buffer is None else int(buffer)
    if N <= B:
        return []
    final = words[N]
    r0 = cov.seed_root(final)
    if r0 is None:
        return []
    acc = cov.acc
    roots: list[int] = [len(r0)]
    types: list[int] = [acc.run(r0)]
    offs: list[tuple] = [r0]
    while True:
        hit = cov.match(types[-1], final[roots[-1]:])
        if hit is None:
            break
        u, t = hit
        roots.append(roots[-1] + len(u))
        types.append(t)
        offs.append(u)
    depth = len(roots)
    geo = cov.geometry
    L1, big = cov.L1, 3 * cov.L1
    # bad[n]: first level whose L1-interior misses X_n
    bad = np.empty(N + 1, dtype=np.int64)
    lcp = 0
    keep = traj.steps.keep
    for n in range(N + 1):
        hint = min(lcp, int(keep[n])) if n else 0
        lcp = _lcp(words[n], final, hint)
        kmax = bisect.bisect_right(roots, lcp) - 1
        if kmax < 0:
            bad[n] = 0
            continue
        y = words[n][roots[kmax]:]
        ok = geo.distance(types[kmax], y, cap=L1) > L1
        bad[n] = kmax + 1 if ok else kmax
    tau = np.full(depth, -1, dtype=np.int64)
    cur = depth
    for n in range(N, -1, -1):
        b = int(bad[n])
        if b < cur:
            tau[b:cur] = n
            cur = b
            if cur == 0:
                break
    records = []
    for j in range(depth):
        e = None
        for m in range(int(tau[j]) + 1, N + 1):
            if geo.distance(types[j], words[m][roots[j]:], cap=big) > big:
                e = m
                break
        if e is None:
            break
        R = final[:roots[j]]
        records.append(LastEntryRecord(j, e, tuple(R), tuple(words[e]), e > N - B, types[j], tuple(offs[j])))
    return records


@dataclass(frozen=True)
class WSample:
    type_id: int
    offset: tuple[int, ...]
    tail: tuple[int, ...]


@dataclass(frozen=True)
class YSample:
    prev_type: int
    type_id: int
    offset: tuple[int, ...]


def extract_W_Y(records: Sequence[LastEntryRecord]) -> tuple[list[WSample], list]:
    """``W_k = (T(R_k), R_{k-1}^-1 R_k, R_k^-1 X_{e_k})`` and ``Y_k``; ``Y_0`` is the root ``R_0``.

    Only uncensored records are used.  Raises :class:`TooFewRecords` below two.
    """
    recs = [r for r in records if not r.censored]
    if len(recs) < 2:
        raise TooFewRecords(f"{len(recs)} uncensored records")
    W, Y = [], []
    prefix: tuple = ()
    for i, r in enumerate(recs):
        if r.k != i:
            raise ValueError("records must be consecutive levels starting at 0")
        prefix = prefix + r.offset
        if prefix != r.R_k or r.X_at_entry[:len(r.R_k)] != r.R_k:
            raise ValueError(f"reconstruction failed at level {r.k}")
        W.append(WSample(r.type_id, r.offset, r.X_at_entry[len(r.R_k):]))
        Y.append(r.R_k if i == 0 else YSample(recs[i - 1].type_id, r.type_id, r.offset))
    return W, Y


# ---------------------------------------------------------------------------
# averages


@dataclass(frozen=True)
class ErgodicAverages:
    """Means over increments ``k >= 1`` pooled over paths."""

    n_increments: int
    mean_de: float
    se_de: float
    mean_d: float
    se_d: float
    mean_logq: float
    se_logq: float
    drift_ratio: float
    se_drift_ratio: float
    hq_ratio: float
    se_hq_ratio: float
    tail_slope: float
    tail_r2: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _ratio(num: np.ndarray, den: np.ndarray) -> tuple[float, float]:
    r = num.mean() / den.mean()
    resid = num - r * den
    se = math.sqrt(resid.var(ddof=1) / len(num)) / den.mean()
    return float(r), float(se)


def tail_fit(samples: np.ndarray, quantile: float = 0.99) -> tuple[float, float]:
    """Least-squares line through ``log P(X > t)``; returns ``(slope, R^2)``."""
    x = np.sort(np.asarray(samples, dtype=np.float64))
    top = np.quantile(x, quantile)
    ts = np.unique(x[x < top])
    surv = np.array([(x > t).mean() for t in ts])
    keep = surv > 0
    ts, ls = ts[keep], np.log(surv[keep])
    if len(ts) < 3:
        return 0.0, 0.0
    slope, icpt = np.polyfit(ts, ls, 1)
    fit = slope * ts + icpt
    ss_res = float(((ls - fit) ** 2).sum())
    ss_tot = float(((ls - ls.mean()) ** 2).sum())
    return float(slope), 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0


def ergodic_averages(paths: Sequence[Sequence[LastEntryRecord]], params: BuildingParams,
                     min_increments: int = 30) -> ErgodicAverages:
    """Pooled increment statistics ``e_k - e_{k-1}``, ``l(u_k)``, ``log q_{u_k}`` for ``k >= 1``."""
    lq = params.log_q
    de, d, logq = [], [], []
    for recs in paths:
        recs = [r for r in recs if not r.censored]
        for a, b in zip(recs, recs[1:]):
            de.append(b.e_k - a.e_k)
            d.append(len(b.offset))
            logq.append(float(lq[list(b.offset)].sum()))
    if len(de) < min_increments:
        raise TooFewRecords(f"{len(de)} increments, need {min_increments}")
    de, d, logq = (np.array(v, dtype=np.float64) for v in (de, d, logq))
    n = len(de)
    se = lambda v: float(v.std(ddof=1) / math.sqrt(n))
    r, se_r = _ratio(d, de)
    h, se_h = _ratio(logq, de)
    slope, r2 = tail_fit(de)
    return ErgodicAverages(n, float(de.mean()), se(de), float(d.mean()), se(d), float(logq.mean()), se(logq),
                           r, se_r, h, se_h, slope, r2)


@dataclass
class CrosscheckReport:
    residuals: dict
    flags: dict
    values: dict

    @property
    def passed(self) -> bool:
        return all(self.flags.values())

    def to_dict(self) -> dict:
        return {"residuals": self.residuals, "flags": self.flags, "values": self.values}


def formula_crosscheck(avg: ErgodicAverages, drift: EstimatorReport, hq: EstimatorReport | None = None,
                       hbar: EstimatorReport | None = None) -> CrosscheckReport:
    """Drift and thickness formulas against direct estimates; infer ``H(Y) = hbar * E[de]``.

    The covering-based entropy rate is ``H(Y) v / E[d]``, which must agree
    with ``hbar`` whenever the drift formula holds.
    """
    res, flags, vals = {}, {}, {}
    ok, diff, tol = agree(drift.estimate, drift.stderr, avg.drift_ratio, avg.se_drift_ratio, rel=0.0)
    res["drift_formula"] = diff
    vals["drift_formula_tolerance"] = tol
    flags["drift_formula"] = ok
    if hq is not None:
        ok, diff, tol = agree(hq.estimate, hq.stderr, avg.hq_ratio, avg.se_hq_ratio, rel=0.0)
        res["hq_formula"] = diff
        vals["hq_formula_tolerance"] = tol
        flags["hq_formula"] = ok
    if hbar is not None:
        H_Y = hbar.estimate * avg.mean_de
        se_H = math.hypot(hbar.stderr * avg.mean_de, hbar.estimate * avg.se_de)
        h_cov = H_Y * drift.estimate / avg.mean_d
        rel = math.sqrt((se_H / H_Y) ** 2 + (drift.stderr / drift.estimate) ** 2 + (avg.se_d / avg.mean_d) ** 2) \
            if H_Y > 0 else 0.0
        vals["H_Y"] = H_Y
        vals["H_Y_stderr"] = se_H
        vals["hbar_coverings"] = h_cov
        vals["hbar_coverings_stderr"] = abs(h_cov) * rel
        res["h_G_formula"] = abs(h_cov - hbar.estimate)
        flags["H_Y_positive"] = H_Y > 0
    return CrosscheckReport(res, flags, vals)

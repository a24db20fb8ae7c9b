"""Isotropic walks on regular buildings, observed through the retraction onto ``W``.

The building is never built.  One elementary ``s``-step of the chamber walk,
seen from the base chamber, moves ``u -> us`` for sure when ``us`` is longer
(only one chamber in the far panel, all at Weyl distance ``us``) and with
probability ``1/q_s`` when it is shorter (exactly one of the ``q_s``
neighbours is the projection towards the base chamber).  A step of
displacement ``w`` is a uniformly chosen minimal gallery of type ``w``, i.e.
elementary steps along a reduced word of ``w``.

Two engines share one random-number layout (one uniform chooses ``w``, one
per letter decides a descent), so they produce identical paths:

* the *ball engine* runs a compiled kernel on a :class:`~.ball.CayleyBall`
  and is used whenever the ball of radius ``n_steps * L0`` is affordable;
* the *word engine* multiplies normal forms directly and handles long walks
  on groups of exponential growth.
"""
from __future__ import annotations

import bisect
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse

from .automata import Acceptor, build_acceptor, cone_type
from .ball import CayleyBall, MemoryBudgetExceeded
from .coxeter import INFINITY, CoxeterSystem, Element
from .rng import path_uniforms

__all__ = [
    "WalkError",
    "OddBondMismatch",
    "NotAProbability",
    "MissingGeneratorSupport",
    "InvalidThickness",
    "LengthCapExceeded",
    "TypeMismatch",
    "WrongMode",
    "MemoryBudgetExceeded",
    "BuildingParams",
    "WalkSpec",
    "Distribution",
    "TrajectoryRecord",
    "Trajectories",
    "LiftedEntropy",
    "InvarianceReport",
    "RetractedKernel",
    "acceptor_for",
    "ball_for",
    "validate",
    "q_w",
    "elementary_step",
    "retracted_step",
    "one_step_law",
    "simulate",
    "exact_distribution",
    "exact_sequence",
    "lift_to_building",
    "verify_cone_invariance",
    "thin_oracle",
    "tree_oracle",
]


class WalkError(ValueError):
    pass


class OddBondMismatch(WalkError):
    pass


class NotAProbability(WalkError):
    pass


class MissingGeneratorSupport(WalkError):
    pass


class InvalidThickness(WalkError):
    pass


class LengthCapExceeded(RuntimeError):
    pass


class TypeMismatch(ValueError):
    pass


class WrongMode(ValueError):
    pass


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class BuildingParams:
    """Thickness parameters ``q_s`` indexed by generator (0-based)."""

    q: tuple[int, ...]

    def __post_init__(self):
        q = tuple(int(x) for x in self.q)
        if any(x < 1 for x in q):
            raise InvalidThickness(f"thickness.q entries must be integers >= 1, got {q}")
        object.__setattr__(self, "q", q)

    @classmethod
    def uniform(cls, n: int, q: int) -> "BuildingParams":
        return cls((q,) * n)

    @property
    def thin(self) -> bool:
        return all(x == 1 for x in self.q)

    @property
    def log_q(self) -> np.ndarray:
        return np.log(np.array(self.q, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class WalkSpec:
    """Step law ``(w, p_w)`` of an isotropic walk of bounded range.

    Build with :meth:`from_pairs`, which normalizes words and merges
    duplicates.  ``words`` optionally fixes the reduced word used for each
    step; by default it is the normal form.
    """

    system: CoxeterSystem
    steps: tuple[tuple[Element, float], ...]
    words: tuple[tuple[int, ...], ...] = ()

    def __post_init__(self):
        if not self.words:
            object.__setattr__(self, "words", tuple(w.word for w, _ in self.steps))
        if len(self.words) != len(self.steps):
            raise WalkError("one reduced word per step is required")
        for (w, _), word in zip(self.steps, self.words):
            if len(word) != w.length or self.system.multiply_word((), word) != w.word:
                raise WalkError(f"{self.system.format(word)} is not a reduced word for {self.system.format(w)}")

    @classmethod
    def from_pairs(cls, sys: CoxeterSystem, pairs: Iterable) -> "WalkSpec":
        """``pairs`` of ``(word, prob)``; words are strings or 0-based tuples."""
        merged: dict[Element, float] = {}
        for word, p in pairs:
            p = float(p)
            if not math.isfinite(p) or p < 0:
                raise NotAProbability(f"walk.steps: probability {p} for {word!r} is not in [0, 1]")
            if p == 0:
                continue
            w = sys.element(word)
            merged[w] = merged.get(w, 0.0) + p
        steps = tuple(sorted(merged.items(), key=lambda kv: kv[0]))
        return cls(sys, steps)

    @classmethod
    def nearest_neighbour(cls, sys: CoxeterSystem, probs: Sequence[float] | None = None) -> "WalkSpec":
        if probs is None:
            probs = [1.0 / sys.n] * sys.n
        return cls.from_pairs(sys, [((s,), p) for s, p in enumerate(probs)])

    def with_words(self, words: dict) -> "WalkSpec":
        """Same law with other reduced words for some steps (gallery choice)."""
        alt = tuple(tuple(words.get(w, word)) for (w, _), word in zip(self.steps, self.words))
        return WalkSpec(self.system, self.steps, alt)

    @property
    def L0(self) -> int:
        return max(w.length for w, _ in self.steps)

    @property
    def probabilities(self) -> np.ndarray:
        return np.array([p for _, p in self.steps], dtype=np.float64)

    def prob(self, w: Element) -> float:
        for x, p in self.steps:
            if x == w:
                return p
        return 0.0

    def eps0(self, params: BuildingParams) -> float:
        return min(p / q_w(params, w) for w, p in self.steps)


def validate(params: BuildingParams, spec: WalkSpec, sys: CoxeterSystem | None = None) -> tuple[int, float]:
    """Check the walk and thickness data; return ``(L0, eps0)``.

    Raises
    ------
    NotAProbability, MissingGeneratorSupport, OddBondMismatch, InvalidThickness
    """
    sys = spec.system if sys is None else sys
    if not sys.same_group(spec.system):
        raise WalkError("walk spec belongs to a different Coxeter system")
    n = sys.n
    if len(params.q) != n:
        raise InvalidThickness(f"thickness.q has {len(params.q)} entries, the group has {n} generators")
    if not params.thin and min(params.q) < 2:
        raise InvalidThickness("thickness.q: mixing thin (1) and thick (>= 2) generators is not a regular building")
    if not spec.steps:
        raise NotAProbability("walk.steps is empty")
    total = math.fsum(p for _, p in spec.steps)
    if abs(total - 1.0) > 1e-12:
        raise NotAProbability(f"walk.steps: probabilities sum to {total!r}, not 1")
    for s in range(n):
        if spec.prob(Element((s,))) <= 0:
            raise MissingGeneratorSupport(f"walk.steps: generator {s + 1} has zero probability")
    for s in range(n):
        for t in range(s + 1, n):
            m = sys.m[s][t]
            if m != INFINITY and m % 2 == 1 and params.q[s] != params.q[t]:
                raise OddBondMismatch(
                    f"thickness.q: m_{s + 1}{t + 1} = {m} is odd, so q_{s + 1} = {params.q[s]} "
                    f"must equal q_{t + 1} = {params.q[t]}")
    return spec.L0, spec.eps0(params)


def q_w(params: BuildingParams, w: Element | Sequence[int]) -> int:
    word = w.word if isinstance(w, Element) else w
    return math.prod(params.q[s] for s in word)


# ---------------------------------------------------------------------------
# single steps


def _branches(sys: CoxeterSystem, word: Sequence[int], s: int) -> tuple[tuple[int, ...], bool]:
    w = list(word)
    delta, _ = sys._multiply(w, s)
    return tuple(w), delta > 0


def elementary_step(sys: CoxeterSystem, u: Element, s: int, q_s: int, rng) -> Element:
    """One elementary ``s``-move of the retracted walk (uses one uniform)."""
    x = rng.random()
    ws, ascent = _branches(sys, u.word, s)
    if ascent or x < 1.0 / q_s:
        return Element(ws)
    return u


def _choose(cum: Sequence[float], x: float) -> int:
    return min(bisect.bisect_right(cum, x), len(cum) - 1)


def retracted_step(u: Element, spec: WalkSpec, params: BuildingParams, rng) -> Element:
    """One step of the retracted walk.

    Draws ``1 + L0`` uniforms, the same block the simulation engines use, so
    iterating this with :func:`~.rng.path_generator` reproduces a simulated path.
    """
    sys = spec.system
    U = rng.random(1 + spec.L0)
    k = _choose(np.cumsum(spec.probabilities).tolist(), U[0])
    w = list(u.word)
    for j, s in enumerate(spec.words[k]):
        pos = sys.descent_position(w, s)
        if pos < 0 or U[1 + j] < 1.0 / params.q[s]:
            sys._multiply(w, s)
    return Element(tuple(w))


def one_step_law(spec: WalkSpec, params: BuildingParams, u: Element, exact: bool = False) -> dict:
    """Full law of ``X_1`` given ``X_0 = u`` as ``{word: prob}``.

    With ``exact=True`` probabilities are :class:`fractions.Fraction`.
    """
    sys = spec.system
    one = Fraction(1) if exact else 1.0
    out: dict[tuple, object] = {}
    for (w, p), word in zip(spec.steps, spec.words):
        cur = {u.word: (Fraction(p) if exact else p)}
        for s in word:
            nxt: dict[tuple, object] = {}
            inv = one / params.q[s]
            for x, m in cur.items():
                xs, ascent = _branches(sys, x, s)
                if ascent:
                    nxt[xs] = nxt.get(xs, 0) + m
                else:
                    nxt[xs] = nxt.get(xs, 0) + m * inv
                    if params.q[s] > 1:
                        nxt[x] = nxt.get(x, 0) + m * (one - inv)
            cur = nxt
        for x, m in cur.items():
            out[x] = out.get(x, 0) + m
    return out


# ---------------------------------------------------------------------------
# shared caches


@lru_cache(maxsize=32)
def acceptor_for(sys: CoxeterSystem) -> Acceptor:
    return build_acceptor(sys)


@lru_cache(maxsize=8)
def ball_for(sys: CoxeterSystem, radius: int, max_nodes: int = 3_000_000) -> CayleyBall:
    return CayleyBall(acceptor_for(sys), radius, max_nodes=max_nodes)


def _ball_size(acc: Acceptor, radius: int, limit: int) -> int:
    T = acc.transitions
    counts = np.zeros(acc.n_states)
    counts[acc.start] = 1
    total = 1
    for _ in range(radius):
        nxt = np.zeros_like(counts)
        for s in range(T.shape[1]):
            ok = T[:, s] >= 0
            np.add.at(nxt, T[ok, s], counts[ok])
        counts = nxt
        total += int(counts.sum())
        if total > limit:
            return total
    return total


def _node_logq(ball: CayleyBall, params: BuildingParams) -> np.ndarray:
    lq = params.log_q
    out = np.zeros(ball.size)
    for k in range(1, ball.radius + 1):
        sl = slice(int(ball.level_start[k]), int(ball.level_start[k + 1]))
        out[sl] = out[ball.parent[sl]] + lq[ball.letter[sl]]
    return out


# ---------------------------------------------------------------------------
# exact laws


class RetractedKernel:
    """Sparse one-step matrix of the retracted walk on a ball.

    ``P[u, v]`` is the transition probability; mass that would leave the
    ball is dropped, which is exact as long as the walk has not reached the
    outer sphere and gives absorbing truncation otherwise.
    """

    def __init__(self, spec: WalkSpec, params: BuildingParams, ball: CayleyBall):
        self.spec, self.params, self.ball = spec, params, ball
        N = ball.size
        elem = {}
        for s in range(spec.system.n):
            u = np.arange(N)
            v = ball.nbr[:, s]
            ok = v >= 0
            up = ok & (ball.length[np.where(ok, v, 0)] > ball.length)
            down = ok & ~up
            inv = 1.0 / params.q[s]
            rows = np.concatenate([u[up], u[down], u[down]])
            cols = np.concatenate([v[up], v[down], u[down]])
            vals = np.concatenate([np.ones(up.sum()), np.full(down.sum(), inv), np.full(down.sum(), 1.0 - inv)])
            keep = vals > 0
            elem[s] = sparse.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(N, N))
        P = sparse.csr_matrix((N, N))
        for (w, p), word in zip(spec.steps, spec.words):
            K = sparse.identity(N, format="csr")
            for s in word:
                K = K @ elem[s]
            P = P + p * K
        self.matrix = P.tocsr()
        self.transpose = P.T.tocsr()

    def push(self, vec: np.ndarray) -> np.ndarray:
        return self.transpose @ vec


@dataclass
class Distribution:
    """Law of ``X_n``: ``mass`` maps elements to positive probabilities."""

    mass: dict
    n: int
    retained_mass: float = 1.0

    def __getitem__(self, w: Element) -> float:
        return self.mass.get(w, 0.0)

    def __len__(self) -> int:
        return len(self.mass)

    def total(self) -> float:
        return math.fsum(self.mass.values())

    def as_array(self) -> tuple[list[Element], np.ndarray]:
        items = sorted(self.mass.items(), key=lambda kv: kv[0])
        return [k for k, _ in items], np.array([v for _, v in items])


def _to_distribution(ball: CayleyBall, vec: np.ndarray, n: int, retained: float) -> Distribution:
    nz = np.nonzero(vec > 0)[0]
    return Distribution({Element(ball.word(int(u))): float(vec[u]) for u in nz}, n, retained)


def exact_sequence(spec: WalkSpec, params: BuildingParams, n_max: int, prune_epsilon: float = 0.0,
                   max_nodes: int = 3_000_000):
    """Yield ``(n, vector, retained_mass)`` for ``n = 0..n_max``; vectors live on :attr:`ball`.

    The ball used is returned as the first item ``(None, ball, None)``.
    """
    radius = max(n_max * spec.L0, 1)
    ball = ball_for(spec.system, radius, max_nodes)
    kernel = RetractedKernel(spec, params, ball)
    yield None, ball, None
    vec = np.zeros(ball.size)
    vec[0] = 1.0
    retained = 1.0
    yield 0, vec, retained
    for n in range(1, n_max + 1):
        vec = kernel.push(vec)
        if prune_epsilon > 0:
            small = (vec > 0) & (vec < prune_epsilon)
            vec[small] = 0.0
            retained = float(vec.sum())
        yield n, vec, retained


def exact_distribution(spec: WalkSpec, params: BuildingParams, n: int, prune_epsilon: float = 0.0,
                       max_nodes: int = 3_000_000) -> Distribution:
    """Exact law of ``X_n`` by ``n`` sparse convolution steps.

    Raises
    ------
    MemoryBudgetExceeded
        If the ball of radius ``n * L0`` has more than ``max_nodes`` elements.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    it = exact_sequence(spec, params, n, prune_epsilon, max_nodes)
    _, ball, _ = next(it)
    for k, vec, retained in it:
        if k == n:
            return _to_distribution(ball, vec, n, retained)
    raise AssertionError("unreachable")


@dataclass(frozen=True)
class LiftedEntropy:
    H_building: float
    H_retracted: float
    ElogQ: float
    approximate: bool = False

    def __iter__(self):
        return iter((self.H_building, self.H_retracted, self.ElogQ))


def _entropy_terms(p: np.ndarray, logq: np.ndarray) -> tuple[float, float, float]:
    p = np.asarray(p, dtype=np.float64)
    keep = p > 0
    p, logq = p[keep], logq[keep]
    logp = np.log(p)
    H_ret = -math.fsum(p * logp)
    ElogQ = math.fsum(p * logq)
    H_bld = -math.fsum(p * (logp - logq))
    return H_bld, H_ret, ElogQ


def lift_to_building(dist: Distribution, params: BuildingParams) -> LiftedEntropy:
    """Entropies of the building walk and of its retraction at step ``n``.

    ``H_building`` is evaluated from ``pi(u) / q_u`` directly, not as the sum
    of the other two, so the identity between them is a real check.
    """
    lq = params.log_q
    words = list(dist.mass)
    p = np.array([dist.mass[w] for w in words])
    logq = np.array([float(lq[list(w.word)].sum()) for w in words])
    H_bld, H_ret, ElogQ = _entropy_terms(p, logq)
    return LiftedEntropy(H_bld, H_ret, ElogQ, approximate=dist.retained_mass < 1.0)


# ---------------------------------------------------------------------------
# cone invariance


@dataclass(frozen=True)
class InvarianceReport:
    max_discrepancy: Fraction
    n_sources: int
    n_compared: int


def verify_cone_invariance(acc: Acceptor, spec: WalkSpec, params: BuildingParams,
                           w1: Element, w2: Element, depth: int) -> InvarianceReport:
    """Compare exact one-step laws from ``w1 u`` and ``w2 u`` into the ``L0``-interior.

    Raises
    ------
    TypeMismatch
        If ``w1`` and ``w2`` have different cone types.
    """
    if cone_type(acc, w1) != cone_type(acc, w2):
        raise TypeMismatch(f"{acc.system.format(w1)} and {acc.system.format(w2)} have different cone types")
    L0 = spec.L0
    radius = max(w1.length, w2.length) + depth + 2 * L0 + 1
    ball = CayleyBall(acc, radius)
    r1 = ball.index(w1.word)
    dist = ball.distance_to_complement(r1, max_dist=L0)
    k1 = w1.length
    interior = {ball.word(int(v))[k1:] for v in ball.cone_members(r1, depth + L0) if dist[v] > L0}
    worst = Fraction(0)
    sources = compared = 0
    for x in ball.cone_members(r1, depth):
        suffix = ball.word(int(x))[k1:]
        a = one_step_law(spec, params, Element(w1.word + suffix), exact=True)
        b = one_step_law(spec, params, Element(w2.word + suffix), exact=True)
        sources += 1
        for v in interior:
            pa = a.get(w1.word + v, Fraction(0))
            pb = b.get(w2.word + v, Fraction(0))
            if pa or pb:
                compared += 1
                worst = max(worst, abs(pa - pb))
    return InvarianceReport(worst, sources, compared)


# ---------------------------------------------------------------------------
# oracles


def thin_oracle(sys: CoxeterSystem, spec: WalkSpec, n: int, params: BuildingParams | None = None) -> Distribution:
    """Law of the walk on ``W`` itself by direct group multiplication."""
    if params is not None and not params.thin:
        raise WrongMode("thin_oracle needs q = 1 for every generator")
    cur = {(): 1.0}
    for _ in range(n):
        nxt: dict[tuple, float] = {}
        for u, m in cur.items():
            for w, p in spec.steps:
                v = sys.multiply_word(u, w.word)
                nxt[v] = nxt.get(v, 0.0) + m * p
        cur = nxt
    return Distribution({Element(k): v for k, v in cur.items()}, n)


class _TreeBuilding:
    """Chambers of the building of the infinite dihedral group with ``q_1 = q_2 = q``.

    Chambers are the edges of the ``(q+1)``-regular tree, two chambers are
    ``s``-adjacent when they share the vertex of type ``s``.  Vertices are
    created on demand; each knows its type, its depth below the base chamber
    and the type of the base vertex it hangs from.
    """

    def __init__(self, q: int):
        self.q = q
        self.vtype = [0, 1]
        self.depth = [0, 0]
        self.root_type = [0, 1]
        self.edges_at: list[list[int]] = [[0], [0]]
        self.ends: list[tuple[int, int]] = [(0, 1)]  # (parent-side vertex, child-side vertex)

    def _vertex_edges(self, v: int) -> list[int]:
        inc = self.edges_at[v]
        while len(inc) < self.q + 1:
            c = len(self.vtype)
            self.vtype.append(1 - self.vtype[v])
            self.depth.append(self.depth[v] + 1)
            self.root_type.append(self.root_type[v])
            self.edges_at.append([])
            e = len(self.ends)
            self.ends.append((v, c))
            inc.append(e)
            self.edges_at[c].append(e)
        return inc

    def vertex(self, chamber: int, s: int) -> int:
        a, b = self.ends[chamber]
        return a if self.vtype[a] == s else b

    def neighbours(self, chamber: int, s: int) -> list[int]:
        return [e for e in self._vertex_edges(self.vertex(chamber, s)) if e != chamber]

    def weyl_distance(self, chamber: int) -> tuple[int, ...]:
        if chamber == 0:
            return ()
        u = self.ends[chamber][0]
        first = self.root_type[u]
        return tuple((first + i) % 2 for i in range(self.depth[u] + 1))


def tree_oracle(q: int, spec: WalkSpec, n: int) -> Distribution:
    """Retracted law of the chamber walk on the tree building, by explicit chambers."""
    sys = spec.system
    if sys.n != 2 or sys.m[0][1] != INFINITY:
        raise WrongMode("tree_oracle needs the infinite dihedral group")
    tree = _TreeBuilding(int(q))
    cur = {0: 1.0}
    for _ in range(n):
        nxt: dict[int, float] = {}
        for x, m in cur.items():
            for (w, p), word in zip(spec.steps, spec.words):
                share = m * p / q ** len(word)
                front = [x]
                for s in word:
                    front = [y for c in front for y in tree.neighbours(c, s)]
                for y in front:
                    nxt[y] = nxt.get(y, 0.0) + share
        cur = nxt
    law: dict[Element, float] = {}
    for c, m in cur.items():
        key = Element(tree.weyl_distance(c))
        law[key] = law.get(key, 0.0) + m
    return Distribution(law, n)


# ---------------------------------------------------------------------------
# simulation


@dataclass
class TrajectoryRecord:
    """One simulated path.

    ``lengths`` and ``states`` have one entry per step (``None`` when the
    simulation kept checkpoints only); ``positions`` and ``logq`` one per
    checkpoint.
    """

    seed: int
    path_id: int
    checkpoints: tuple[int, ...]
    positions: tuple[Element, ...]
    lengths: np.ndarray | None
    logq: np.ndarray
    states: np.ndarray | None
    steps: "WordLog | None" = None


@dataclass
class WordLog:
    """Normal forms of every position, stored as (kept prefix, new suffix) per step."""

    keep: np.ndarray
    offsets: np.ndarray
    data: bytes

    def __len__(self) -> int:
        return len(self.keep)

    def words(self):
        """Iterate the normal forms of ``X_0, X_1, ...`` as ``bytes``."""
        buf = bytearray()
        data, off, keep = self.data, self.offsets, self.keep
        for t in range(len(keep)):
            del buf[int(keep[t]):]
            buf += data[off[t]:off[t + 1]]
            yield bytes(buf)


@dataclass
class Trajectories:
    """Batch of paths with array storage; indexing yields :class:`TrajectoryRecord`."""

    system: CoxeterSystem
    seed: int
    path_ids: np.ndarray
    checkpoints: tuple[int, ...]
    ckpt_lengths: np.ndarray
    ckpt_logq: np.ndarray
    lengths: np.ndarray | None
    states: np.ndarray | None
    engine: str
    _ckpt_nodes: np.ndarray | None = field(default=None, repr=False)
    _ckpt_words: list | None = field(default=None, repr=False)
    _ball: CayleyBall | None = field(default=None, repr=False)
    logs: list | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.path_ids)

    def position(self, i: int, c: int) -> Element:
        if self._ckpt_nodes is not None:
            return Element(self._ball.word(int(self._ckpt_nodes[i, c])))
        return Element(self._ckpt_words[i][c])

    def __getitem__(self, i: int) -> TrajectoryRecord:
        if not -len(self) <= i < len(self):
            raise IndexError(i)
        i %= len(self)
        return TrajectoryRecord(
            seed=self.seed,
            path_id=int(self.path_ids[i]),
            checkpoints=self.checkpoints,
            positions=tuple(self.position(i, c) for c in range(len(self.checkpoints))),
            lengths=None if self.lengths is None else self.lengths[i],
            logq=self.ckpt_logq[i],
            states=None if self.states is None else self.states[i],
            steps=None if self.logs is None else self.logs[i],
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))


def _compile_kernel():
    import numba

    @numba.njit(nogil=True, cache=True)
    def walk(nbr, length, state, cum, letters, wlen, inv_q, U, n_steps, ck, out_ck, out_len, out_state, per_step):
        P = U.shape[0]
        stride = 1 + letters.shape[1]
        nck = ck.shape[0]
        nw = cum.shape[0]
        for p in range(P):
            u = 0
            ci = 0
            while ci < nck and ck[ci] == 0:
                out_ck[p, ci] = u
                ci += 1
            if per_step:
                out_len[p, 0] = 0
                out_state[p, 0] = state[0]
            for t in range(n_steps):
                base = t * stride
                x = U[p, base]
                k = 0
                while k < nw - 1 and x >= cum[k]:
                    k += 1
                for j in range(wlen[k]):
                    s = letters[k, j]
                    v = nbr[u, s]
                    if v < 0:
                        return p
                    if length[v] > length[u] or U[p, base + 1 + j] < inv_q[s]:
                        u = v
                if per_step:
                    out_len[p, t + 1] = length[u]
                    out_state[p, t + 1] = state[u]
                while ci < nck and ck[ci] == t + 1:
                    out_ck[p, ci] = u
                    ci += 1
        return -1

    return walk


_KERNEL = None


def _kernel():
    global _KERNEL
    if _KERNEL is None:
        _KERNEL = _compile_kernel()
    return _KERNEL


def _step_tables(spec: WalkSpec):
    L0 = spec.L0
    letters = np.zeros((len(spec.steps), max(L0, 1)), dtype=np.int64)
    wlen = np.zeros(len(spec.steps), dtype=np.int64)
    for k, word in enumerate(spec.words):
        letters[k, :len(word)] = word
        wlen[k] = len(word)
    return np.cumsum(spec.probabilities), letters, wlen


_CHUNK = 512


def simulate(spec: WalkSpec, params: BuildingParams, n_steps: int, n_paths: int, seed: int = 0,
             checkpoints: Sequence[int] | None = None, *, engine: str = "auto", workers: int = 1,
             per_step: bool = True, keep_words: bool = False, path_offset: int = 0,
             length_cap: int = 20_000, max_nodes: int = 2_000_000) -> Trajectories:
    """Simulate ``n_paths`` independent retracted paths of ``n_steps`` steps.

    Path ``i`` draws from the stream keyed by ``(seed, path_offset + i)``, so
    results do not depend on ``workers`` or on the engine.

    Parameters
    ----------
    engine : {"auto", "ball", "word"}
        ``auto`` prefers the ball engine when the ball of radius
        ``n_steps * L0`` has at most ``max_nodes`` elements.
    per_step : bool
        Keep lengths and acceptor states of every step.
    keep_words : bool
        Word engine only: keep every position as a :class:`WordLog`.

    Raises
    ------
    LengthCapExceeded
        If the word engine would need words longer than ``length_cap``.
    """
    validate(params, spec)
    sys = spec.system
    ck = tuple(sorted(set(int(c) for c in (checkpoints if checkpoints is not None else (n_steps,)))))
    if any(c < 0 or c > n_steps for c in ck):
        raise ValueError("checkpoints must lie in [0, n_steps]")
    L0 = spec.L0
    radius = max(n_steps * L0, 1)
    acc = acceptor_for(sys)
    if engine == "auto":
        engine = "word" if keep_words or _ball_size(acc, radius, max_nodes) > max_nodes else "ball"
    paths = np.arange(path_offset, path_offset + n_paths, dtype=np.int64)
    chunks = [paths[i:i + _CHUNK] for i in range(0, n_paths, _CHUNK)]
    if engine == "ball":
        ball = ball_for(sys, radius, max_nodes)
        runner = _BallRunner(spec, params, ball, n_steps, ck, seed, per_step)
    elif engine == "word":
        if radius > length_cap:
            raise LengthCapExceeded(f"simulate.n_steps * L0 = {radius} exceeds the length cap {length_cap}")
        runner = _WordRunner(spec, params, acc, n_steps, ck, seed, per_step, keep_words)
    else:
        raise ValueError(f"unknown engine {engine!r}")
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(runner, chunks))
    else:
        parts = [runner(c) for c in chunks]
    return runner.merge(parts, paths)


class _BallRunner:
    def __init__(self, spec, params, ball, n_steps, ck, seed, per_step):
        self.spec, self.ball, self.n_steps, self.ck, self.seed, self.per_step = spec, ball, n_steps, ck, seed, per_step
        self.cum, self.letters, self.wlen = _step_tables(spec)
        self.inv_q = 1.0 / np.array(params.q, dtype=np.float64)
        self.logq_node = _node_logq(ball, params)
        self.kernel = _kernel()

    def __call__(self, chunk):
        P = len(chunk)
        U = path_uniforms(self.seed, chunk, self.n_steps * (1 + self.letters.shape[1]))
        out_ck = np.zeros((P, len(self.ck)), dtype=np.int64)
        shape = (P, self.n_steps + 1) if self.per_step else (1, 1)
        out_len = np.zeros(shape, dtype=np.int32)
        out_state = np.zeros(shape, dtype=np.int16)
        b = self.ball
        bad = self.kernel(b.nbr, b.length, b.state.astype(np.int16), self.cum, self.letters, self.wlen, self.inv_q,
                          U, self.n_steps, np.array(self.ck, dtype=np.int64), out_ck, out_len, out_state,
                          self.per_step)
        if bad >= 0:
            raise LengthCapExceeded(f"path {int(chunk[bad])} left the ball of radius {b.radius}")
        return out_ck, (out_len if self.per_step else None), (out_state if self.per_step else None)

    def merge(self, parts, paths):
        nodes = np.concatenate([p[0] for p in parts]) if parts else np.zeros((0, len(self.ck)), dtype=np.int64)
        lengths = np.concatenate([p[1] for p in parts]) if self.per_step and parts else None
        states = np.concatenate([p[2] for p in parts]) if self.per_step and parts else None
        b = self.ball
        return Trajectories(self.spec.system, self.seed, paths, self.ck, b.length[nodes], self.logq_node[nodes],
                            lengths, states, "ball", _ckpt_nodes=nodes, _ball=b)


class _WordRunner:
    def __init__(self, spec, params, acc, n_steps, ck, seed, per_step, keep_words):
        self.spec, self.acc, self.n_steps, self.ck, self.seed = spec, acc, n_steps, ck, seed
        self.per_step, self.keep_words = per_step, keep_words
        self.cum = np.cumsum(spec.probabilities).tolist()
        self.inv_q = [1.0 / x for x in params.q]
        self.lq = params.log_q.tolist()
        self.stride = 1 + spec.L0

    def _path(self, p):
        sys = self.spec.system
        rows = self.acc._rows
        refl_words = self.spec.words
        U = path_uniforms(self.seed, [p], self.n_steps * self.stride)[0].tolist()
        w: list[int] = []
        pstates = [self.acc.start]
        ck_words, ck_lq = [], []
        lengths = np.zeros(self.n_steps + 1, dtype=np.int32) if self.per_step else None
        states = np.zeros(self.n_steps + 1, dtype=np.int16) if self.per_step else None
        if self.per_step:
            states[0] = self.acc.start
        keeps = []
        chunks = [b""]
        ck = self.ck
        ci = 0
        while ci < len(ck) and ck[ci] == 0:
            ck_words.append(())
            ck_lq.append(0.0)
            ci += 1
        cum, inv_q, nw = self.cum, self.inv_q, len(self.cum)
        for t in range(self.n_steps):
            base = t * self.stride
            x = U[base]
            k = bisect.bisect_right(cum, x)
            if k >= nw:
                k = nw - 1
            keep = len(w)
            for j, s in enumerate(refl_words[k]):
                pos = sys.descent_position(w, s)
                if pos < 0:
                    first = sys._append(w, s)
                elif U[base + 1 + j] < inv_q[s]:
                    tail = w[pos + 1:]
                    del w[pos:]
                    for a in tail:
                        sys._append(w, a)
                    first = pos
                else:
                    continue
                if first < keep:
                    keep = first
            if keep < len(pstates) - 1:
                del pstates[keep + 1:]
            st = pstates[-1]
            for a in w[len(pstates) - 1:]:
                st = rows[st][a]
                pstates.append(st)
            if self.per_step:
                lengths[t + 1] = len(w)
                states[t + 1] = st
            if self.keep_words:
                keeps.append(keep)
                chunks.append(bytes(w[keep:]))
            while ci < len(ck) and ck[ci] == t + 1:
                ck_words.append(tuple(w))
                ck_lq.append(math.fsum(self.lq[a] for a in w))
                ci += 1
        log = None
        if self.keep_words:
            keep_arr = np.array([0] + keeps, dtype=np.int64)
            offsets = np.cumsum([0] + [len(c) for c in chunks]).astype(np.int64)
            log = WordLog(keep_arr, offsets, b"".join(chunks))
        return ck_words, ck_lq, lengths, states, log

    def __call__(self, chunk):
        return [self._path(int(p)) for p in chunk]

    def merge(self, parts, paths):
        rows = [r for part in parts for r in part]
        ck_words = [r[0] for r in rows]
        ck_len = np.array([[len(w) for w in r[0]] for r in rows], dtype=np.int64).reshape(len(rows), len(self.ck))
        ck_lq = np.array([r[1] for r in rows], dtype=np.float64).reshape(len(rows), len(self.ck))
        lengths = np.stack([r[2] for r in rows]) if self.per_step and rows else None
        states = np.stack([r[3] for r in rows]) if self.per_step and rows else None
        logs = [r[4] for r in rows] if self.keep_words else None
        return Trajectories(self.spec.system, self.seed, paths, self.ck, ck_len, ck_lq, lengths, states, "word",
                            _ckpt_words=ck_words, logs=logs)

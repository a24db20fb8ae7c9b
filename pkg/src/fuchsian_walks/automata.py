"""Geodesic automata: the ShortLex acceptor and the cone-type (Cannon) automaton.

The acceptor is generated from states ``(X, D)`` of minimal roots, in the
style of Brink and Howlett: ``D`` holds the minimal roots made negative by the
element and ``X`` additionally records the roots whose generators would lead
to a lexicographically smaller word.  It is then reduced to one state per
ShortLex cone type and certified against an enumeration of balls in the
geometric representation, which never looks at words.
"""
from __future__ import annotations

import csv
import io
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .coxeter import CoxeterSystem, Element

__all__ = [
    "CertificationFailed",
    "NonTerminating",
    "VerificationFailed",
    "Acceptor",
    "RecurrentSubgraph",
    "ConeTypeAutomaton",
    "build_acceptor",
    "cone_type",
    "cone_membership",
    "sphere_counts",
    "representation_sphere_sizes",
    "recurrent_subgraph",
    "geodesic_cone_types",
    "l_boundary",
    "boundary_rays",
    "to_dot",
    "to_csv",
]


class CertificationFailed(RuntimeError):
    pass


class NonTerminating(RuntimeError):
    pass


class VerificationFailed(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Acceptor:
    """Finite-state acceptor of ShortLex normal forms.

    Attributes
    ----------
    system : CoxeterSystem
    transitions : ndarray of int, shape (n_states, n)
        Target state or ``-1`` when the label is not allowed.
    element_rep : list of tuple
        ShortLex-least word reaching each state.
    start : int
        Always 0.
    certified_radius : int
        Largest radius for which path counts were checked.
    """

    system: CoxeterSystem
    transitions: np.ndarray
    element_rep: list
    start: int = 0
    certified_radius: int = 0
    _rows: list = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "_rows", self.transitions.tolist())

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    def step(self, state: int, s: int) -> int:
        return self._rows[state][s]

    def run(self, word: Sequence[int], state: int | None = None) -> int:
        """State after reading ``word``; ``-1`` if the word is rejected."""
        q = self.start if state is None else state
        rows = self._rows
        for a in word:
            q = rows[q][a]
            if q < 0:
                return -1
        return q

    def accepts(self, word: Sequence[int]) -> bool:
        return self.run(word) >= 0

    def edges(self):
        for q, row in enumerate(self._rows):
            for s, t in enumerate(row):
                if t >= 0:
                    yield q, s, t


@dataclass(frozen=True)
class RecurrentSubgraph:
    """Recurrence structure of the acceptor.

    ``K`` is the length of the longest accepted path ending in a transient
    state that still leads to the recurrent part; longer elements are
    recurrent or lie in one of the ``finite_cone_states`` (ShortLex cones
    that are finite sets, e.g. ``C(32123) = {32123}`` for (7,3,2)).
    ``transient_cone_types`` lists representatives of the transient cone
    types of the geodesic (Cannon) automaton, as 1-based strings.
    """

    recurrent_states: frozenset
    transient_states: frozenset
    strongly_connected: bool
    K: int
    n_components: int
    transient_cone_types: tuple = ()
    finite_cone_states: frozenset = frozenset()


@dataclass(frozen=True, eq=False)
class ConeTypeAutomaton:
    """Geodesic automaton on cone types ``T(w) = {u : l(wu) = l(w) + l(u)}``."""

    transitions: np.ndarray
    representatives: list
    start: int = 0

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]


# ---------------------------------------------------------------------------
# construction

def _raw_automaton(sys: CoxeterSystem, max_states: int):
    refl = sys.roots.reflect.tolist()
    n = sys.n
    start = (frozenset(), frozenset())
    index = {start: 0}
    states = [start]
    rows: list[list[int]] = []
    queue = deque([start])
    while queue:
        X, D = queue.popleft()
        row = []
        for s in range(n):
            if s in X:
                row.append(-1)
                continue
            nD = {s}
            nD.update(r for r in (refl[b][s] for b in D) if r >= 0)
            nX = set(nD)
            nX.update(r for r in (refl[b][s] for b in X) if r >= 0)
            nX.update(r for r in (refl[t][s] for t in range(s)) if r >= 0)
            key = (frozenset(nX), frozenset(nD))
            j = index.get(key)
            if j is None:
                if len(states) >= max_states:
                    raise NonTerminating(f"acceptor exceeds {max_states} states")
                j = index[key] = len(states)
                states.append(key)
                queue.append(key)
            row.append(j)
        rows.append(row)
    return states, np.array(rows, dtype=np.int64)


def _minimize(trans: np.ndarray, initial: Sequence[int] | None = None) -> np.ndarray:
    """Moore refinement; every state accepts and ``-1`` is the rejecting sink."""
    n_states = trans.shape[0]
    part = np.zeros(n_states, dtype=np.int64) if initial is None else np.asarray(initial, dtype=np.int64)
    n_blocks = len(set(part.tolist()))
    while True:
        img = np.where(trans >= 0, part[np.maximum(trans, 0)], -1)
        sig = np.column_stack([part, img])
        _, new = np.unique(sig, axis=0, return_inverse=True)
        new = new.ravel()
        k = int(new.max()) + 1
        if k == n_blocks:
            return _relabel_by_first_occurrence(new)
        part, n_blocks = new, k


def _relabel_by_first_occurrence(part: np.ndarray) -> np.ndarray:
    mapping: dict[int, int] = {}
    return np.array([mapping.setdefault(int(p), len(mapping)) for p in part], dtype=np.int64)


def _quotient(trans: np.ndarray, part: np.ndarray):
    k = int(part.max()) + 1
    out = np.full((k, trans.shape[1]), -1, dtype=np.int64)
    for q in range(trans.shape[0]):
        row = trans[q]
        out[part[q]] = np.where(row >= 0, part[np.maximum(row, 0)], -1)
    return out


def _shortlex_reps(trans: np.ndarray, start: int = 0) -> list:
    reps: list = [None] * trans.shape[0]
    reps[start] = ()
    queue = deque([start])
    while queue:
        q = queue.popleft()
        for s, t in enumerate(trans[q].tolist()):
            if t >= 0 and reps[t] is None:
                reps[t] = reps[q] + (s,)
                queue.append(t)
    return reps


def representation_sphere_sizes(sys: CoxeterSystem, radius: int, max_sphere: int = 5_000_000) -> list[int]:
    """Sphere sizes by breadth-first search in the geometric representation.

    Elements are identified by their (rounded) matrices, so this is
    independent of any word combinatorics.  Only two spheres are kept since
    neighbours of ``S_k`` lie in ``S_{k-1}`` or ``S_{k+1}``.
    """
    n, B = sys.n, sys.bilinear_form
    gens = []
    for s in range(n):
        M = np.eye(n)
        M[s, :] -= 2.0 * B[s, :]
        gens.append(M)

    def key(M):
        return (np.round(M, 6) + 0.0).tobytes()  # + 0.0 folds -0.0 into 0.0

    prev: dict = {}
    cur = {key(np.eye(n)): np.eye(n)}
    sizes = [1]
    for _ in range(radius):
        nxt: dict = {}
        for M in cur.values():
            for g in gens:
                P = M @ g
                k = key(P)
                if k not in prev and k not in nxt:
                    nxt[k] = P
        if len(nxt) > max_sphere:
            raise NonTerminating("sphere too large for certification")
        sizes.append(len(nxt))
        prev, cur = cur, nxt
    return sizes


def build_acceptor(sys: CoxeterSystem, certify_radius: int = 10, max_states: int = 100_000) -> Acceptor:
    """Certified ShortLex acceptor for ``sys``.

    Raises
    ------
    CertificationFailed
        If path counts differ from the representation-based sphere sizes.
    NonTerminating
        If the state space exceeds ``max_states``.
    """
    _, raw = _raw_automaton(sys, max_states)
    part = _minimize(raw)
    trans = _quotient(raw, part)
    acc = Acceptor(sys, trans, _shortlex_reps(trans), 0, certify_radius)
    if certify_radius > 0:
        got = sphere_counts(acc, certify_radius)
        want = representation_sphere_sizes(sys, certify_radius)
        if got != want:
            raise CertificationFailed(f"path counts {got} differ from sphere sizes {want}")
    if (trans == acc.start).any():
        raise CertificationFailed("a transition returns to the start state")
    return acc


# ---------------------------------------------------------------------------
# queries

def cone_type(acc: Acceptor, w: Element) -> int:
    q = acc.run(w.word)
    if q < 0:
        raise ValueError(f"{acc.system.format(w)} is not a normal form")
    return q


def cone_membership(u: Element, w: Element) -> bool:
    """``u`` lies in the cone of ``w`` iff NF(w) is a prefix of NF(u)."""
    k = len(w.word)
    return len(u.word) >= k and u.word[:k] == w.word


def sphere_counts(acc: Acceptor, n: int) -> list[int]:
    adjacency = np.zeros((acc.n_states, acc.n_states), dtype=object)
    for q, _, t in acc.edges():
        adjacency[q, t] += 1
    v = np.zeros(acc.n_states, dtype=object)
    v[acc.start] = 1
    out = [1]
    for _ in range(n):
        v = v @ adjacency
        out.append(int(v.sum()))
    return out


def _recurrent_mask(trans: np.ndarray):
    k = trans.shape[0]
    rows, cols = np.nonzero(trans >= 0)
    targets = trans[rows, cols]
    g = csr_matrix((np.ones(len(rows)), (rows, targets)), shape=(k, k))
    _, labels = connected_components(g, directed=True, connection="strong")
    sizes = np.bincount(labels, minlength=labels.max() + 1)
    rec = sizes[labels] > 1
    rec[rows[rows == targets]] = True  # self loops
    return rec, labels


def geodesic_cone_types(sys: CoxeterSystem, max_states: int = 100_000) -> ConeTypeAutomaton:
    """Minimal automaton of all geodesic words; its states are the cone types.

    States before minimization are elementary inversion sets.
    """
    refl = sys.roots.reflect.tolist()
    start = frozenset()
    index = {start: 0}
    states = [start]
    rows = []
    queue = deque([start])
    while queue:
        D = queue.popleft()
        row = []
        for s in range(sys.n):
            if s in D:
                row.append(-1)
                continue
            nD = frozenset({s} | {refl[b][s] for b in D if refl[b][s] >= 0})
            j = index.get(nD)
            if j is None:
                if len(states) >= max_states:
                    raise NonTerminating(f"geodesic automaton exceeds {max_states} states")
                j = index[nD] = len(states)
                states.append(nD)
                queue.append(nD)
            row.append(j)
        rows.append(row)
    raw = np.array(rows, dtype=np.int64)
    trans = _quotient(raw, _minimize(raw))
    return ConeTypeAutomaton(trans, _shortlex_reps(trans))


def recurrent_subgraph(acc: Acceptor) -> RecurrentSubgraph:
    trans = acc.transitions
    rec, labels = _recurrent_mask(trans)
    recurrent = frozenset(np.nonzero(rec)[0].tolist())
    transient = frozenset(range(acc.n_states)) - recurrent
    comps = {int(labels[q]) for q in recurrent}
    # transient states split into those leading back into the recurrent part
    # and those whose cones are finite (ShortLex can have dead ends)
    leads = set(recurrent)
    changed = True
    while changed:
        changed = False
        for q in range(acc.n_states):
            if q not in leads and any(t in leads for t in trans[q].tolist() if t >= 0):
                leads.add(q)
                changed = True
    finite = frozenset(q for q in transient if q not in leads)
    pre = frozenset(transient - finite)
    depth = {acc.start: 0} if acc.start in pre else {}
    for q in _topological(trans, pre):
        if q not in depth:
            continue
        for t in trans[q].tolist():
            if t in pre:
                depth[t] = max(depth.get(t, 0), depth[q] + 1)
    K = max(depth.values(), default=-1)
    cannon = geodesic_cone_types(acc.system)
    crec, _ = _recurrent_mask(cannon.transitions)
    reps = tuple(sorted((acc.system.format(cannon.representatives[q]) for q in range(cannon.n_states) if not crec[q]),
                        key=lambda s: (len(s), s)))
    return RecurrentSubgraph(recurrent, transient, len(comps) == 1, K, len(comps), reps, finite)


def _topological(trans: np.ndarray, nodes: frozenset) -> list[int]:
    indeg = {q: 0 for q in nodes}
    for q in nodes:
        for t in trans[q].tolist():
            if t in indeg:
                indeg[t] += 1
    queue = deque(sorted(q for q, d in indeg.items() if d == 0))
    out = []
    while queue:
        q = queue.popleft()
        out.append(q)
        for t in trans[q].tolist():
            if t in indeg:
                indeg[t] -= 1
                if indeg[t] == 0:
                    queue.append(t)
    return out


# ---------------------------------------------------------------------------
# cone geometry at finite depth (through a Cayley ball)

def l_boundary(acc: Acceptor, w: Element, L: int, depth: int, ball=None) -> set[Element]:
    """Elements of ``C(w)`` up to ``l(w) + depth`` within distance ``L`` of the complement."""
    from .ball import CayleyBall

    if ball is None or ball.radius < w.length + depth + L:
        ball = CayleyBall(acc, w.length + depth + L)
    root = ball.index(w.word)
    dist = ball.distance_to_complement(root, max_dist=L)
    members = ball.cone_members(root, depth)
    return {Element(ball.word(u)) for u in members if dist[u] <= L}


def boundary_rays(acc: Acceptor, w: Element, depth: int, ball=None) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Two label sequences from ``w`` tracing the boundary of its cone.

    Boundary elements (distance 1 to the complement) are sparse along the
    rays, so a step takes the least (first ray) or greatest (second ray)
    label whose subtree, up to ``depth``, still meets the boundary.  Children
    with finite ShortLex cones are never followed; boundary elements inside
    such dead ends count as covered when their finite branch hangs off a ray.

    Raises
    ------
    VerificationFailed
        If some boundary element up to ``depth`` is not covered.
    """
    from .ball import CayleyBall

    if w.is_identity():
        raise ValueError("the cone of the identity has empty boundary")
    top = w.length + depth
    if ball is None or ball.radius < top + 1:
        ball = CayleyBall(acc, top + 1)
    root = ball.index(w.word)
    finite = np.zeros(acc.n_states, dtype=bool)
    finite[list(recurrent_subgraph(acc).finite_cone_states)] = True
    dist = ball.distance_to_complement(root, max_dist=1)
    end = int(ball.level_start[top + 1])
    on_boundary = ball.cone_mask(root)[:end] & (dist[:end] <= 1)
    meets = on_boundary.copy()
    for lev in range(top, w.length, -1):
        sl = np.arange(ball.level_start[lev], ball.level_start[lev + 1])
        meets[ball.parent[sl[meets[sl]]]] = True

    rays = []
    visited: set[int] = {root}
    for pick in (min, max):
        u, labels = root, []
        for _ in range(depth):
            kids = [(s, int(ball.child[u, s])) for s in range(acc.system.n) if ball.child[u, s] >= 0]
            infinite = [(s, c) for s, c in kids if not finite[ball.state[c]]]
            options = [s for s, c in infinite if meets[c]] or [s for s, _ in infinite]
            if not options:
                break
            s = pick(options)
            labels.append(s)
            u = int(ball.child[u, s])
            visited.add(u)
        rays.append(tuple(labels))

    def covered(v: int) -> bool:
        while v not in visited:
            if not finite[ball.state[v]]:
                return False
            v = int(ball.parent[v])
        return True

    missing = [int(v) for v in np.nonzero(on_boundary)[0] if not covered(int(v))]
    if missing:
        raise VerificationFailed(
            f"{len(missing)} boundary elements of C({acc.system.format(w)}) off both rays, "
            f"e.g. {acc.system.format(Element(ball.word(missing[0])))}")
    return rays[0], rays[1]


# ---------------------------------------------------------------------------
# export

def to_dot(acc: Acceptor) -> str:
    sys = acc.system
    lines = ["digraph acceptor {", "  rankdir=LR;"]
    for q in range(acc.n_states):
        label = sys.format(acc.element_rep[q]) or "e"
        shape = "doublecircle" if q == acc.start else "circle"
        lines.append(f'  {q} [label="{label}", shape={shape}];')
    for q, s, t in acc.edges():
        lines.append(f'  {q} -> {t} [label="{s + 1}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def to_csv(acc: Acceptor) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["from_state", "label", "to_state"])
    for q, s, t in acc.edges():
        writer.writerow([q, s + 1, t])
    return buf.getvalue()

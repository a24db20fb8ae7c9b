"""Coxeter systems of Fuchsian polygons and ShortLex arithmetic.

Group elements are stored as their ShortLex normal form (a tuple of 0-based
generator indices).  Descent tests and rewriting use the finite table of
minimal (elementary) roots, so no floating point state is ever attached to a
word; only the table itself is built in double precision.
"""
from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "INFINITY",
    "NEGATIVE",
    "NON_MINIMAL",
    "CoxeterError",
    "NotHyperbolic",
    "InvalidData",
    "InvalidMatrix",
    "RootTableOverflow",
    "GroupClass",
    "MinimalRootTable",
    "Element",
    "CoxeterSystem",
    "build_coxeter_system",
    "build_generic_system",
    "classify",
    "minimal_roots",
    "is_right_descent",
    "shortlex_normal_form",
    "multiply_right",
    "distance",
]

#: Sentinel order meaning ``m_st = infinity`` (also used in serialized form).
INFINITY = 0
#: ``reflect`` table entries that are not root indices.
NEGATIVE = -1
NON_MINIMAL = -2

_TOL = 1e-9


class CoxeterError(ValueError):
    """Base class for invalid Coxeter data."""


class NotHyperbolic(CoxeterError):
    pass


class InvalidData(CoxeterError):
    pass


class InvalidMatrix(CoxeterError):
    pass


class RootTableOverflow(CoxeterError):
    pass


class GroupClass(enum.Enum):
    CLASS_I = "ClassI"
    CLASS_II = "ClassII"
    CLASS_III = "ClassIII"
    CLASS_IV = "ClassIV"
    NON_FUCHSIAN = "NonFuchsian"


@dataclass(frozen=True)
class MinimalRootTable:
    """Minimal roots and the action of the simple reflections on them.

    Attributes
    ----------
    roots : ndarray, shape (R, n)
        Coordinates over the simple roots; rows ``0..n-1`` are the simple roots.
    reflect : ndarray, shape (R, n)
        ``reflect[r, s]`` is the index of ``s(root r)``, or ``NEGATIVE`` when
        root ``r`` is ``alpha_s``, or ``NON_MINIMAL`` when the image dominates.
    """

    roots: np.ndarray
    reflect: np.ndarray

    def __len__(self) -> int:
        return self.roots.shape[0]


@dataclass(frozen=True)
class Element:
    """A group element, identified with its ShortLex normal form."""

    word: tuple[int, ...] = ()

    def __lt__(self, other: "Element") -> bool:
        # ShortLex order on normal forms
        return (len(self.word), self.word) < (len(other.word), other.word)

    @property
    def length(self) -> int:
        return len(self.word)

    def is_identity(self) -> bool:
        return not self.word

    def __len__(self) -> int:
        return len(self.word)

    def __str__(self) -> str:
        return format_word(self.word)


def format_word(word: Sequence[int], n_generators: int = 9) -> str:
    """1-based string form, e.g. ``(0, 1, 0, 2) -> "1213"``; identity is ``""``."""
    if n_generators <= 9:
        return "".join(str(a + 1) for a in word)
    return ".".join(str(a + 1) for a in word)


def parse_word(text: str, n_generators: int) -> tuple[int, ...]:
    """Inverse of :func:`format_word`.  Accepts digits, or dot/comma separated indices."""
    text = text.strip()
    if not text or text in {"e", "()"}:
        return ()
    if any(c in text for c in ".,"):
        parts = [p for p in text.replace(",", ".").split(".") if p]
    else:
        parts = list(text)
    word = []
    for p in parts:
        try:
            a = int(p) - 1
        except ValueError:
            raise InvalidData(f"cannot parse generator {p!r} in word {text!r}") from None
        if not 0 <= a < n_generators:
            raise InvalidData(f"generator {p} out of range 1..{n_generators} in word {text!r}")
        word.append(a)
    return tuple(word)


def _bilinear_form(m: Sequence[Sequence[int]]) -> np.ndarray:
    n = len(m)
    B = np.eye(n)
    for i in range(n):
        for j in range(n):
            if i != j:
                B[i, j] = -1.0 if m[i][j] == INFINITY else -math.cos(math.pi / m[i][j])
    return B


def _build_root_table(B: np.ndarray, cap: int) -> MinimalRootTable:
    # Breadth-first closure from the simple roots.  An image s(beta) is
    # discarded as non-minimal once it dominates alpha_s, i.e. B(alpha_s, s beta) >= 1.
    n = B.shape[0]
    roots: list[np.ndarray] = [np.eye(n)[s] for s in range(n)]
    index = {_root_key(r): i for i, r in enumerate(roots)}
    rows: list[list[int]] = []
    queue = deque(range(n))
    order: list[int] = []
    table: dict[int, list[int]] = {}
    while queue:
        r = queue.popleft()
        order.append(r)
        beta = roots[r]
        row = [0] * n
        for s in range(n):
            if r == s:
                row[s] = NEGATIVE
                continue
            b = float(B[s] @ beta)
            if -b >= 1.0 - _TOL:
                row[s] = NON_MINIMAL
                continue
            image = beta.copy()
            image[s] -= 2.0 * b
            key = _root_key(image)
            j = index.get(key)
            if j is None:
                if len(roots) >= cap:
                    raise RootTableOverflow(f"more than {cap} minimal roots")
                j = len(roots)
                index[key] = j
                roots.append(image)
                queue.append(j)
            row[s] = j
        table[r] = row
    rows = [table[i] for i in range(len(roots))]
    return MinimalRootTable(np.array(roots), np.array(rows, dtype=np.int64))


def _root_key(v: np.ndarray) -> tuple:
    return tuple(np.round(v, 9) + 0.0)


@dataclass(frozen=True, eq=False)
class CoxeterSystem:
    """A Coxeter system ``(W, S)`` with generators ``0..n-1``.

    Parameters
    ----------
    m : tuple of tuples of int
        Coxeter matrix with ``m[s][s] == 1`` and ``INFINITY`` (0) for infinite bonds.
    polygon : tuple of int, optional
        The polygon angles ``(k_1, .., k_n)`` when built by
        :func:`build_coxeter_system`.
    root_cap : int
        Maximal size of the minimal-root table.
    """

    m: tuple[tuple[int, ...], ...]
    polygon: tuple[int, ...] | None = None
    root_cap: int = 10_000
    bilinear_form: np.ndarray = field(init=False, repr=False)
    roots: MinimalRootTable = field(init=False, repr=False)

    def __post_init__(self):
        _check_matrix(self.m)
        object.__setattr__(self, "bilinear_form", _bilinear_form(self.m))
        object.__setattr__(self, "roots", _build_root_table(self.bilinear_form, self.root_cap))
        # plain nested lists are faster than numpy indexing in the word loops
        object.__setattr__(self, "_refl", self.roots.reflect.tolist())

    # -- basic data -------------------------------------------------------
    @property
    def n(self) -> int:
        return len(self.m)

    @property
    def generators(self) -> range:
        return range(self.n)

    def order(self, s: int, t: int) -> float:
        v = self.m[s][t]
        return math.inf if v == INFINITY else v

    def __eq__(self, other) -> bool:
        return isinstance(other, CoxeterSystem) and self.m == other.m and self.polygon == other.polygon

    def __hash__(self) -> int:
        return hash((self.m, self.polygon))

    def same_group(self, other: "CoxeterSystem") -> bool:
        """Equality of Coxeter matrices, ignoring polygon data."""
        return self.m == other.m

    @property
    def is_fuchsian(self) -> bool:
        return self.polygon is not None

    # -- words ------------------------------------------------------------
    def element(self, word: Iterable[int] | str = ()) -> Element:
        """Normalize an arbitrary word (tuple or 1-based string)."""
        if isinstance(word, str):
            word = parse_word(word, self.n)
        return shortlex_normal_form(self, word)

    def format(self, w: Element | Sequence[int]) -> str:
        word = w.word if isinstance(w, Element) else w
        return format_word(word, self.n)

    def identity(self) -> Element:
        return Element(())

    def descent_position(self, word: Sequence[int], s: int) -> int:
        """Position ``j`` with ``ws = word`` minus letter ``j``, or ``-1`` for an ascent.

        ``alpha_s`` is pushed backwards through the word; reaching a simple
        root ``alpha_{a_j}`` at letter ``a_j`` means the root turns negative.
        """
        refl = self._refl
        r = s
        for j in range(len(word) - 1, -1, -1):
            a = word[j]
            if r == a:
                return j
            r = refl[r][a]
            if r < 0:
                return -1
        return -1

    def _append(self, word: list[int], x: int) -> int:
        """In place ``word <- NF(word . x)`` assuming ``word`` is NF and ``x`` an ascent.

        Returns the first index that changed.  If some suffix ``a_i..a_k``
        conjugates ``alpha_x`` to ``alpha_t`` with ``t < a_i``, the ShortLex
        form inserts ``t`` before position ``i`` (smallest such ``i``).
        """
        refl = self._refl
        r = x
        best = -1
        best_t = -1
        for i in range(len(word) - 1, -1, -1):
            r = refl[r][word[i]]
            if r < 0:
                break
            if r < self.n and r < word[i]:
                best, best_t = i, r
        if best < 0:
            word.append(x)
            return len(word) - 1
        word.insert(best, best_t)
        return best

    def _multiply(self, word: list[int], s: int) -> tuple[int, int]:
        """In place ``word <- NF(word . s)``; returns ``(delta, first_changed_index)``."""
        j = self.descent_position(word, s)
        if j < 0:
            return 1, self._append(word, s)
        tail = word[j + 1:]
        del word[j:]
        for x in tail:
            self._append(word, x)
        return -1, j

    def multiply_word(self, word: Sequence[int], letters: Iterable[int]) -> tuple[int, ...]:
        """NF of ``word . letters`` where ``word`` is already a normal form."""
        w = list(word)
        for a in letters:
            self._multiply(w, a)
        return tuple(w)

    def multiply(self, u: Element, v: Element) -> Element:
        return Element(self.multiply_word(u.word, v.word))

    def inverse(self, w: Element) -> Element:
        return Element(self.multiply_word((), reversed(w.word)))

    def is_reduced(self, word: Sequence[int]) -> bool:
        return len(self.multiply_word((), word)) == len(word)

    def elementary_inversions(self, word: Sequence[int]) -> frozenset[int]:
        """Minimal roots sent negative by the element; the 'profile' of its inverse."""
        refl = self._refl
        D: set[int] = set()
        for s in word:
            D = {s} | {refl[b][s] for b in D if refl[b][s] >= 0}
        return frozenset(D)

    # -- serialization ----------------------------------------------------
    def to_dict(self) -> dict:
        orders = [[i + 1, j + 1, self.m[i][j]] for i in range(self.n) for j in range(i + 1, self.n)]
        out = {"generators": self.n, "orders": orders}
        if self.polygon is not None:
            out["polygon"] = list(self.polygon)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "CoxeterSystem":
        if "polygon" in data and data["polygon"] is not None:
            sys = build_coxeter_system(data["polygon"])
            if "orders" in data and sys.to_dict()["orders"] != [list(map(int, o)) for o in data["orders"]]:
                raise InvalidMatrix("orders do not match the polygon data")
            return sys
        n = int(data["generators"])
        m = [[1 if i == j else None for j in range(n)] for i in range(n)]
        for i, j, v in data["orders"]:
            i, j = int(i) - 1, int(j) - 1
            if not (0 <= i < n and 0 <= j < n) or i == j:
                raise InvalidMatrix(f"bad order entry ({i + 1}, {j + 1}, {v})")
            m[i][j] = m[j][i] = int(v)
        if any(x is None for row in m for x in row):
            raise InvalidMatrix("orders must list every pair of generators")
        return build_generic_system(m)


def _check_matrix(m) -> None:
    n = len(m)
    if n < 2:
        raise InvalidMatrix("need at least two generators")
    for i in range(n):
        if len(m[i]) != n:
            raise InvalidMatrix("order matrix must be square")
        if m[i][i] != 1:
            raise InvalidMatrix(f"m[{i + 1}][{i + 1}] must be 1")
        for j in range(n):
            if m[i][j] != m[j][i]:
                raise InvalidMatrix(f"order matrix not symmetric at ({i + 1}, {j + 1})")
            if i != j and not (m[i][j] == INFINITY or m[i][j] >= 2):
                raise InvalidMatrix(
                    f"m[{i + 1}][{j + 1}] = {m[i][j]}: off-diagonal orders must be >= 2 or infinite (0)")


def build_coxeter_system(polygon: Sequence[int], root_cap: int = 10_000) -> CoxeterSystem:
    """System of the hyperbolic polygon with angles ``pi/k_i``.

    ``m_{i,i+1} = k_i`` (indices cyclic) and all non-adjacent pairs have
    infinite order.

    Raises
    ------
    InvalidData
        If fewer than three sides or some ``k_i < 2``.
    NotHyperbolic
        If ``sum 1/k_i >= n - 2``.
    """
    k = tuple(int(x) for x in polygon)
    n = len(k)
    if n < 3:
        raise InvalidData("a polygon needs at least 3 sides")
    if any(x < 2 for x in k):
        raise InvalidData(f"angles pi/k need k >= 2, got {k}")
    if sum(Fraction(1, x) for x in k) >= n - 2:
        raise NotHyperbolic(f"sum of 1/k_i over {k} is not below n - 2 = {n - 2}")
    m = [[1 if i == j else INFINITY for j in range(n)] for i in range(n)]
    for i in range(n):
        j = (i + 1) % n
        m[i][j] = m[j][i] = k[i]
    return CoxeterSystem(tuple(map(tuple, m)), polygon=k, root_cap=root_cap)


def build_generic_system(m: Sequence[Sequence[int]], root_cap: int = 10_000) -> CoxeterSystem:
    """System from an explicit order matrix (``0`` means infinity)."""
    try:
        mm = tuple(tuple(int(x) for x in row) for row in m)
    except (TypeError, ValueError):
        raise InvalidMatrix("order matrix entries must be integers") from None
    return CoxeterSystem(mm, polygon=None, root_cap=root_cap)


def classify(sys: CoxeterSystem) -> GroupClass:
    if sys.polygon is None:
        return GroupClass.NON_FUCHSIAN
    if sys.n >= 4:
        return GroupClass.CLASS_IV
    a, b, c = sorted(sys.polygon, reverse=True)
    if c >= 3 and a != 3:
        return GroupClass.CLASS_I
    if c == 2 and b >= 4 and a > 4:
        return GroupClass.CLASS_II
    if c == 2 and b == 3 and a > 6:
        return GroupClass.CLASS_III
    return GroupClass.NON_FUCHSIAN


def minimal_roots(sys: CoxeterSystem) -> MinimalRootTable:
    return sys.roots


def is_right_descent(sys: CoxeterSystem, w: Element, s: int) -> bool:
    return sys.descent_position(w.word, s) >= 0


def shortlex_normal_form(sys: CoxeterSystem, word: Iterable[int]) -> Element:
    letters = list(word)
    if any(not 0 <= a < sys.n for a in letters):
        raise InvalidData(f"generator index out of range in {letters}")
    return Element(sys.multiply_word((), letters))


def multiply_right(sys: CoxeterSystem, w: Element, s: int) -> tuple[Element, int]:
    word = list(w.word)
    delta, _ = sys._multiply(word, s)
    return Element(tuple(word)), delta


def distance(sys: CoxeterSystem, u: Element, v: Element) -> int:
    return len(sys.multiply_word(sys.inverse(u).word, v.word))

"""Finite balls of the Cayley graph, stored in ShortLex order.

Nodes are the normal forms of length at most ``radius`` in breadth-first
order of the ShortLex tree, so every level is sorted lexicographically and
the descendants of a node at a given level form a contiguous range.

``nbr[u, s]`` is the node of ``u s`` or ``-1`` when it lies outside the ball
(only possible on the outer sphere).  Left-multiplication invariance of cone
shapes means any cone question can be asked about a cone type's
representative inside one ball.
"""
from __future__ import annotations

import numpy as np

from .automata import Acceptor, NonTerminating

__all__ = ["CayleyBall", "MemoryBudgetExceeded"]


class MemoryBudgetExceeded(RuntimeError):
    pass


class CayleyBall:
    """Ball ``B_radius(e)`` with tree, neighbour and acceptor-state tables.

    Parameters
    ----------
    acc : Acceptor
    radius : int
    max_nodes : int
        Raises :class:`MemoryBudgetExceeded` beyond this size.
    """

    def __init__(self, acc: Acceptor, radius: int, max_nodes: int = 3_000_000):
        self.acc = acc
        self.system = sys = acc.system
        self.radius = int(radius)
        n = sys.n
        T = acc.transitions
        parents = [np.array([-1], dtype=np.int64)]
        letters = [np.array([-1], dtype=np.int64)]
        states = [np.array([acc.start], dtype=np.int64)]
        level_start = [0, 1]
        front_nodes = np.array([0], dtype=np.int64)
        front_states = states[0]
        total = 1
        for _ in range(self.radius):
            # children in (parent, letter) order keep each level ShortLex sorted
            tgt = T[front_states]  # (F, n)
            par_idx, lab = np.nonzero(tgt >= 0)
            new_states = tgt[par_idx, lab]
            new_nodes = np.arange(total, total + len(par_idx), dtype=np.int64)
            parents.append(front_nodes[par_idx])
            letters.append(lab.astype(np.int64))
            states.append(new_states)
            total += len(par_idx)
            if total > max_nodes:
                raise MemoryBudgetExceeded(f"ball of radius {radius} exceeds {max_nodes} nodes")
            level_start.append(total)
            front_nodes, front_states = new_nodes, new_states
        self.parent = np.concatenate(parents)
        self.letter = np.concatenate(letters)
        self.state = np.concatenate(states)
        self.level_start = np.array(level_start, dtype=np.int64)
        self.length = np.repeat(np.arange(self.radius + 1), np.diff(self.level_start)).astype(np.int64)
        N = self.size
        self.child = np.full((N, n), -1, dtype=np.int64)
        self.child[self.parent[1:], self.letter[1:]] = np.arange(1, N)
        self.nbr = self.child.copy()
        self.nbr[np.arange(1, N), self.letter[1:]] = self.parent[1:]
        self._fill_cross_edges()

    # ------------------------------------------------------------------
    @property
    def size(self) -> int:
        return int(self.level_start[-1])

    def __len__(self) -> int:
        return self.size

    def sphere(self, k: int) -> range:
        return range(int(self.level_start[k]), int(self.level_start[k + 1]))

    def word(self, u: int) -> tuple[int, ...]:
        out = []
        parent, letter = self.parent, self.letter
        while u > 0:
            out.append(int(letter[u]))
            u = int(parent[u])
        return tuple(reversed(out))

    def index(self, word) -> int:
        """Node of a normal form, ``-1`` if it is not a normal form inside the ball."""
        u = 0
        child = self.child
        for a in word:
            u = int(child[u, a])
            if u < 0:
                return -1
        return u

    def ancestor(self, nodes: np.ndarray, level: int) -> np.ndarray:
        nodes = np.asarray(nodes, dtype=np.int64).copy()
        while True:
            high = self.length[nodes] > level
            if not high.any():
                return nodes
            nodes[high] = self.parent[nodes[high]]

    def _fill_cross_edges(self):
        # Remaining entries on inner levels are ascents u -> us whose normal
        # form is not u.s; they are found by the insertion rule of
        # CoxeterSystem._append, walking up the tree instead of copying words.
        sys = self.system
        n = sys.n
        refl = sys.roots.reflect.tolist()
        parent = self.parent.tolist()
        letter = self.letter.tolist()
        child = self.child
        nbr = self.nbr
        inner = int(self.level_start[self.radius])
        us, ss = np.nonzero(nbr[:inner] < 0)
        for u, s in zip(us.tolist(), ss.tolist()):
            if nbr[u, s] >= 0:
                continue
            r = s
            node = u
            path = []  # letters from the end, with the node above each
            best = -1
            best_t = -1
            while node > 0:
                a = letter[node]
                r = refl[r][a]
                node = parent[node]
                path.append(a)
                if r < 0:
                    break
                if r < n and r < a:
                    best, best_t = len(path), r
            if best < 0:
                raise NonTerminating(f"inconsistent tables at node {u}, label {s}")
            # climb back to the ancestor just above the insertion point
            top = u
            for _ in range(best):
                top = parent[top]
            v = int(child[top, best_t])
            for a in reversed(path[:best]):
                v = int(child[v, a])
            nbr[u, s] = v
            nbr[v, s] = u

    # ------------------------------------------------------------------
    # cones
    def cone_mask(self, root: int) -> np.ndarray:
        mask = np.zeros(self.size, dtype=bool)
        mask[root] = True
        for k in range(int(self.length[root]) + 1, self.radius + 1):
            sl = slice(int(self.level_start[k]), int(self.level_start[k + 1]))
            mask[sl] = mask[self.parent[sl]]
        return mask

    def cone_members(self, root: int, depth: int) -> np.ndarray:
        top = min(int(self.length[root]) + depth, self.radius)
        mask = self.cone_mask(root)
        return np.nonzero(mask[: int(self.level_start[top + 1])])[0]

    def distance_to_complement(self, root: int, max_dist: int, mask: np.ndarray | None = None) -> np.ndarray:
        """``min(d(u, W - C(root)), max_dist + 1)`` for cone nodes, 0 outside.

        Exact for nodes with ``length <= radius - max_dist``; beyond that
        neighbours outside the ball are unknown and the value is an upper bound
        only if a complement point was seen.
        """
        if mask is None:
            mask = self.cone_mask(root)
        big = max_dist + 1
        nodes = np.nonzero(mask)[0]
        nb = self.nbr[nodes]
        valid = nb >= 0
        nbc = np.where(valid, nb, 0)
        out_nb = valid & ~mask[nbc]
        dist = np.zeros(self.size, dtype=np.int64)
        dist[nodes] = big
        d_nodes = np.full(len(nodes), big, dtype=np.int64)
        d_nodes[out_nb.any(axis=1)] = 1
        dist[nodes] = d_nodes
        for d in range(2, max_dist + 1):
            reach = (valid & (dist[nbc] == d - 1) & mask[nbc]).any(axis=1) & (d_nodes == big)
            if not reach.any():
                break
            d_nodes[reach] = d
            dist[nodes] = d_nodes
        return dist

    # ------------------------------------------------------------------
    def distances_from(self, sources) -> np.ndarray:
        """Graph distances inside the ball from a set of nodes (``inf`` = unreached), one row per source."""
        from scipy.sparse import csr_matrix
        from scipy.sparse.csgraph import shortest_path

        g = self.graph()
        return shortest_path(g, unweighted=True, indices=np.atleast_1d(sources), directed=False)

    def graph(self):
        from scipy.sparse import csr_matrix

        if getattr(self, "_graph", None) is None:
            rows, cols = np.nonzero(self.nbr >= 0)
            tgt = self.nbr[rows, cols]
            self._graph = csr_matrix((np.ones(len(rows)), (rows, tgt)), shape=(self.size, self.size))
        return self._graph

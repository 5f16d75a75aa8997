"""DAGs, three-class edge labels, CPDAGs and Meek closure.

Nodes are 0-based integers. Class ids of the three-class labels are fixed as
``0 = no edge``, ``1 = skeleton edge``, ``2 = moralized edge``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InconsistentGraphError, InvalidParameterError, NotAnImmoralityError

NO_EDGE, SKELETON, MORALIZED = 0, 1, 2
CLASS_ORDER = ("no_edge", "skeleton", "moralized")


def _pair(i, j):
    return (i, j) if i < j else (j, i)


def _is_acyclic(directed: np.ndarray) -> bool:
    """Kahn's algorithm on a boolean adjacency matrix."""
    indeg = directed.sum(axis=0).astype(int)
    stack = [v for v in range(len(indeg)) if indeg[v] == 0]
    seen = 0
    while stack:
        v = stack.pop()
        seen += 1
        for w in np.flatnonzero(directed[v]):
            indeg[w] -= 1
            if indeg[w] == 0:
                stack.append(w)
    return seen == len(indeg)


@dataclass(frozen=True)
class DagSpec:
    d: int
    edges: frozenset

    def __post_init__(self):
        if self.d < 2:
            raise InvalidParameterError(f"d must be >= 2, got {self.d}")
        edges = frozenset((int(p), int(c)) for p, c in self.edges)
        object.__setattr__(self, "edges", edges)
        for p, c in edges:
            if not (0 <= p < self.d and 0 <= c < self.d):
                raise InvalidParameterError(f"edge {(p, c)} out of range for d={self.d}")
            if p == c:
                raise InvalidParameterError(f"self-loop at node {p}")
        if not _is_acyclic(self.adjacency()):
            raise InvalidParameterError("edge set contains a directed cycle")

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.d, self.d), dtype=bool)
        for p, c in self.edges:
            a[p, c] = True
        return a

    def parents(self, v: int) -> list[int]:
        return sorted(p for p, c in self.edges if c == v)

    def topological_order(self) -> list[int]:
        a = self.adjacency()
        indeg = a.sum(axis=0).astype(int)
        ready = sorted(v for v in range(self.d) if indeg[v] == 0)
        order = []
        while ready:
            v = ready.pop(0)
            order.append(v)
            for w in np.flatnonzero(a[v]):
                indeg[w] -= 1
                if indeg[w] == 0:
                    ready.append(int(w))
            ready.sort()
        return order

    def skeleton(self) -> set:
        return {_pair(p, c) for p, c in self.edges}

    def permute(self, perm) -> "DagSpec":
        """Relabel node ``v`` as ``perm[v]``."""
        perm = list(perm)
        return DagSpec(self.d, frozenset((perm[p], perm[c]) for p, c in self.edges))

    def to_dict(self) -> dict:
        return {"d": self.d, "edges": [list(e) for e in sorted(self.edges)]}

    @classmethod
    def from_dict(cls, obj: dict) -> "DagSpec":
        return cls(int(obj["d"]), frozenset(tuple(e) for e in obj["edges"]))


@dataclass(frozen=True, eq=False)
class ThreeClassLabels:
    """One-hot ``(d, d, 3)`` tensor of pair classes, symmetric in the first two axes."""

    classes: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.classes)
        if c.ndim != 3 or c.shape[0] != c.shape[1] or c.shape[2] != 3:
            raise InvalidParameterError(f"labels must have shape (d, d, 3), got {c.shape}")
        object.__setattr__(self, "classes", c.astype(np.float64))

    @property
    def d(self) -> int:
        return self.classes.shape[0]

    def class_ids(self) -> np.ndarray:
        return self.classes.argmax(axis=-1)

    @classmethod
    def from_class_ids(cls, ids) -> "ThreeClassLabels":
        ids = np.asarray(ids, dtype=int)
        return cls(np.eye(3)[ids])

    def pairs_of(self, cls_id: int) -> list[tuple[int, int]]:
        ids = self.class_ids()
        i, j = np.nonzero(np.triu(ids == cls_id, k=1))
        return list(zip(i.tolist(), j.tolist()))

    def __eq__(self, other):
        return isinstance(other, ThreeClassLabels) and np.array_equal(self.classes, other.classes)

    def to_dict(self) -> dict:
        return {"d": self.d, "classes": self.class_ids().tolist()}

    @classmethod
    def from_dict(cls, obj: dict) -> "ThreeClassLabels":
        ids = np.asarray(obj["classes"], dtype=int)
        if ids.shape != (obj["d"], obj["d"]):
            raise InvalidParameterError(f"classes shape {ids.shape} does not match d={obj['d']}")
        return cls.from_class_ids(ids)


@dataclass(frozen=True)
class Cpdag:
    d: int
    directed: frozenset
    undirected: frozenset

    def __post_init__(self):
        directed = frozenset((int(a), int(b)) for a, b in self.directed)
        undirected = frozenset(_pair(int(a), int(b)) for a, b in self.undirected)
        object.__setattr__(self, "directed", directed)
        object.__setattr__(self, "undirected", undirected)
        for a, b in directed:
            if (b, a) in directed:
                raise InvalidParameterError(f"pair {(a, b)} directed both ways")
            if _pair(a, b) in undirected:
                raise InvalidParameterError(f"pair {(a, b)} both directed and undirected")

    def skeleton(self) -> set:
        return {_pair(a, b) for a, b in self.directed} | set(self.undirected)

    def matrices(self) -> tuple[np.ndarray, np.ndarray]:
        dmat = np.zeros((self.d, self.d), dtype=bool)
        umat = np.zeros((self.d, self.d), dtype=bool)
        for a, b in self.directed:
            dmat[a, b] = True
        for a, b in self.undirected:
            umat[a, b] = umat[b, a] = True
        return dmat, umat

    @classmethod
    def from_matrices(cls, dmat, umat) -> "Cpdag":
        d = dmat.shape[0]
        directed = {(int(a), int(b)) for a, b in zip(*np.nonzero(dmat))}
        undirected = {(int(a), int(b)) for a, b in zip(*np.nonzero(np.triu(umat, 1)))}
        return cls(d, frozenset(directed), frozenset(undirected))

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "directed": [list(e) for e in sorted(self.directed)],
            "undirected": [list(e) for e in sorted(self.undirected)],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "Cpdag":
        return cls(
            int(obj["d"]),
            frozenset(tuple(e) for e in obj["directed"]),
            frozenset(tuple(e) for e in obj["undirected"]),
        )


def save_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj.to_dict(), sort_keys=True) + "\n")


def load_json(cls, path):
    return cls.from_dict(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------
# sampling


def sample_er_dag(d: int, q: float, rng: np.random.Generator) -> DagSpec:
    """Erdős–Rényi DAG with expected degree ``q``.

    Each unordered pair is an edge with probability ``q / (d - 1)``; edges
    point forward along a uniformly random node permutation.
    """
    if d < 2:
        raise InvalidParameterError(f"d must be >= 2, got {d}")
    if not 1 <= q <= d - 1:
        raise InvalidParameterError(f"expected degree q must satisfy 1 <= q < d, got q={q}, d={d}")
    p = q / (d - 1)
    order = rng.permutation(d)
    draw = np.triu(rng.random((d, d)) < p, k=1)
    edges = {(int(order[i]), int(order[j])) for i, j in zip(*np.nonzero(draw))}
    return DagSpec(d, frozenset(edges))


def sample_graph_params(
    rng: np.random.Generator,
    d_range: tuple[int, int] = (10, 100),
    m_range: tuple[int, int] = (50, 1000),
) -> tuple[int, int, int]:
    """Draw ``(d, q, M)`` with inclusive discrete-uniform ranges."""
    d = int(rng.integers(d_range[0], d_range[1] + 1))
    q_max = max(1, min(d // 3, 5))
    q = int(rng.integers(1, q_max + 1))
    m = int(rng.integers(m_range[0], m_range[1] + 1))
    return d, q, m


# --------------------------------------------------------------------------
# labels


def derive_three_class_labels(g: DagSpec) -> ThreeClassLabels:
    a = g.adjacency().astype(int)
    skel = (a + a.T) > 0
    shares_child = (a @ a.T) > 0
    ids = np.zeros((g.d, g.d), dtype=int)
    ids[shares_child] = MORALIZED
    ids[skel] = SKELETON
    np.fill_diagonal(ids, NO_EDGE)
    return ThreeClassLabels.from_class_ids(ids)


def immorality_context(labels: ThreeClassLabels, pair) -> tuple[tuple[int, int], list[int], list[int]]:
    """Return ``(pa, cc, ne)`` for a pair labelled as moralized.

    ``cc`` are nodes with skeleton edges to both parents, ``ne`` nodes with a
    skeleton edge to exactly one of them.
    """
    i, j = int(pair[0]), int(pair[1])
    ids = labels.class_ids()
    if ids[i, j] != MORALIZED:
        raise NotAnImmoralityError(f"pair {(i, j)} has class {CLASS_ORDER[ids[i, j]]}, not moralized")
    skel = ids == SKELETON
    others = [k for k in range(labels.d) if k not in (i, j)]
    cc = [k for k in others if skel[i, k] and skel[j, k]]
    ne = [k for k in others if skel[i, k] != skel[j, k]]
    return (i, j), cc, ne


# --------------------------------------------------------------------------
# CPDAG


def _meek_demands(dmat: np.ndarray, umat: np.ndarray) -> set:
    """Orientations ``(x, y)`` of undirected edges that some Meek rule R1-R4 demands."""
    d = dmat.shape[0]
    adj = dmat | dmat.T | umat
    out = set()
    for a, b in zip(*np.nonzero(np.triu(umat, 1))):
        for x, y in ((a, b), (b, a)):
            # R1: z -> x - y, z and y nonadjacent
            if np.any(dmat[:, x] & ~adj[:, y] & (np.arange(d) != y)):
                out.add((x, y))
                continue
            # R2: x -> z -> y
            if np.any(dmat[x, :] & dmat[:, y]):
                out.add((x, y))
                continue
            # R3: x - z1 -> y, x - z2 -> y, z1 and z2 nonadjacent
            zs = np.flatnonzero(umat[x, :] & dmat[:, y])
            if any(not adj[z1, z2] for k, z1 in enumerate(zs) for z2 in zs[k + 1:]):
                out.add((x, y))
                continue
            # R4: x - z -> w -> y, z and y nonadjacent, x adjacent to w
            for z in np.flatnonzero(umat[x, :] & ~adj[:, y]):
                if z != y and np.any(dmat[z, :] & dmat[:, y] & adj[x, :]):
                    out.add((x, y))
                    break
    return out


def _reaches(dmat: np.ndarray, src: int, dst: int) -> bool:
    seen, stack = {src}, [src]
    while stack:
        v = stack.pop()
        if v == dst:
            return True
        for w in np.flatnonzero(dmat[v]):
            if w not in seen:
                seen.add(int(w))
                stack.append(int(w))
    return False


def _meek_closure(dmat: np.ndarray, umat: np.ndarray) -> None:
    """Apply Meek rules R1-R4 in place, in synchronous rounds, until nothing changes.

    On patterns with a consistent DAG extension the rules never disagree and
    this is the usual closure. Estimated patterns can be inconsistent: an edge
    demanded in both directions stays undirected, and an orientation that
    would close a directed cycle is skipped. Demands only grow as edges are
    oriented, so the result is still a fixpoint.
    """
    while True:
        demands = _meek_demands(dmat, umat)
        applied = False
        for x, y in sorted(demands):
            if (y, x) in demands or not umat[x, y] or _reaches(dmat, y, x):
                continue
            umat[x, y] = umat[y, x] = False
            dmat[x, y] = True
            applied = True
        if not applied:
            return


def apply_meek_rules(c: Cpdag) -> Cpdag:
    dmat, umat = c.matrices()
    if not _is_acyclic(dmat):
        raise InconsistentGraphError("input already contains a directed cycle")
    _meek_closure(dmat, umat)
    return Cpdag.from_matrices(dmat, umat)


def v_structures(g: DagSpec) -> set:
    """Triples ``(a, c, b)`` with ``a -> c <- b``, ``a < b`` and a, b nonadjacent."""
    skel = g.skeleton()
    out = set()
    for c in range(g.d):
        pa = g.parents(c)
        for k, a in enumerate(pa):
            for b in pa[k + 1:]:
                if (a, b) not in skel:
                    out.add((a, c, b))
    return out


def dag_to_cpdag(g: DagSpec) -> Cpdag:
    """Skeleton plus v-structures, closed under the Meek rules."""
    directed = set()
    for a, c, b in v_structures(g):
        directed.update({(a, c), (b, c)})
    undirected = g.skeleton() - {_pair(a, b) for a, b in directed}
    return apply_meek_rules(Cpdag(g.d, frozenset(directed), frozenset(undirected)))

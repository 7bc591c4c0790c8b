"""
Communication graphs and Metropolis consensus weights.

A :class:`CommGraph` is an undirected, connected graph without self-loops.
:func:`metropolis_weights` turns it into a symmetric doubly stochastic
:class:`WeightMatrix` and caches the spectral quantities used by the
convergence bounds.
"""

from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import DisconnectedGraph, GraphError, IndexOutOfRange, SelfLoop

#: Metropolis convention used by :func:`metropolis_weights`.
METROPOLIS_VARIANT = "lazy: W_ij = 1/(1 + max(deg_i, deg_j))"

#: Canonical labeling of the 8-node DC grid tree (0-based node ids).
FIG2_TREE_EDGES = ((0, 1), (1, 2), (2, 3), (1, 4), (4, 5), (2, 6), (6, 7))


class DuplicateEdgeWarning(UserWarning):
    """An edge was listed more than once; the duplicate was dropped."""


@dataclass(frozen=True)
class CommGraph:
    """Undirected connected communication graph.

    Attributes
    ----------
    node_count : int
        Number of agents N.
    edges : tuple of (int, int)
        Sorted unordered pairs ``(i, j)`` with ``i < j``.
    neighbors : tuple of tuple of int
        Neighbor table, ``neighbors[i]`` excludes ``i`` itself.
    """

    node_count: int
    edges: tuple[tuple[int, int], ...]
    neighbors: tuple[tuple[int, ...], ...] = field(repr=False)

    @property
    def degrees(self) -> np.ndarray:
        return np.array([len(nb) for nb in self.neighbors], dtype=int)

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.node_count, self.node_count))
        for i, j in self.edges:
            a[i, j] = a[j, i] = 1.0
        return a

    def is_tree(self) -> bool:
        return len(self.edges) == self.node_count - 1


def _is_connected(n: int, neighbors: list[list[int]]) -> bool:
    seen = [False] * n
    seen[0] = True
    queue = deque([0])
    while queue:
        i = queue.popleft()
        for j in neighbors[i]:
            if not seen[j]:
                seen[j] = True
                queue.append(j)
    return all(seen)


def build_graph(node_count: int, edge_list: Iterable[tuple[int, int]]) -> CommGraph:
    """Validate an edge list and build a :class:`CommGraph`.

    Duplicate edges (in either orientation) are dropped with a
    :class:`DuplicateEdgeWarning`.
    """
    if int(node_count) != node_count or node_count < 2:
        raise GraphError(f"node_count must be an integer >= 2, got {node_count!r}")
    n = int(node_count)

    unique: set[tuple[int, int]] = set()
    for raw in edge_list:
        i, j = (int(x) for x in raw)
        if not (0 <= i < n and 0 <= j < n):
            raise IndexOutOfRange(f"edge ({i}, {j}) has an endpoint outside [0, {n})")
        if i == j:
            raise SelfLoop(f"self-loop at node {i}")
        e = (min(i, j), max(i, j))
        if e in unique:
            warnings.warn(f"duplicate edge {e} ignored", DuplicateEdgeWarning, stacklevel=2)
            continue
        unique.add(e)

    edges = tuple(sorted(unique))
    nbrs: list[list[int]] = [[] for _ in range(n)]
    for i, j in edges:
        nbrs[i].append(j)
        nbrs[j].append(i)
    if not _is_connected(n, nbrs):
        raise DisconnectedGraph(f"graph with {n} nodes and edges {list(edges)} is not connected")
    return CommGraph(n, edges, tuple(tuple(sorted(nb)) for nb in nbrs))


def standard_graphs(kind: str, n: int = 8) -> CommGraph:
    """Test fixtures: ``path``, ``star``, ``complete`` or ``tree-of-fig2``.

    ``tree-of-fig2`` ignores ``n`` and always has 8 nodes.
    """
    if kind == "path":
        edges = [(i, i + 1) for i in range(n - 1)]
    elif kind == "star":
        edges = [(0, i) for i in range(1, n)]
    elif kind == "complete":
        edges = [(i, j) for i in range(n) for j in range(i + 1, n)]
    elif kind in ("tree-of-fig2", "fig2", "tree-fig2"):
        n, edges = 8, list(FIG2_TREE_EDGES)
    else:
        raise GraphError(f"unknown graph kind {kind!r}")
    return build_graph(n, edges)


def load_edge_list(path: str | Path, node_count: int | None = None) -> CommGraph:
    """Read an edge-list file: one ``i j`` pair per line, ``#`` starts a comment.

    When ``node_count`` is omitted it is inferred as ``max index + 1``.
    """
    edges = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise GraphError(f"{path}:{lineno}: expected 'i j', got {line!r}")
        edges.append((int(parts[0]), int(parts[1])))
    if node_count is None:
        if not edges:
            raise GraphError(f"{path}: no edges")
        node_count = max(max(e) for e in edges) + 1
    return build_graph(node_count, edges)


def write_edge_list(graph: CommGraph, path: str | Path) -> None:
    lines = [f"# {graph.node_count} nodes"] + [f"{i} {j}" for i, j in graph.edges]
    Path(path).write_text("\n".join(lines) + "\n")


def matrix_power_squaring(w: np.ndarray, p: int) -> np.ndarray:
    """``w**p`` by repeated squaring (independent of the eigen route)."""
    if p < 0:
        raise ValueError("p must be nonnegative")
    result = np.eye(w.shape[0])
    base = np.array(w, dtype=float)
    while p:
        if p & 1:
            result = result @ base
        base = base @ base
        p >>= 1
    return result


def _spectrum(w: np.ndarray) -> np.ndarray:
    """Eigenvalues of the symmetric matrix ``w`` in descending order."""
    return np.linalg.eigvalsh(w)[::-1]


def _deviation_spectrum(w: np.ndarray) -> np.ndarray:
    """Eigenvalues of ``w`` restricted to the complement of the consensus direction.

    ``w`` is symmetric with ``w @ 1 = 1``, so ``1/sqrt(N)`` is an eigenvector
    and ``w - 11^T/N`` has the remaining eigenvalues plus a zero.
    """
    n = w.shape[0]
    return _spectrum(w - np.full((n, n), 1.0 / n))


def consensus_deviation(weight: "WeightMatrix | np.ndarray", tau: int,
                        method: str = "eigen") -> tuple[float, float]:
    """Return ``(tr[W^(2 tau)], tr[(W^tau - 11^T/N)^2])``.

    ``method="eigen"`` sums powers of the spectrum, ``method="power"`` forms
    ``W^tau`` by repeated squaring.
    """
    if tau < 1:
        raise ValueError("tau must be >= 1")
    w = weight.entries if isinstance(weight, WeightMatrix) else np.asarray(weight, dtype=float)
    n = w.shape[0]
    if method == "eigen":
        tr_w2tau = float(np.sum(_spectrum(w) ** (2 * tau)))
        tr_dev2 = float(np.sum(_deviation_spectrum(w) ** (2 * tau)))
    elif method == "power":
        wt = matrix_power_squaring(w, tau)
        tr_w2tau = float(np.sum(wt * wt))  # tr(A A^T) with A symmetric
        dev = wt - np.full((n, n), 1.0 / n)
        tr_dev2 = float(np.sum(dev * dev))
    else:
        raise ValueError(f"unknown method {method!r}")
    return tr_w2tau, tr_dev2


@dataclass(frozen=True)
class WeightMatrix:
    """Symmetric doubly stochastic consensus matrix with cached spectral data.

    ``lambda2`` is the second largest eigenvalue by value.
    """

    entries: np.ndarray = field(repr=False)
    tau: int
    lambda2: float
    tr_w2tau: float
    tr_dev2: float
    variant: str = METROPOLIS_VARIANT

    def __post_init__(self):
        self.entries.setflags(write=False)

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    def power(self, p: int) -> np.ndarray:
        return matrix_power_squaring(self.entries, p)

    def with_tau(self, tau: int) -> "WeightMatrix":
        return from_matrix(self.entries, tau, variant=self.variant)

    def neighbor_table(self) -> list[list[tuple[int, float]]]:
        """Per agent, the ``(j, W_ij)`` pairs with ``W_ij != 0`` (including ``j = i``)."""
        w = self.entries
        return [[(j, float(w[i, j])) for j in range(self.n) if w[i, j] != 0.0]
                for i in range(self.n)]


def from_matrix(w: np.ndarray, tau: int, variant: str = "explicit") -> WeightMatrix:
    """Wrap an explicit symmetric doubly stochastic matrix (e.g. a test double)."""
    w = np.array(w, dtype=float)
    n = w.shape[0]
    if w.shape != (n, n):
        raise GraphError("weight matrix must be square")
    if not np.array_equal(w, w.T):
        raise GraphError("weight matrix must be symmetric")
    one = np.ones(n)
    if np.max(np.abs(w @ one - one)) > 1e-12 or np.min(w) < 0.0 or np.max(w) > 1.0:
        raise GraphError("weight matrix must be doubly stochastic with entries in [0, 1]")
    if tau < 1:
        raise ValueError("tau must be >= 1")
    spec = _spectrum(w)
    lambda2 = float(spec[1]) if n > 1 else 0.0
    tr_w2tau, tr_dev2 = consensus_deviation(w, tau)
    return WeightMatrix(w, int(tau), lambda2, tr_w2tau, tr_dev2, variant)


def metropolis_weights(graph: CommGraph, tau: int = 1) -> WeightMatrix:
    """Metropolis weights ``W_ij = 1/(1 + max(deg_i, deg_j))`` on edges.

    The diagonal absorbs the remainder so that rows sum to one.
    """
    n = graph.node_count
    deg = graph.degrees
    w = np.zeros((n, n))
    for i, j in graph.edges:
        w[i, j] = w[j, i] = 1.0 / (1.0 + max(deg[i], deg[j]))
    for i in range(n):
        # sum in a fixed order so that symmetric rows give identical diagonals
        w[i, i] = 1.0 - sum(w[i, j] for j in graph.neighbors[i])
    return from_matrix(w, tau, variant=METROPOLIS_VARIANT)


def averaging_matrix(n: int, tau: int = 1) -> WeightMatrix:
    """Exact averaging ``11^T/N``, the limit of ``W^tau``."""
    return from_matrix(np.full((n, n), 1.0 / n), tau, variant="complete averaging 11^T/N")

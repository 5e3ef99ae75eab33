"""Graph construction, cycle bases and clique adjacency.

Cycles are handled in two representations: node sequences (closed walks, the
last node connects back to the first) and GF(2) edge sets. Edge sets are
encoded as Python ints used as bit vectors over a graph's sorted edge list,
which keeps rank computations cheap.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Literal, NamedTuple, Sequence

import numpy as np

from .errors import (
    BasisGraphMismatch,
    DuplicateEdge,
    IndexOutOfRange,
    InvalidSigma,
    InvalidSteps,
    ParseError,
    SelfLoop,
    UnknownEdge,
)

Edge = tuple[int, int]
AdjacencyKind = Literal["standard", "clique", "dtw"]


def _key(u: int, v: int) -> Edge:
    return (u, v) if u < v else (v, u)


@dataclass(frozen=True)
class Graph:
    """Undirected weighted simple graph on nodes ``0..num_nodes-1``.

    ``edges`` is kept sorted with ``u < v`` inside each pair; ``weights`` is
    aligned with it.
    """

    num_nodes: int
    edges: tuple[Edge, ...]
    weights: tuple[float, ...]
    _index: dict[Edge, int] = field(init=False, repr=False, compare=False)
    _neighbors: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "_index", {e: i for i, e in enumerate(self.edges)})
        nbrs: list[list[int]] = [[] for _ in range(self.num_nodes)]
        for u, v in self.edges:
            nbrs[u].append(v)
            nbrs[v].append(u)
        object.__setattr__(self, "_neighbors", tuple(tuple(sorted(n)) for n in nbrs))

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def neighbors(self, v: int) -> tuple[int, ...]:
        return self._neighbors[v]

    def has_edge(self, u: int, v: int) -> bool:
        return _key(u, v) in self._index

    def edge_index(self, u: int, v: int) -> int:
        try:
            return self._index[_key(u, v)]
        except KeyError:
            raise UnknownEdge(f"({u}, {v}) is not an edge") from None

    def weight(self, u: int, v: int) -> float:
        return self.weights[self.edge_index(u, v)]

    def degrees(self) -> np.ndarray:
        return np.array([len(n) for n in self._neighbors], dtype=np.int64)

    def components(self) -> list[list[int]]:
        """Connected components, each sorted, ordered by their lowest node."""
        seen = [False] * self.num_nodes
        comps = []
        for root in range(self.num_nodes):
            if seen[root]:
                continue
            seen[root] = True
            comp = [root]
            queue = deque([root])
            while queue:
                x = queue.popleft()
                for y in self._neighbors[x]:
                    if not seen[y]:
                        seen[y] = True
                        comp.append(y)
                        queue.append(y)
            comps.append(sorted(comp))
        return comps

    def cycle_space_dim(self) -> int:
        return self.num_edges - self.num_nodes + len(self.components())


def build_graph(num_nodes: int, edge_list: Iterable[Sequence[float]]) -> Graph:
    """Validate ``(u, v, weight)`` triples and build a :class:`Graph`."""
    if num_nodes < 1:
        raise IndexOutOfRange("num_nodes must be positive")
    table: dict[Edge, float] = {}
    for item in edge_list:
        u, v, w = int(item[0]), int(item[1]), float(item[2])
        if not (0 <= u < num_nodes and 0 <= v < num_nodes):
            raise IndexOutOfRange(f"edge ({u}, {v}) outside [0, {num_nodes})")
        if u == v:
            raise SelfLoop(f"self-loop at node {u}")
        k = _key(u, v)
        if k in table:
            raise DuplicateEdge(f"duplicate edge {k}")
        table[k] = w
    edges = tuple(sorted(table))
    return Graph(num_nodes, edges, tuple(table[e] for e in edges))


def read_edge_csv(path, num_nodes: int | None = None) -> Graph:
    """Read a ``from,to,cost`` edge list.

    Directed input is symmetrized: a pair present in either direction becomes
    one undirected edge, keeping the smaller cost.
    """
    table: dict[Edge, float] = {}
    max_id = -1
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ["from", "to", "cost"]:
            raise ParseError(f"{path}: expected header 'from,to,cost'")
        for lineno, row in enumerate(reader, start=2):
            if not row or not "".join(row).strip():
                continue
            try:
                u, v, w = int(row[0]), int(row[1]), float(row[2])
            except (ValueError, IndexError):
                raise ParseError(f"{path}:{lineno}: cannot parse {row!r}") from None
            if u == v:
                raise SelfLoop(f"{path}:{lineno}: self-loop at node {u}")
            k = _key(u, v)
            table[k] = min(w, table.get(k, w))
            max_id = max(max_id, u, v)
    n = num_nodes if num_nodes is not None else max_id + 1
    return build_graph(n, [(u, v, w) for (u, v), w in table.items()])


def write_edge_csv(g: Graph, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["from", "to", "cost"])
        for (u, v), w in zip(g.edges, g.weights):
            writer.writerow([u, v, repr(float(w))])


@dataclass(frozen=True)
class CycleBasis:
    cycles: tuple[tuple[int, ...], ...]
    parent_graph_nodes: int

    def __len__(self) -> int:
        return len(self.cycles)

    def __iter__(self):
        return iter(self.cycles)


def cycle_edges(cycle: Sequence[int]) -> list[Edge]:
    """Edges of a closed walk, wrap-around included."""
    return [_key(cycle[i], cycle[(i + 1) % len(cycle)]) for i in range(len(cycle))]


def cycle_basis_paton(g: Graph) -> CycleBasis:
    """Fundamental cycle basis from a BFS spanning forest.

    Each component is rooted at its lowest node and neighbors are visited in
    ascending order, so the basis is fully determined by the graph. Every
    non-tree edge ``(u, v)`` contributes the tree path ``u -> v`` closed by
    that edge; non-tree edges are taken in sorted edge order.
    """
    parent = [-1] * g.num_nodes
    depth = [0] * g.num_nodes
    tree: set[Edge] = set()
    for comp in g.components():
        root = comp[0]
        parent[root] = root
        queue = deque([root])
        while queue:
            x = queue.popleft()
            for y in g.neighbors(x):
                if parent[y] == -1:
                    parent[y] = x
                    depth[y] = depth[x] + 1
                    tree.add(_key(x, y))
                    queue.append(y)

    cycles = []
    for u, v in g.edges:
        if (u, v) in tree:
            continue
        up, vp = [u], [v]
        a, b = u, v
        while depth[a] > depth[b]:
            a = parent[a]
            up.append(a)
        while depth[b] > depth[a]:
            b = parent[b]
            vp.append(b)
        while a != b:
            a, b = parent[a], parent[b]
            up.append(a)
            vp.append(b)
        # up ends at the common ancestor, vp too; drop vp's copy
        cycles.append(tuple(up + vp[-2::-1]))
    return CycleBasis(tuple(cycles), g.num_nodes)


def _check_basis(g: Graph, basis: CycleBasis) -> None:
    if basis.parent_graph_nodes != g.num_nodes:
        raise BasisGraphMismatch(
            f"basis built for {basis.parent_graph_nodes} nodes, graph has {g.num_nodes}"
        )
    for cyc in basis.cycles:
        if len(cyc) < 3 or len(set(cyc)) != len(cyc):
            raise BasisGraphMismatch(f"{cyc} is not a simple cycle")
        for u, v in cycle_edges(cyc):
            if not (0 <= u < g.num_nodes and 0 <= v < g.num_nodes) or not g.has_edge(u, v):
                raise BasisGraphMismatch(f"cycle {cyc} uses non-edge ({u}, {v})")


@dataclass(frozen=True)
class AdjacencyMatrix:
    data: np.ndarray
    kind: AdjacencyKind

    @property
    def num_nodes(self) -> int:
        return self.data.shape[0]


def clique_adjacency(g: Graph, basis: CycleBasis) -> AdjacencyMatrix:
    """Binary matrix linking every pair of nodes that share a basis cycle."""
    _check_basis(g, basis)
    a = np.zeros((g.num_nodes, g.num_nodes))
    for cyc in basis.cycles:
        idx = np.asarray(cyc)
        a[np.ix_(idx, idx)] = 1.0
    np.fill_diagonal(a, 0.0)
    return AdjacencyMatrix(a, "clique")


def cycle_stats(basis: CycleBasis) -> tuple[int, float]:
    """Number of cycles and mean node count per cycle; ``(0, 0.0)`` if empty."""
    if not basis.cycles:
        return 0, 0.0
    return len(basis.cycles), float(np.mean([len(c) for c in basis.cycles]))


def dense_adjacency(
    g: Graph,
    mode: Literal["binary", "gaussian"] = "binary",
    sigma: float | None = None,
    threshold: float = 0.1,
) -> AdjacencyMatrix:
    """Standard adjacency from edge distances.

    Gaussian mode weights an edge of length ``d`` by ``exp(-d**2 / sigma**2)``
    and drops weights below ``threshold``.
    """
    a = np.zeros((g.num_nodes, g.num_nodes))
    if not g.edges:
        return AdjacencyMatrix(a, "standard")
    idx = np.asarray(g.edges)
    if mode == "binary":
        vals = np.ones(len(idx))
    elif mode == "gaussian":
        if sigma is None or not sigma > 0:
            raise InvalidSigma(f"sigma must be strictly positive, got {sigma}")
        d = np.asarray(g.weights, dtype=float)
        vals = np.exp(-(d**2) / sigma**2)
        vals[vals < threshold] = 0.0
    else:
        raise ValueError(f"unknown adjacency mode {mode!r}")
    a[idx[:, 0], idx[:, 1]] = vals
    a[idx[:, 1], idx[:, 0]] = vals
    return AdjacencyMatrix(a, "standard")


# --- temporal product and projection ---------------------------------------


@dataclass(frozen=True)
class TemporalProductGraph:
    """``k`` stacked copies of ``base`` joined by per-node temporal edges.

    Node ``(v, t)`` has index ``t * N + v``.
    """

    base: Graph
    num_steps: int
    graph: Graph

    def node(self, v: int, t: int) -> int:
        return t * self.base.num_nodes + v

    def unpack(self, idx: int) -> tuple[int, int]:
        t, v = divmod(idx, self.base.num_nodes)
        return v, t


def temporal_product(g: Graph, num_steps: int) -> TemporalProductGraph:
    if num_steps < 2:
        raise InvalidSteps(f"num_steps must be >= 2, got {num_steps}")
    n = g.num_nodes
    edges = []
    for t in range(num_steps):
        off = t * n
        edges.extend((u + off, v + off, w) for (u, v), w in zip(g.edges, g.weights))
        if t < num_steps - 1:
            edges.extend((v + off, v + off + n, 1.0) for v in range(n))
    return TemporalProductGraph(g, num_steps, build_graph(n * num_steps, edges))


class Projection(NamedTuple):
    edge_sets: list[frozenset[Edge]]
    vanished: tuple[int, ...]  # indices whose image cancelled to the empty set


def project_cycle_basis(tpg: TemporalProductGraph, basis: CycleBasis) -> Projection:
    """Map each product-graph cycle to its GF(2) edge set in the base graph.

    Temporal edges collapse to a point; spatial edges traversed an even
    number of times cancel.
    """
    _check_basis(tpg.graph, basis)
    sets = []
    vanished = []
    for i, cyc in enumerate(basis.cycles):
        acc: set[Edge] = set()
        for a, b in cycle_edges(cyc):
            (u, _), (v, _) = tpg.unpack(a), tpg.unpack(b)
            if u != v:
                acc ^= {_key(u, v)}
        sets.append(frozenset(acc))
        if not acc:
            vanished.append(i)
    return Projection(sets, tuple(vanished))


def edge_vector(g: Graph, edges: Iterable[Edge]) -> int:
    """GF(2) incidence vector of an edge set, as an int bitmask over ``g.edges``."""
    vec = 0
    for u, v in edges:
        vec ^= 1 << g.edge_index(u, v)
    return vec


def gf2_rank(vectors: Iterable[int]) -> int:
    pivots: dict[int, int] = {}
    for vec in vectors:
        while vec:
            top = vec.bit_length() - 1
            if top not in pivots:
                pivots[top] = vec
                break
            vec ^= pivots[top]
    return len(pivots)


def is_cycle_space_element(g: Graph, edges: Iterable[Edge]) -> bool:
    deg = [0] * g.num_nodes
    for u, v in edges:
        deg[u] ^= 1
        deg[v] ^= 1
    return not any(deg)


def is_cycle_basis(g: Graph, candidate: Sequence[Iterable[Edge]]) -> bool:
    """True iff every set is an even subgraph and together they span the cycle space.

    Dependent or repeated sets are tolerated; only the span matters.
    """
    sets = [list(s) for s in candidate]
    vectors = [edge_vector(g, s) for s in sets]  # raises UnknownEdge
    if not all(is_cycle_space_element(g, s) for s in sets):
        return False
    return gf2_rank(vectors) == g.cycle_space_dim()


def basis_rank(g: Graph, basis: CycleBasis) -> int:
    return gf2_rank(edge_vector(g, cycle_edges(c)) for c in basis.cycles)


def verify_theorem(g: Graph, num_steps: int) -> bool:
    """Project a cycle basis of ``g x I`` back onto ``g`` and check it spans."""
    tpg = temporal_product(g, num_steps)
    proj = project_cycle_basis(tpg, cycle_basis_paton(tpg.graph))
    return is_cycle_basis(g, proj.edge_sets)


def random_graph(num_nodes: int, p: float, rng: np.random.Generator, connected: bool = False) -> Graph:
    """Erdos-Renyi G(n, p); ``connected=True`` first lays a random spanning tree."""
    pairs = set()
    if connected:
        order = rng.permutation(num_nodes)
        for i in range(1, num_nodes):
            j = int(rng.integers(0, i))
            pairs.add(_key(int(order[i]), int(order[j])))
    iu, ju = np.triu_indices(num_nodes, k=1)
    keep = rng.random(len(iu)) < p
    pairs.update(zip(iu[keep].tolist(), ju[keep].tolist()))
    return build_graph(num_nodes, [(u, v, 1.0) for u, v in sorted(pairs)])


__all__ = [
    "AdjacencyMatrix",
    "CycleBasis",
    "Graph",
    "Projection",
    "TemporalProductGraph",
    "basis_rank",
    "build_graph",
    "clique_adjacency",
    "cycle_basis_paton",
    "cycle_edges",
    "cycle_stats",
    "dense_adjacency",
    "edge_vector",
    "gf2_rank",
    "is_cycle_basis",
    "project_cycle_basis",
    "random_graph",
    "read_edge_csv",
    "temporal_product",
    "verify_theorem",
    "write_edge_csv",
]

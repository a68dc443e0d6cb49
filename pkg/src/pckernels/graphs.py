"""Attributed point-cloud graphs: data model, construction, text I/O."""

from __future__ import annotations

import numpy as np

__all__ = [
    "GraphFormatError",
    "PointCloudGraph",
    "build_neighborhood_graph",
    "load_graph",
    "save_graph",
]


class GraphFormatError(ValueError):
    """Raised for malformed graph files or invalid graph structure."""


class PointCloudGraph:
    """Undirected graph whose vertices carry positions and attribute vectors.

    Immutable after construction; safe to share across threads/processes.
    Edges are stored as unordered pairs (i, j) with i < j, no self-loops.
    """

    __slots__ = ("positions", "attributes", "edges", "_adjacency")

    def __init__(self, positions, attributes, edges):
        positions = np.asarray(positions, dtype=np.float64)
        attributes = np.asarray(attributes, dtype=np.float64)
        if positions.ndim != 2:
            positions = positions.reshape(len(positions), -1)
        if attributes.ndim != 2:
            attributes = attributes.reshape(len(attributes), -1)
        if len(positions) != len(attributes):
            raise GraphFormatError(
                f"{len(positions)} positions but {len(attributes)} attribute rows"
            )
        if positions.size and not np.isfinite(positions).all():
            raise GraphFormatError("non-finite position coordinates")
        if attributes.size and not np.isfinite(attributes).all():
            raise GraphFormatError("non-finite attribute values")
        n = len(positions)
        canon = set()
        for i, j in edges:
            i, j = int(i), int(j)
            if i == j:
                raise GraphFormatError(f"self-loop at vertex {i}")
            if not (0 <= i < n and 0 <= j < n):
                raise GraphFormatError(f"edge ({i},{j}) out of range for {n} vertices")
            canon.add((i, j) if i < j else (j, i))
        positions.setflags(write=False)
        attributes.setflags(write=False)
        self.positions = positions
        self.attributes = attributes
        self.edges = frozenset(canon)
        adj = [[] for _ in range(n)]
        for i, j in sorted(canon):
            adj[i].append(j)
            adj[j].append(i)
        self._adjacency = tuple(tuple(sorted(a)) for a in adj)

    @property
    def n_vertices(self):
        return len(self.positions)

    @property
    def n_edges(self):
        return len(self.edges)

    @property
    def dim(self):
        return self.positions.shape[1] if self.positions.size else 0

    @property
    def attr_dim(self):
        return self.attributes.shape[1] if self.attributes.size else 0

    def neighbors(self, i):
        """Sorted tuple of vertices adjacent to i."""
        return self._adjacency[i]

    def degree(self, i):
        return len(self._adjacency[i])

    def relabel(self, perm):
        """Return the graph with vertex i renamed to perm[i]."""
        perm = np.asarray(perm, dtype=np.intp)
        if sorted(perm.tolist()) != list(range(self.n_vertices)):
            raise ValueError("perm is not a permutation of the vertex set")
        inv = np.empty_like(perm)
        inv[perm] = np.arange(self.n_vertices)
        return PointCloudGraph(
            self.positions[inv],
            self.attributes[inv],
            [(perm[i], perm[j]) for i, j in self.edges],
        )

    def __eq__(self, other):
        if not isinstance(other, PointCloudGraph):
            return NotImplemented
        return (
            self.positions.shape == other.positions.shape
            and self.attributes.shape == other.attributes.shape
            and np.array_equal(self.positions, other.positions)
            and np.array_equal(self.attributes, other.attributes)
            and self.edges == other.edges
        )

    def __hash__(self):
        return hash((self.positions.tobytes(), self.attributes.tobytes(), self.edges))

    def __repr__(self):
        return (
            f"PointCloudGraph(n={self.n_vertices}, m={self.n_edges}, "
            f"d={self.dim}, attr_dim={self.attr_dim})"
        )


def build_neighborhood_graph(points, rule="epsilon-ball", radius=None, k=None,
                             edges=None, attributes=None):
    """Build a PointCloudGraph from raw positions.

    rule is one of "epsilon-ball" (edge iff distance <= radius),
    "k-nearest" (each point selects its k nearest; union-symmetrized,
    distance ties broken by lower vertex index) or "explicit-edges".
    Attributes default to the positions themselves.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        points = points.reshape(len(points), -1)
    if len(points) == 0:
        raise ValueError("at least one point required")
    if not np.isfinite(points).all():
        raise ValueError("non-finite coordinates")
    if attributes is None:
        attributes = points
    n = len(points)

    if rule == "explicit-edges":
        return PointCloudGraph(points, attributes, edges or [])

    diff = points[:, None, :] - points[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    pairs = set()
    if rule == "epsilon-ball":
        if radius is None or radius <= 0:
            raise ValueError("epsilon-ball rule needs radius > 0")
        ii, jj = np.nonzero(dist <= radius)
        pairs = {(int(a), int(b)) for a, b in zip(ii, jj) if a < b}
    elif rule == "k-nearest":
        if k is None or k < 1:
            raise ValueError("k-nearest rule needs k >= 1")
        for i in range(n):
            order = sorted((dist[i, j], j) for j in range(n) if j != i)
            for _, j in order[: min(k, n - 1)]:
                pairs.add((i, j) if i < j else (j, i))
    else:
        raise ValueError(f"unknown neighborhood rule {rule!r}")
    return PointCloudGraph(points, attributes, pairs)


_FMT = "%.17g"


def save_graph(graph, path):
    """Write a graph in the line-oriented `pcg 1` text format."""
    lines = [
        f"pcg 1 {graph.n_vertices} {graph.n_edges} {graph.dim} {graph.attr_dim}"
    ]
    for pos, att in zip(graph.positions, graph.attributes):
        nums = [_FMT % x for x in pos] + [_FMT % a for a in att]
        lines.append("v " + " ".join(nums))
    for i, j in sorted(graph.edges):
        lines.append(f"e {i} {j}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_graph(path):
    """Read a graph written by save_graph; validates structure."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise GraphFormatError(f"{path}: empty file")
    head = lines[0].split()
    if len(head) != 6 or head[0] != "pcg" or head[1] != "1":
        raise GraphFormatError(f"{path}: bad header {lines[0]!r}")
    n, m, d, attr_dim = (int(x) for x in head[2:])
    if len(lines) != 1 + n + m:
        raise GraphFormatError(
            f"{path}: expected {1 + n + m} lines, found {len(lines)}"
        )
    positions = np.zeros((n, d))
    attributes = np.zeros((n, attr_dim))
    for v in range(n):
        parts = lines[1 + v].split()
        if parts[0] != "v" or len(parts) != 1 + d + attr_dim:
            raise GraphFormatError(f"{path}: bad vertex line {lines[1 + v]!r}")
        vals = [float(x) for x in parts[1:]]
        positions[v] = vals[:d]
        attributes[v] = vals[d:]
    edges = []
    seen = set()
    for e in range(m):
        parts = lines[1 + n + e].split()
        if parts[0] != "e" or len(parts) != 3:
            raise GraphFormatError(f"{path}: bad edge line {lines[1 + n + e]!r}")
        i, j = int(parts[1]), int(parts[2])
        if not i < j:
            raise GraphFormatError(f"{path}: edge ({i},{j}) not ordered i < j")
        if (i, j) in seen:
            raise GraphFormatError(f"{path}: duplicate edge ({i},{j})")
        seen.add((i, j))
        edges.append((i, j))
    return PointCloudGraph(positions, attributes, edges)

"""Undirected road graphs: validation, JSON I/O, rasterization and node merging."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class GraphFormatError(ValueError):
    """Raised when a graph file cannot be parsed."""


class GraphInvariantError(ValueError):
    """Raised when a graph violates a structural invariant."""


@dataclass
class RoadGraph:
    """Planar road graph in pixel coordinates.

    ``nodes`` is a list of ``(x, y)`` floats, ``edges`` a list of index pairs.
    ``size`` optionally records the ``(width, height)`` canvas.
    """

    nodes: list[tuple[float, float]] = field(default_factory=list)
    edges: list[tuple[int, int]] = field(default_factory=list)
    size: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        self.nodes = [(float(x), float(y)) for x, y in self.nodes]
        self.edges = [(int(i), int(j)) for i, j in self.edges]
        if self.size is not None:
            self.size = (int(self.size[0]), int(self.size[1]))

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def coords(self) -> np.ndarray:
        return np.asarray(self.nodes, dtype=np.float64).reshape(-1, 2)

    def edge_array(self) -> np.ndarray:
        return np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.num_nodes, dtype=np.int64)
        for i, j in self.edges:
            deg[i] += 1
            deg[j] += 1
        return deg

    def edge_set(self) -> set[frozenset[int]]:
        return {frozenset(e) for e in self.edges}

    def validate(self) -> "RoadGraph":
        n = self.num_nodes
        seen: set[tuple[int, int]] = set()
        for k, (i, j) in enumerate(self.edges):
            if not (0 <= i < n and 0 <= j < n):
                raise GraphInvariantError(
                    f"edge {k} ({i}, {j}) references a node index outside [0, {n})"
                )
            if i == j:
                raise GraphInvariantError(f"edge {k} ({i}, {j}) is a self-loop")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise GraphInvariantError(f"edge {k} ({i}, {j}) is a duplicate")
            seen.add(key)
        for k, (x, y) in enumerate(self.nodes):
            if not (math.isfinite(x) and math.isfinite(y)):
                raise GraphInvariantError(f"node {k} has non-finite coordinates ({x}, {y})")
            if self.size is not None:
                w, h = self.size
                if not (0 <= x < w and 0 <= y < h):
                    raise GraphInvariantError(
                        f"node {k} at ({x}, {y}) lies outside the {w}x{h} canvas"
                    )
        return self

    def translated(self, dx: float, dy: float, size: tuple[int, int] | None = None) -> "RoadGraph":
        return RoadGraph([(x + dx, y + dy) for x, y in self.nodes], list(self.edges), size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RoadGraph):
            return NotImplemented
        return self.nodes == other.nodes and self.edges == other.edges and self.size == other.size


def clean_edges(edges) -> list[tuple[int, int]]:
    """Drop self-loops and unordered duplicates, keeping first occurrences."""
    out = []
    seen = set()
    for i, j in edges:
        i, j = int(i), int(j)
        if i == j:
            continue
        key = (min(i, j), max(i, j))
        if key in seen:
            continue
        seen.add(key)
        out.append((i, j))
    return out


def graph_to_dict(graph: RoadGraph) -> dict:
    doc: dict = {
        "nodes": [[x, y] for x, y in graph.nodes],
        "edges": [[i, j] for i, j in graph.edges],
    }
    if graph.size is not None:
        doc["size"] = list(graph.size)
    return doc


def graph_from_dict(doc: dict, source: str = "<graph>") -> RoadGraph:
    if not isinstance(doc, dict):
        raise GraphFormatError(f"{source}: top-level value must be an object")
    for key in ("nodes", "edges"):
        if key not in doc:
            raise GraphFormatError(f"{source}: missing key {key!r}")
        if not isinstance(doc[key], list):
            raise GraphFormatError(f"{source}: {key!r} must be an array")
    nodes = []
    for k, item in enumerate(doc["nodes"]):
        if (
            not isinstance(item, list)
            or len(item) != 2
            or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in item)
        ):
            raise GraphFormatError(f"{source}: nodes[{k}] must be an [x, y] number pair, got {item!r}")
        nodes.append((float(item[0]), float(item[1])))
    edges = []
    for k, item in enumerate(doc["edges"]):
        if (
            not isinstance(item, list)
            or len(item) != 2
            or not all(isinstance(v, int) and not isinstance(v, bool) for v in item)
        ):
            raise GraphFormatError(f"{source}: edges[{k}] must be an [i, j] integer pair, got {item!r}")
        edges.append((item[0], item[1]))
    size = doc.get("size")
    if size is not None:
        if not (isinstance(size, list) and len(size) == 2 and all(isinstance(v, int) for v in size)):
            raise GraphFormatError(f"{source}: 'size' must be an [width, height] integer pair")
    return RoadGraph(nodes, edges, tuple(size) if size is not None else None).validate()


def load_graph(path) -> RoadGraph:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphFormatError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return graph_from_dict(doc, str(path))


def save_graph(graph: RoadGraph, path) -> None:
    graph.validate()
    # json emits repr() floats, which round-trip exactly
    Path(path).write_text(json.dumps(graph_to_dict(graph)), encoding="utf-8")


# --------------------------------------------------------------------------
# geometry


def point_segment_distance(px, py, ax: float, ay: float, bx: float, by: float):
    """Euclidean distance from points (px, py) to segment a-b; broadcasts over arrays."""
    dx, dy = bx - ax, by - ay
    len2 = dx * dx + dy * dy
    if len2 == 0.0:
        return np.hypot(px - ax, py - ay)
    t = ((px - ax) * dx + (py - ay) * dy) / len2
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(px - (ax + t * dx), py - (ay + t * dy))


def project_to_segment(px: float, py: float, ax, ay, bx, by):
    """Return (distance, t) of the closest point on segment a-b to p."""
    dx, dy = bx - ax, by - ay
    len2 = dx * dx + dy * dy
    if len2 == 0.0:
        return math.hypot(px - ax, py - ay), 0.0
    t = min(1.0, max(0.0, ((px - ax) * dx + (py - ay) * dy) / len2))
    return math.hypot(px - (ax + t * dx), py - (ay + t * dy)), t


def segment_distance_field(graph: RoadGraph, width: int, height: int, reach: float) -> np.ndarray:
    """Distance from every pixel center to the nearest edge, capped at ``reach``.

    Pixel ``(col, row)`` has its center at integer coordinates ``(col, row)``.
    Only pixels within ``reach`` of a segment's bounding box are evaluated.
    """
    dist = np.full((height, width), np.inf)
    pts = graph.coords()
    for i, j in graph.edges:
        ax, ay = pts[i]
        bx, by = pts[j]
        x0 = max(0, int(math.floor(min(ax, bx) - reach)))
        x1 = min(width - 1, int(math.ceil(max(ax, bx) + reach)))
        y0 = max(0, int(math.floor(min(ay, by) - reach)))
        y1 = min(height - 1, int(math.ceil(max(ay, by) + reach)))
        if x0 > x1 or y0 > y1:
            continue
        xs = np.arange(x0, x1 + 1, dtype=np.float64)[None, :]
        ys = np.arange(y0, y1 + 1, dtype=np.float64)[:, None]
        d = point_segment_distance(xs, ys, ax, ay, bx, by)
        view = dist[y0 : y1 + 1, x0 : x1 + 1]
        np.minimum(view, d, out=view)
    return dist


def rasterize(graph: RoadGraph, width: int, height: int, line_width: float = 1.0) -> np.ndarray:
    """Binary mask of pixels whose center lies within ``line_width / 2`` of an edge."""
    if line_width < 1:
        raise ValueError("line_width must be >= 1")
    half = line_width / 2.0
    dist = segment_distance_field(graph, width, height, half + 1.0)
    return (dist <= half).astype(np.uint8)


# --------------------------------------------------------------------------
# merging and statistics


class UnionFind:
    def __init__(self, n: int) -> None:
        self.parent = list(range(n))

    def find(self, a: int) -> int:
        root = a
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[a] != root:
            self.parent[a], a = root, self.parent[a]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # smaller index stays the representative so results do not depend on visit order
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra


def cluster_nodes(coords: np.ndarray, radius: float) -> np.ndarray:
    """Single-linkage cluster labels (0..k-1, ordered by first member) under distance <= radius."""
    n = len(coords)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    uf = UnionFind(n)
    if radius >= 0 and n > 1:
        from scipy.spatial import cKDTree

        for a, b in cKDTree(coords).query_pairs(radius, output_type="ndarray"):
            uf.union(int(a), int(b))
    roots = [uf.find(i) for i in range(n)]
    relabel: dict[int, int] = {}
    labels = np.empty(n, dtype=np.int64)
    for i, r in enumerate(roots):
        labels[i] = relabel.setdefault(r, len(relabel))
    return labels


def merge_points(coords: np.ndarray, radius: float) -> tuple[np.ndarray, np.ndarray]:
    """Centroids and per-point labels after merging to a fixpoint.

    A fresh centroid can land within ``radius`` of a node that was outside
    every member's reach, so clustering repeats until nothing merges. This
    makes the result idempotent.
    """
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    labels = np.arange(len(coords))
    current = coords
    while True:
        step = cluster_nodes(current, radius)
        k = int(step.max()) + 1 if len(step) else 0
        if k == len(current):
            return current, labels
        sums = np.zeros((k, 2))
        counts = np.zeros(k)
        labels = step[labels]
        # centroid of the original members, not of intermediate centroids
        np.add.at(sums, labels, coords)
        np.add.at(counts, labels, 1.0)
        current = sums / counts[:, None]


def merge_nearby_nodes(graph: RoadGraph, radius: float) -> RoadGraph:
    """Collapse nodes within ``radius`` of each other (transitively) into their centroid.

    Edges are re-pointed to the merged nodes; self-loops and duplicates vanish.
    """
    if radius < 0:
        raise ValueError("radius must be >= 0")
    centroids, labels = merge_points(graph.coords(), radius)
    edges = clean_edges((labels[i], labels[j]) for i, j in graph.edges)
    return RoadGraph([tuple(c) for c in centroids], edges, graph.size)


def graph_stats(graph: RoadGraph) -> tuple[int, int, int]:
    n, e = graph.num_nodes, graph.num_edges
    return n, e, n + e


def disjoint_union(graphs: list[RoadGraph], size: tuple[int, int] | None = None) -> RoadGraph:
    nodes: list[tuple[float, float]] = []
    edges: list[tuple[int, int]] = []
    for g in graphs:
        off = len(nodes)
        nodes.extend(g.nodes)
        edges.extend((i + off, j + off) for i, j in g.edges)
    return RoadGraph(nodes, edges, size)

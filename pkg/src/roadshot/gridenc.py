"""Per-cell training targets from ground-truth road graphs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geograph import RoadGraph, clean_edges


@dataclass
class GridTargets:
    grid_h: int
    grid_w: int
    stride: int
    junction_grid: np.ndarray  # [H, W] of {0, 1}
    offset_field: np.ndarray  # [H, W, 2] as (u, v) in [-0.5, 0.5]
    merged_graph: RoadGraph
    cell_of_node: np.ndarray  # [n, 2] as (row, col), row-major order

    @property
    def node_of_cell(self) -> dict[tuple[int, int], int]:
        return {(int(r), int(c)): k for k, (r, c) in enumerate(self.cell_of_node)}


def encode_targets(graph: RoadGraph, image_w: int, image_h: int, stride: int = 32) -> GridTargets:
    """Bucket nodes into stride-sized cells, merging co-cell nodes into their centroid.

    Edges follow their endpoints to the merged nodes; edges that end up
    inside a single cell vanish. Merged nodes are ordered row-major by cell.
    """
    if image_w % stride or image_h % stride:
        raise ValueError(f"image {image_w}x{image_h} is not divisible by stride {stride}")
    gh, gw = image_h // stride, image_w // stride
    coords = graph.coords()
    if len(coords):
        bad = (coords[:, 0] < 0) | (coords[:, 0] >= image_w) | (coords[:, 1] < 0) | (coords[:, 1] >= image_h)
        if bad.any():
            k = int(np.flatnonzero(bad)[0])
            raise ValueError(f"node {k} at {tuple(coords[k])} lies outside the {image_w}x{image_h} canvas")
    cols = np.floor(coords[:, 0] / stride).astype(np.int64)
    rows = np.floor(coords[:, 1] / stride).astype(np.int64)
    flat = rows * gw + cols
    cells, labels = np.unique(flat, return_inverse=True)
    k = len(cells)
    sums = np.zeros((k, 2))
    counts = np.zeros(k)
    np.add.at(sums, labels, coords)
    np.add.at(counts, labels, 1.0)
    centroids = sums / np.maximum(counts, 1.0)[:, None]
    cell_rc = np.stack([cells // gw, cells % gw], axis=1) if k else np.zeros((0, 2), dtype=np.int64)

    junction = np.zeros((gh, gw))
    offsets = np.zeros((gh, gw, 2))
    if k:
        junction[cell_rc[:, 0], cell_rc[:, 1]] = 1.0
        offsets[cell_rc[:, 0], cell_rc[:, 1], 0] = centroids[:, 0] / stride - cell_rc[:, 1] - 0.5
        offsets[cell_rc[:, 0], cell_rc[:, 1], 1] = centroids[:, 1] / stride - cell_rc[:, 0] - 0.5
    edges = clean_edges((labels[i], labels[j]) for i, j in graph.edges)
    edges = sorted((min(i, j), max(i, j)) for i, j in edges)
    merged = RoadGraph([tuple(c) for c in centroids], edges, (image_w, image_h))
    return GridTargets(gh, gw, stride, junction, offsets, merged, cell_rc)


@dataclass
class EdgeLabelSet:
    """Candidate cells and labels for every unordered candidate pair.

    ``pairs[m] = (a, b)`` with ``a < b`` indexes into ``candidate_cells``.
    """

    candidate_cells: np.ndarray  # [n, 2] (row, col), row-major sorted
    pairs: np.ndarray  # [m, 2]
    labels: np.ndarray  # [m] of {0, 1}

    def label(self, cell_a, cell_b) -> int:
        lookup = {tuple(map(int, c)): k for k, c in enumerate(self.candidate_cells)}
        a, b = lookup[tuple(cell_a)], lookup[tuple(cell_b)]
        if a == b:
            raise ValueError("pair must join two distinct candidates")
        a, b = min(a, b), max(a, b)
        n = len(self.candidate_cells)
        m = a * n - a * (a + 1) // 2 + (b - a - 1)
        return int(self.labels[m])

    def as_dict(self) -> dict[frozenset, int]:
        cells = [tuple(map(int, c)) for c in self.candidate_cells]
        return {frozenset((cells[a], cells[b])): int(y) for (a, b), y in zip(self.pairs, self.labels)}


def all_pairs(n: int) -> np.ndarray:
    a, b = np.triu_indices(n, k=1)
    return np.stack([a, b], axis=1).astype(np.int64)


def build_edge_labels(targets: GridTargets, predicted_junction: np.ndarray, train_jthr: float = 0.5) -> EdgeLabelSet:
    """Candidates are ground-truth cells plus cells predicted above ``train_jthr``."""
    pred = np.asarray(predicted_junction)
    cand = targets.junction_grid > 0
    cand = cand | (pred > train_jthr)
    rows, cols = np.nonzero(cand)
    cells = np.stack([rows, cols], axis=1).astype(np.int64)
    pairs = all_pairs(len(cells))
    node_of = np.full((targets.grid_h, targets.grid_w), -1, dtype=np.int64)
    if len(targets.cell_of_node):
        node_of[targets.cell_of_node[:, 0], targets.cell_of_node[:, 1]] = np.arange(len(targets.cell_of_node))
    gt_index = node_of[rows, cols]
    adj = np.zeros((targets.merged_graph.num_nodes,) * 2, dtype=bool)
    for i, j in targets.merged_graph.edges:
        adj[i, j] = adj[j, i] = True
    labels = np.zeros(len(pairs), dtype=np.float64)
    if len(pairs):
        ga, gb = gt_index[pairs[:, 0]], gt_index[pairs[:, 1]]
        both = (ga >= 0) & (gb >= 0)
        labels[both] = adj[ga[both], gb[both]]
    return EdgeLabelSet(cells, pairs, labels)


def ratio_analysis(graphs, dims, stride: int, ratios) -> list[tuple[float, float]]:
    """Average ground-truth points per positive cell after resizing by each ratio.

    The average pools all positive cells of the corpus.
    """
    graphs = list(graphs)
    if not graphs:
        raise ValueError("ratio_analysis needs at least one graph")
    if len(dims) != len(graphs):
        raise ValueError("dims must match graphs")
    rows = []
    for r in ratios:
        if r <= 0:
            raise ValueError("ratios must be positive")
        points = 0
        positive = 0
        for g in graphs:
            c = g.coords() * r
            if not len(c):
                continue
            cells = np.floor(c / stride).astype(np.int64)
            uniq = np.unique(cells, axis=0)
            points += len(c)
            positive += len(uniq)
        rows.append((float(r), points / positive if positive else float("nan")))
    return rows

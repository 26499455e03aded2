"""Road-graph evaluation: pixel F1, junction F1, APLS and graph complexity."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

from .geograph import RoadGraph, load_graph, project_to_segment, rasterize


def f1_score(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2.0 * p * r / (p + r)


@dataclass(frozen=True)
class MetricConfig:
    line_width: float = 1.0
    buffer: float = 4.0
    match_radius: float = 8.0
    snap_radius: float = 8.0


# --------------------------------------------------------------------------
# pixel F1


def pixel_f1(
    pred: RoadGraph,
    gt: RoadGraph,
    width: int,
    height: int,
    line_width: float = 1.0,
    buffer: float = 4.0,
) -> tuple[float, float, float]:
    """Buffered precision / recall / F1 between rasterized graphs."""
    pm = rasterize(pred, width, height, line_width).astype(bool)
    gm = rasterize(gt, width, height, line_width).astype(bool)
    if not pm.any() and not gm.any():
        return 1.0, 1.0, 1.0
    if not pm.any() or not gm.any():
        return 0.0, 0.0, 0.0
    d_gt = ndimage.distance_transform_edt(~gm)
    d_pred = ndimage.distance_transform_edt(~pm)
    precision = float((d_gt[pm] <= buffer).mean())
    recall = float((d_pred[gm] <= buffer).mean())
    return precision, recall, f1_score(precision, recall)


# --------------------------------------------------------------------------
# junction F1


def junctions(graph: RoadGraph) -> tuple[np.ndarray, np.ndarray]:
    """Coordinates and degrees of nodes whose degree is not 2."""
    deg = graph.degrees()
    keep = deg != 2
    return graph.coords()[keep], deg[keep]


def greedy_match(a: np.ndarray, b: np.ndarray, radius: float) -> list[tuple[int, int]]:
    """One-to-one nearest-first matching of points within ``radius``.

    Candidate pairs are taken in order of (distance, index in a, index in b).
    """
    if len(a) == 0 or len(b) == 0:
        return []
    d = np.hypot(a[:, None, 0] - b[None, :, 0], a[:, None, 1] - b[None, :, 1])
    ia, ib = np.nonzero(d <= radius)
    order = np.lexsort((ib, ia, d[ia, ib]))
    used_a: set[int] = set()
    used_b: set[int] = set()
    out = []
    for k in order:
        i, j = int(ia[k]), int(ib[k])
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        out.append((i, j))
    return out


def junction_f1(pred: RoadGraph, gt: RoadGraph, match_radius: float = 8.0) -> tuple[float, float, float]:
    """F1 over junctions; a location match counts only when degrees agree."""
    pc, pd = junctions(pred)
    gc, gd = junctions(gt)
    if len(pc) == 0 and len(gc) == 0:
        return 1.0, 1.0, 1.0
    tp = sum(1 for i, j in greedy_match(pc, gc, match_radius) if pd[i] == gd[j])
    precision = tp / len(pc) if len(pc) else 0.0
    recall = tp / len(gc) if len(gc) else 0.0
    return precision, recall, f1_score(precision, recall)


# --------------------------------------------------------------------------
# APLS


def _lengths(graph: RoadGraph) -> np.ndarray:
    c = graph.coords()
    e = graph.edge_array()
    if len(e) == 0:
        return np.zeros(0)
    return np.hypot(*(c[e[:, 0]] - c[e[:, 1]]).T)


def shortest_paths(n: int, edges: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """All-pairs shortest path lengths on an undirected weighted graph."""
    if n == 0:
        return np.zeros((0, 0))
    if len(edges) == 0:
        d = np.full((n, n), np.inf)
        np.fill_diagonal(d, 0.0)
        return d
    # zero-length edges would vanish from a sparse matrix
    w = np.maximum(weights, 1e-300)
    m = csr_matrix((np.concatenate([w, w]), (np.concatenate([edges[:, 0], edges[:, 1]]), np.concatenate([edges[:, 1], edges[:, 0]]))), shape=(n, n))
    return dijkstra(m, directed=True)


def snap_points(points: np.ndarray, graph: RoadGraph, radius: float) -> list[tuple[str, int, float] | None]:
    """Nearest location on ``graph`` for each point, or None beyond ``radius``.

    Results are ("node", index, 0.0) or ("edge", index, t) with ``t`` in (0, 1).
    """
    coords = graph.coords()
    edges = graph.edge_array()
    deg = graph.degrees()
    isolated = np.flatnonzero(deg == 0)
    out: list[tuple[str, int, float] | None] = []
    for px, py in points:
        best = (math.inf, None)
        for k, (i, j) in enumerate(edges):
            (ax, ay), (bx, by) = coords[i], coords[j]
            d, t = project_to_segment(px, py, ax, ay, bx, by)
            if d < best[0]:
                if t <= 0.0:
                    loc = ("node", int(i), 0.0)
                elif t >= 1.0:
                    loc = ("node", int(j), 0.0)
                else:
                    loc = ("edge", k, t)
                best = (d, loc)
        for i in isolated:
            d = math.hypot(px - coords[i, 0], py - coords[i, 1])
            if d < best[0]:
                best = (d, ("node", int(i), 0.0))
        out.append(best[1] if best[0] <= radius else None)
    return out


def augment_with_snaps(graph: RoadGraph, snaps) -> tuple[int, np.ndarray, np.ndarray, list[int | None]]:
    """Split edges at snapped points; return node count, edges, lengths and point ids."""
    coords = graph.coords()
    n = graph.num_nodes
    point_ids: list[int | None] = []
    on_edge: dict[int, list[tuple[float, int]]] = {}
    for s in snaps:
        if s is None:
            point_ids.append(None)
        elif s[0] == "node":
            point_ids.append(s[1])
        else:
            on_edge.setdefault(s[1], []).append((s[2], n))
            point_ids.append(n)
            n += 1
    new_edges, new_w = [], []
    for k, (i, j) in enumerate(graph.edges):
        length = math.hypot(coords[j, 0] - coords[i, 0], coords[j, 1] - coords[i, 1])
        chain = [(0.0, i)] + sorted(on_edge.get(k, [])) + [(1.0, j)]
        for (t0, u), (t1, v) in zip(chain[:-1], chain[1:]):
            new_edges.append((u, v))
            new_w.append((t1 - t0) * length)
    return n, np.asarray(new_edges, dtype=np.int64).reshape(-1, 2), np.asarray(new_w), point_ids


def apls_one_sided(g: RoadGraph, h: RoadGraph, snap_radius: float) -> float | None:
    """1 − mean path-length penalty for node pairs connected in ``g``, measured in ``h``.

    Returns None when ``g`` has no connected pair.
    """
    n = g.num_nodes
    dg = shortest_paths(n, g.edge_array(), _lengths(g))
    ia, ib = np.triu_indices(n, k=1)
    conn = np.isfinite(dg[ia, ib])
    ia, ib = ia[conn], ib[conn]
    if len(ia) == 0:
        return None
    snaps = snap_points(g.coords(), h, snap_radius)
    m, edges, weights, ids = augment_with_snaps(h, snaps)
    dh = shortest_paths(m, edges, weights)
    penalties = np.ones(len(ia))
    for k, (a, b) in enumerate(zip(ia, ib)):
        sa, sb = ids[a], ids[b]
        if sa is None or sb is None:
            continue
        lp = dh[sa, sb]
        if not np.isfinite(lp):
            continue
        length = dg[a, b]
        if length == 0.0:
            penalties[k] = 0.0 if lp == 0.0 else 1.0
        else:
            penalties[k] = min(1.0, abs(length - lp) / length)
    return float(1.0 - penalties.mean())


def apls(pred: RoadGraph, gt: RoadGraph, snap_radius: float = 8.0) -> float:
    """Symmetric average path length similarity in [0, 1]."""
    if pred.num_nodes == 0 and gt.num_nodes == 0:
        return 1.0
    if pred.num_nodes == 0 or gt.num_nodes == 0:
        return 0.0
    s_gt = apls_one_sided(gt, pred, snap_radius)
    s_pred = apls_one_sided(pred, gt, snap_radius)
    if s_gt is None and s_pred is None:
        return 1.0
    return 0.5 * ((s_gt or 0.0) + (s_pred or 0.0))


# --------------------------------------------------------------------------
# complexity


def complexity_score(pred: RoadGraph | tuple[int, int], apls_percent: float) -> float:
    """(nodes + edges) / APLS on the percent scale, rounded; inf when APLS is 0."""
    if isinstance(pred, RoadGraph):
        total = pred.num_nodes + pred.num_edges
    else:
        total = int(pred[0]) + int(pred[1])
    if apls_percent <= 0:
        return math.inf
    return float(round(total / apls_percent))


# --------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    scene: str
    p_f1: float
    j_f1: float
    apls: float
    nodes: float
    edges: float
    p_precision: float = 0.0
    p_recall: float = 0.0
    j_precision: float = 0.0
    j_recall: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def total(self) -> float:
        return self.nodes + self.edges

    @property
    def complexity(self) -> float:
        return self.total / (100.0 * self.apls) if self.apls > 0 else math.inf

    def row(self) -> list:
        return [self.scene, self.p_f1, self.j_f1, self.apls, self.nodes, self.edges, self.complexity]


REPORT_HEADER = ["scene", "p_f1", "j_f1", "apls", "nodes", "edges", "complexity"]


def evaluate_pair(pred: RoadGraph, gt: RoadGraph, width: int, height: int, cfg: MetricConfig = MetricConfig(), scene: str = "") -> EvalReport:
    pp, pr, pf = pixel_f1(pred, gt, width, height, cfg.line_width, cfg.buffer)
    jp, jr, jf = junction_f1(pred, gt, cfg.match_radius)
    a = apls(pred, gt, cfg.snap_radius)
    return EvalReport(scene, pf, jf, a, pred.num_nodes, pred.num_edges, pp, pr, jp, jr)


def macro_average(reports: list[EvalReport], name: str = "MACRO") -> EvalReport:
    if not reports:
        raise ValueError("no reports to average")
    fields = ["p_f1", "j_f1", "apls", "nodes", "edges", "p_precision", "p_recall", "j_precision", "j_recall"]
    vals = {f: float(np.mean([getattr(r, f) for r in reports])) for f in fields}
    return EvalReport(name, **vals)


def evaluate(pred_dir, gt_dir, cfg: MetricConfig = MetricConfig(), jobs: int = 1) -> tuple[list[EvalReport], EvalReport]:
    """Per-scene reports for every ground-truth graph plus their macro average."""
    gt_paths = sorted(Path(gt_dir).glob("*.json"))
    if not gt_paths:
        raise FileNotFoundError(f"no graph files in {gt_dir}")
    for gp in gt_paths:
        if not (Path(pred_dir) / gp.name).exists():
            raise FileNotFoundError(f"missing prediction for {gp.name} in {pred_dir}")

    def one(gp: Path) -> EvalReport:
        gt = load_graph(gp)
        pred = load_graph(Path(pred_dir) / gp.name)
        size = gt.size or pred.size
        if size is None:
            raise ValueError(f"{gp.name}: canvas size unknown; store 'size' in the graph file")
        return evaluate_pair(pred, gt, size[0], size[1], cfg, gp.stem)

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            reports = list(pool.map(one, gt_paths))
    else:
        reports = [one(gp) for gp in gt_paths]
    return reports, macro_average(reports)


def write_report(path, reports: list[EvalReport], macro: EvalReport | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_HEADER)
        for r in reports:
            w.writerow(r.row())
        if macro is not None:
            w.writerow(macro.row())

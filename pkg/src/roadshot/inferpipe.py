"""Decoding, tile prediction, sliding-window inference and threshold sweeps."""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .extractor import ModelParams, model_forward
from .geograph import RoadGraph, UnionFind, load_graph
from .metrics import MetricConfig, evaluate_pair, macro_average
from .synthgen import list_scenes, read_image


@dataclass(frozen=True)
class InferConfig:
    j_thr: float = 0.5
    edge_thr: float = 0.5
    window: int = 256
    overlap_stride: int | None = None  # default: window / 2
    merge_radius: float | None = None  # default: half a cell

    def resolved(self, stride: int = 32) -> "InferConfig":
        ov = self.window // 2 if self.overlap_stride is None else self.overlap_stride
        mr = stride / 2 if self.merge_radius is None else self.merge_radius
        cfg = InferConfig(self.j_thr, self.edge_thr, self.window, ov, mr)
        if cfg.window % stride:
            raise ValueError(f"window {cfg.window} is not divisible by {stride}")
        if not 0 < cfg.overlap_stride <= cfg.window:
            raise ValueError("overlap_stride must lie in (0, window]")
        return cfg


def decode_points(junction_grid, offset_grid, j_thr: float, image_w: int, image_h: int):
    """Cells with junction-ness above ``j_thr`` and their pixel positions.

    x = (u + X + 0.5) / W * W_I and likewise for y. Cells come back row-major.
    """
    J = np.asarray(junction_grid)
    off = np.asarray(offset_grid)
    gh, gw = J.shape
    if image_w % gw or image_h % gh:
        raise ValueError("grid dimensions must divide image dimensions")
    rows, cols = np.nonzero(J > j_thr)
    xs = (off[rows, cols, 0] + cols + 0.5) / gw * image_w
    ys = (off[rows, cols, 1] + rows + 0.5) / gh * image_h
    return [((int(r), int(c)), (float(x), float(y))) for r, c, x, y in zip(rows, cols, xs, ys)]


@dataclass
class ScoredGraph:
    """Nodes plus probability-weighted candidate edges, before the edge cut."""

    coords: np.ndarray
    pairs: np.ndarray
    probs: np.ndarray
    size: tuple[int, int] | None = None

    def cut(self, edge_thr: float) -> RoadGraph:
        keep = self.probs > edge_thr
        edges = [tuple(map(int, p)) for p in self.pairs[keep]]
        return RoadGraph([tuple(c) for c in self.coords], edges, self.size)


def score_tile(tile: np.ndarray, params: ModelParams, j_thr: float) -> ScoredGraph:
    res = model_forward(tile, params, j_thr)
    h, w = tile.shape[1:]
    coords = np.array([p for _, p in decode_points(res.junction, res.offsets, j_thr, w, h)]).reshape(-1, 2)
    # an offset of +0.5 in the last cell decodes onto the far border
    coords = np.clip(coords, 0.0, [w - 1.0, h - 1.0])
    return ScoredGraph(coords, res.edges.pairs, res.edges.probs, (w, h))


def predict_tile(tile: np.ndarray, params: ModelParams, cfg: InferConfig = InferConfig()) -> RoadGraph:
    return score_tile(tile, params, cfg.j_thr).cut(cfg.edge_thr)


def tile_origins(extent: int, window: int, step: int) -> list[int]:
    """Tile starts every ``step`` pixels, with a final tile flush to the border."""
    if extent < window:
        raise ValueError(f"image extent {extent} is smaller than window {window}")
    starts = list(range(0, extent - window + 1, step))
    if starts[-1] != extent - window:
        starts.append(extent - window)
    return starts


def merge_across_tiles(coords: np.ndarray, tile_ids: np.ndarray, radius: float) -> tuple[np.ndarray, np.ndarray]:
    """Centroids and labels after joining points from different tiles within ``radius``.

    Points from the same tile come from distinct grid cells and are never
    duplicates of each other, so they are only joined transitively.
    """
    n = len(coords)
    uf = UnionFind(n)
    if n > 1:
        from scipy.spatial import cKDTree

        for a, b in cKDTree(coords).query_pairs(radius, output_type="ndarray"):
            if tile_ids[a] != tile_ids[b]:
                uf.union(int(a), int(b))
    relabel: dict[int, int] = {}
    labels = np.array([relabel.setdefault(uf.find(i), len(relabel)) for i in range(n)], dtype=np.int64)
    k = len(relabel)
    sums = np.zeros((k, 2))
    counts = np.zeros(k)
    np.add.at(sums, labels, coords)
    np.add.at(counts, labels, 1.0)
    return sums / np.maximum(counts, 1.0)[:, None], labels


def score_image(image: np.ndarray, params: ModelParams, cfg: InferConfig = InferConfig(), jobs: int = 1) -> ScoredGraph:
    """Sliding-window scoring with node merging; duplicate edges keep the max probability."""
    cfg = cfg.resolved(params.config.stride)
    _, h, w = image.shape
    origins = [(y, x) for y in tile_origins(h, cfg.window, cfg.overlap_stride) for x in tile_origins(w, cfg.window, cfg.overlap_stride)]

    def run(origin):
        y, x = origin
        return score_tile(image[:, y : y + cfg.window, x : x + cfg.window], params, cfg.j_thr)

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            tiles = list(pool.map(run, origins))
    else:
        tiles = [run(o) for o in origins]

    coords, pairs, probs, tile_ids = [], [], [], []
    offset = 0
    for k, ((y, x), t) in enumerate(zip(origins, tiles)):
        coords.append(t.coords + np.array([x, y], dtype=np.float64))
        tile_ids.append(np.full(len(t.coords), k))
        pairs.append(t.pairs + offset)
        probs.append(t.probs)
        offset += len(t.coords)
    coords = np.concatenate(coords) if coords else np.zeros((0, 2))
    pairs = np.concatenate(pairs).reshape(-1, 2) if pairs else np.zeros((0, 2), dtype=np.int64)
    probs = np.concatenate(probs) if probs else np.zeros(0)

    centroids, labels = merge_across_tiles(coords, np.concatenate(tile_ids), cfg.merge_radius)
    best: dict[tuple[int, int], float] = {}
    for (a, b), p in zip(pairs, probs):
        la, lb = int(labels[a]), int(labels[b])
        if la == lb:
            continue
        key = (min(la, lb), max(la, lb))
        if p > best.get(key, -1.0):
            best[key] = float(p)
    keys = sorted(best)
    return ScoredGraph(
        centroids,
        np.asarray(keys, dtype=np.int64).reshape(-1, 2),
        np.asarray([best[k] for k in keys]),
        (w, h),
    )


def sliding_window_infer(image: np.ndarray, params: ModelParams, cfg: InferConfig = InferConfig(), jobs: int = 1) -> RoadGraph:
    return score_image(image, params, cfg, jobs).cut(cfg.edge_thr)


@dataclass
class SweepRow:
    threshold: float
    p_f1: float
    j_f1: float
    apls: float
    nodes: float
    edges: float
    p_recall: float = 0.0
    extra: dict = field(default_factory=dict)

    def row(self) -> list:
        return [self.threshold, self.p_f1, self.j_f1, self.apls, self.nodes, self.edges]


SWEEP_HEADER = ["threshold", "p_f1", "j_f1", "apls", "nodes", "edges"]


def threshold_sweep(
    dataset_dir,
    params: ModelParams,
    thresholds,
    cfg: InferConfig = InferConfig(),
    metric_cfg: MetricConfig = MetricConfig(),
    jobs: int = 1,
    limit: int | None = None,
) -> list[SweepRow]:
    """Metrics at each edge threshold; every scene is scored only once."""
    thresholds = [float(t) for t in thresholds]
    if any(not 0.0 <= t <= 1.0 for t in thresholds):
        raise ValueError("thresholds must lie in [0, 1]")
    scenes = list_scenes(dataset_dir)[:limit]
    cached = []
    for stem in scenes:
        image = read_image(stem.with_suffix(".img"))
        gt = load_graph(stem.with_suffix(".json"))
        cached.append((stem.name, gt, score_image(image, params, cfg, jobs)))
    rows = []
    for t in thresholds:
        reports = []
        for name, gt, scored in cached:
            pred = scored.cut(t)
            w, h = scored.size
            reports.append(evaluate_pair(pred, gt, w, h, metric_cfg, name))
        m = macro_average(reports)
        rows.append(SweepRow(t, m.p_f1, m.j_f1, m.apls, m.nodes, m.edges, m.p_recall))
    return rows


def write_sweep(path, rows: list[SweepRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_HEADER)
        for r in rows:
            w.writerow(r.row())


def predict_dataset(dataset_dir, params: ModelParams, out_dir, cfg: InferConfig = InferConfig(), jobs: int = 1) -> list[Path]:
    from .geograph import save_graph

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for stem in list_scenes(dataset_dir):
        image = read_image(stem.with_suffix(".img"))
        graph = sliding_window_infer(image, params, cfg, jobs)
        path = out / f"{stem.name}.json"
        save_graph(graph, path)
        written.append(path)
    return written

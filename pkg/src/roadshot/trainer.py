"""Joint training of the junction, offset and edge branches."""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensornet as tn
from .extractor import (
    ModelConfig,
    ModelParams,
    gather_nodes,
    gnn_forward,
    heads_forward,
    init_params,
    save_params,
    score_edges,
    stem_forward,
)
from .geograph import RoadGraph, clean_edges, load_graph
from .gridenc import build_edge_labels, encode_targets
from .synthgen import list_scenes, read_image
from .tensornet import Tensor


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    lr: float = 1e-3
    train_jthr: float = 0.5
    crop: int = 256
    flips: bool = True
    seed: int = 0
    w_jun: float = 1.0
    w_off: float = 1.0
    w_edge: float = 1.0
    # "gt" masks the offset loss by ground-truth cells, "pred" by J > train_jthr
    offset_mask: str = "gt"
    checkpoint_every: int = 10
    checkpoint: str | None = None
    # stop after the epoch that crosses this many seconds (None = no limit)
    time_budget: float | None = None

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.crop % 32:
            raise ValueError("crop must be divisible by 32")
        if self.offset_mask not in ("gt", "pred"):
            raise ValueError("offset_mask must be 'gt' or 'pred'")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class EpochRecord:
    epoch: int
    l_jun: float
    l_off: float
    l_edge: float
    l_total: float
    seconds: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def losses(self) -> list[tuple[float, float, float, float]]:
        return [(r.l_jun, r.l_off, r.l_edge, r.l_total) for r in self.records]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f.name for f in fields(EpochRecord)])
            for r in self.records:
                w.writerow([r.epoch, repr(r.l_jun), repr(r.l_off), repr(r.l_edge), repr(r.l_total), f"{r.seconds:.3f}"])


# --------------------------------------------------------------------------
# loss


@dataclass
class LossTerms:
    total: Tensor
    jun: float
    off: float
    edge: float


def total_loss(
    j_pred: Tensor,
    j_gt: np.ndarray,
    offsets_pred: Tensor,
    offsets_gt: np.ndarray,
    offset_mask: np.ndarray,
    edge_probs: Tensor | None,
    edge_labels: np.ndarray,
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0),
    clamp_eps: float = 1e-7,
) -> LossTerms:
    """Weighted sum of junction BCE, masked offset MSE and edge BCE."""
    l_jun = tn.bce_loss(j_pred, j_gt, clamp_eps)
    l_off = tn.masked_mse(offsets_pred, offsets_gt, offset_mask)
    if edge_probs is None or edge_probs.size == 0:
        l_edge = Tensor(0.0)
    else:
        l_edge = tn.bce_loss(edge_probs, edge_labels, clamp_eps)
    wj, wo, we = weights
    total = tn.add(tn.add(tn.mul(l_jun, wj), tn.mul(l_off, wo)), tn.mul(l_edge, we))
    return LossTerms(total, float(l_jun.data), float(l_off.data), float(l_edge.data))


# --------------------------------------------------------------------------
# augmentation and cropping


def flip_image_graph(image: np.ndarray, graph: RoadGraph, horizontal: bool, vertical: bool):
    """Flip pixels and node coordinates together (pixel centers at integers)."""
    _, h, w = image.shape
    nodes = graph.nodes
    if horizontal:
        image = image[:, :, ::-1]
        nodes = [(w - 1 - x, y) for x, y in nodes]
    if vertical:
        image = image[:, ::-1, :]
        nodes = [(x, h - 1 - y) for x, y in nodes]
    return np.ascontiguousarray(image), RoadGraph(nodes, list(graph.edges), graph.size)


def augment(image: np.ndarray, graph: RoadGraph, flips: bool, rng: np.random.Generator):
    if not flips:
        return image, graph
    hf, vf = rng.random(2) < 0.5
    return flip_image_graph(image, graph, bool(hf), bool(vf))


def _clip_segment(p, q, x0, y0, x1, y1):
    """Liang-Barsky clip of segment p-q to the box; returns (t0, t1) or None."""
    dx, dy = q[0] - p[0], q[1] - p[1]
    t0, t1 = 0.0, 1.0
    for pk, qk in ((-dx, p[0] - x0), (dx, x1 - p[0]), (-dy, p[1] - y0), (dy, y1 - p[1])):
        if pk == 0:
            if qk < 0:
                return None
            continue
        t = qk / pk
        if pk < 0:
            t0 = max(t0, t)
        else:
            t1 = min(t1, t)
    return (t0, t1) if t0 <= t1 else None


def crop_graph(graph: RoadGraph, x0: int, y0: int, size: int) -> RoadGraph:
    """Restrict a graph to the window [x0, x0+size) x [y0, y0+size), in window coordinates.

    Edges leaving the window end at a new node on its border.
    """
    lo, hi = 0.0, size - 1.0
    coords = graph.coords() - np.array([x0, y0], dtype=np.float64)
    inside = np.all((coords >= lo) & (coords <= hi), axis=1)
    nodes: list[tuple[float, float]] = []
    index: dict[int, int] = {}
    for i in np.flatnonzero(inside):
        index[int(i)] = len(nodes)
        nodes.append((float(coords[i, 0]), float(coords[i, 1])))
    edges = []
    for i, j in graph.edges:
        if inside[i] and inside[j]:
            edges.append((index[i], index[j]))
            continue
        p, q = coords[i], coords[j]
        span = _clip_segment(p, q, lo, lo, hi, hi)
        if span is None:
            continue
        t0, t1 = span
        ends = []
        for t, k in ((t0, i), (t1, j)):
            if inside[k]:
                ends.append(index[k])
            else:
                pt = p + t * (q - p)
                nodes.append((float(np.clip(pt[0], lo, hi)), float(np.clip(pt[1], lo, hi))))
                ends.append(len(nodes) - 1)
        edges.append(tuple(ends))
    return RoadGraph(nodes, clean_edges(edges), (size, size))


def random_crop(image: np.ndarray, graph: RoadGraph, size: int, rng: np.random.Generator):
    _, h, w = image.shape
    if size > h or size > w:
        raise ValueError(f"crop {size} exceeds image {w}x{h}")
    if size == h and size == w:
        return image, graph
    y0 = int(rng.integers(0, h - size + 1))
    x0 = int(rng.integers(0, w - size + 1))
    return image[:, y0 : y0 + size, x0 : x0 + size], crop_graph(graph, x0, y0, size)


# --------------------------------------------------------------------------
# training loop


def load_dataset(dataset_dir) -> list[tuple[str, np.ndarray, RoadGraph]]:
    scenes = list_scenes(dataset_dir)
    if not scenes:
        raise FileNotFoundError(f"no scenes in {dataset_dir}")
    return [(s.name, read_image(s.with_suffix(".img")).astype(np.float32), load_graph(s.with_suffix(".json"))) for s in scenes]


def train_step(
    params: ModelParams,
    images: np.ndarray,
    graphs: list[RoadGraph],
    tc: TrainConfig,
) -> LossTerms:
    """Forward and backward on one batch; gradients accumulate in ``params``."""
    config = params.config
    n, _, h, w = images.shape
    targets = [encode_targets(g, w, h, config.stride) for g in graphs]
    fmap = stem_forward(Tensor(images), params)
    heads = heads_forward(fmap, params)
    j_gt = np.stack([t.junction_grid for t in targets])
    v_gt = np.stack([t.offset_field for t in targets])
    if tc.offset_mask == "gt":
        mask = j_gt
    else:
        mask = (heads.junction.data > tc.train_jthr).astype(np.float64)
    label_sets = [build_edge_labels(t, heads.junction.data[i], tc.train_jthr) for i, t in enumerate(targets)]
    batch = gather_nodes(heads, [ls.candidate_cells for ls in label_sets], config)
    edge_probs = None
    labels = np.zeros(0)
    if len(batch):
        x = gnn_forward(batch, params, n, mode="train")
        pairs, ys, offset = [], [], 0
        for ls in label_sets:
            pairs.append(ls.pairs + offset)
            ys.append(ls.labels)
            offset += len(ls.candidate_cells)
        pairs = np.concatenate(pairs)
        labels = np.concatenate(ys)
        if len(pairs):
            edge_probs = score_edges(x, pairs, params).prob_tensor
    terms = total_loss(heads.junction, j_gt, heads.offsets, v_gt, mask, edge_probs, labels, (tc.w_jun, tc.w_off, tc.w_edge))
    tn.backward(terms.total)
    return terms


def train(
    dataset,
    tc: TrainConfig = TrainConfig(),
    mc: ModelConfig = ModelConfig(),
    params: ModelParams | None = None,
    progress: Callable[[EpochRecord], None] | None = None,
) -> tuple[ModelParams, TrainLog]:
    """Train on a scene directory (or preloaded scene list); deterministic given ``tc.seed``."""
    scenes = load_dataset(dataset) if isinstance(dataset, (str, Path)) else list(dataset)
    if not scenes:
        raise ValueError("dataset is empty")
    if params is None:
        params = init_params(mc, seed=tc.seed)
    rng = np.random.default_rng([tc.seed, 7])
    opt = tn.Adam(params.trainable(), lr=tc.lr)
    log = TrainLog()
    started = time.perf_counter()
    for epoch in range(1, tc.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(scenes))
        sums = np.zeros(4)
        batches = 0
        for b in range(0, len(order), tc.batch_size):
            imgs, graphs = [], []
            for k in order[b : b + tc.batch_size]:
                _, image, graph = scenes[k]
                image, graph = random_crop(image, graph, tc.crop, rng)
                image, graph = augment(image, graph, tc.flips, rng)
                imgs.append(image)
                graphs.append(graph)
            opt.zero_grad()
            terms = train_step(params, np.stack(imgs).astype(np.float64), graphs, tc)
            opt.step()
            sums += (terms.jun, terms.off, terms.edge, float(terms.total.data))
            batches += 1
        mean = sums / max(batches, 1)
        rec = EpochRecord(epoch, *map(float, mean), time.perf_counter() - t0)
        log.records.append(rec)
        if progress is not None:
            progress(rec)
        if tc.checkpoint and (epoch % tc.checkpoint_every == 0 or epoch == tc.epochs):
            save_params(params, tc.checkpoint)
        if tc.time_budget is not None and time.perf_counter() - started >= tc.time_budget:
            if tc.checkpoint:
                save_params(params, tc.checkpoint)
            break
    return params, log


def config_dict(tc: TrainConfig) -> dict:
    return asdict(tc)

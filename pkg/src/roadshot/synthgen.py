"""Procedural overhead scenes: jittered road lattices rendered over noise."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .geograph import RoadGraph, clean_edges, save_graph, segment_distance_field
from .tensornet import read_raw, write_raw

STRIDE = 32


@dataclass(frozen=True)
class SceneConfig:
    width: int = 256
    height: int = 256
    lattice_spacing: float = 64.0
    jitter: float = 6.0
    drop_prob: float = 0.3
    curve_amplitude: float = 0.0
    noise_level: float = 0.2
    road_width: float = 6.0
    seed: int = 0
    # first lattice line; None puts it at a quarter spacing from the border
    margin: float | None = None
    # remove degree-2 nodes where a road runs straight through a lattice point
    dissolve_straight: bool = True

    def validate(self, stride: int = STRIDE) -> "SceneConfig":
        if self.width <= 0 or self.height <= 0:
            raise ValueError("scene dimensions must be positive")
        if self.width % stride or self.height % stride:
            raise ValueError(f"scene {self.width}x{self.height} is not divisible by stride {stride}")
        if not 0.0 <= self.drop_prob < 1.0:
            raise ValueError("drop_prob must lie in [0, 1)")
        if self.lattice_spacing <= 2 * self.jitter:
            raise ValueError("lattice_spacing must exceed 2 * jitter")
        if not 0.0 <= self.noise_level <= 1.0:
            raise ValueError("noise_level must lie in [0, 1]")
        if self.road_width <= 0:
            raise ValueError("road_width must be positive")
        return self

    def with_seed(self, seed: int) -> "SceneConfig":
        return replace(self, seed=seed)

    def as_dict(self) -> dict:
        return asdict(self)


def _lattice_positions(extent: int, spacing: float, margin: float) -> np.ndarray:
    count = int((extent - 1 - margin) // spacing) + 1
    return margin + spacing * np.arange(max(count, 0))


def generate_road_graph(config: SceneConfig) -> RoadGraph:
    """Jittered grid lattice with random edge deletion.

    Isolated nodes are removed afterwards. With ``dissolve_straight`` the
    pass-through nodes of straight lattice runs are merged away so every
    remaining node is a visible turn, intersection or dead end.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    margin = config.lattice_spacing / 4 if config.margin is None else config.margin
    xs = _lattice_positions(config.width, config.lattice_spacing, margin)
    ys = _lattice_positions(config.height, config.lattice_spacing, margin)
    nx, ny = len(xs), len(ys)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    pts = pts + rng.uniform(-config.jitter, config.jitter, size=pts.shape)
    pts[:, 0] = np.clip(pts[:, 0], 0.0, config.width - 1.0)
    pts[:, 1] = np.clip(pts[:, 1], 0.0, config.height - 1.0)

    def idx(r: int, c: int) -> int:
        return r * nx + c

    lattice_edges = []
    for r in range(ny):
        for c in range(nx):
            if c + 1 < nx:
                lattice_edges.append((idx(r, c), idx(r, c + 1), 0))
            if r + 1 < ny:
                lattice_edges.append((idx(r, c), idx(r + 1, c), 1))
    keep = rng.random(len(lattice_edges)) >= config.drop_prob
    edges = [e for e, k in zip(lattice_edges, keep) if k]

    if config.dissolve_straight:
        edges = _dissolve_straight(edges, len(pts))

    used = sorted({i for e in edges for i in e[:2]})
    remap = {old: new for new, old in enumerate(used)}
    nodes = [tuple(pts[i]) for i in used]
    out_edges = [(remap[i], remap[j]) for i, j, _ in edges]

    if config.curve_amplitude > 0 and out_edges:
        nodes, out_edges = _bend_edges(nodes, out_edges, config, rng)
    return RoadGraph(nodes, clean_edges(out_edges), (config.width, config.height)).validate()


def _dissolve_straight(edges: list[tuple[int, int, int]], n: int) -> list[tuple[int, int, int]]:
    """Splice out degree-2 nodes whose two edges share a lattice axis."""
    edges = list(edges)
    changed = True
    while changed:
        changed = False
        incident: list[list[int]] = [[] for _ in range(n)]
        for k, (i, j, _) in enumerate(edges):
            incident[i].append(k)
            incident[j].append(k)
        for node in range(n):
            ks = incident[node]
            if len(ks) != 2:
                continue
            (a1, b1, ax1), (a2, b2, ax2) = edges[ks[0]], edges[ks[1]]
            if ax1 != ax2:
                continue
            u = a1 if b1 == node else b1
            v = a2 if b2 == node else b2
            if u == v:
                continue
            merged = (min(u, v), max(u, v), ax1)
            edges = [e for k, e in enumerate(edges) if k not in ks] + [merged]
            changed = True
            break
    edges.sort()
    return edges


def _bend_edges(nodes, edges, config: SceneConfig, rng):
    nodes = list(nodes)
    out = []
    for i, j in edges:
        (x0, y0), (x1, y1) = nodes[i], nodes[j]
        dx, dy = x1 - x0, y1 - y0
        length = float(np.hypot(dx, dy))
        shift = rng.uniform(-config.curve_amplitude, config.curve_amplitude)
        mx = (x0 + x1) / 2 - dy / length * shift
        my = (y0 + y1) / 2 + dx / length * shift
        mx = float(np.clip(mx, 0.0, config.width - 1.0))
        my = float(np.clip(my, 0.0, config.height - 1.0))
        nodes.append((mx, my))
        m = len(nodes) - 1
        out.extend([(i, m), (m, j)])
    return nodes, out


def _value_noise(rng: np.random.Generator, height: int, width: int, cell: int) -> np.ndarray:
    """Smooth noise in [0, 1]: random lattice values bilinearly upsampled."""
    gh, gw = height // cell + 2, width // cell + 2
    grid = rng.random((gh, gw))
    ys = np.arange(height) / cell
    xs = np.arange(width) / cell
    y0 = ys.astype(int)
    x0 = xs.astype(int)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    fy = fy * fy * (3 - 2 * fy)
    fx = fx * fx * (3 - 2 * fx)
    a = grid[y0][:, x0]
    b = grid[y0][:, x0 + 1]
    c = grid[y0 + 1][:, x0]
    d = grid[y0 + 1][:, x0 + 1]
    return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy


def render_background(config: SceneConfig) -> np.ndarray:
    rng = np.random.default_rng([config.seed, 1])
    h, w = config.height, config.width
    tint = rng.uniform(0.22, 0.42) + rng.uniform(-0.06, 0.06, size=3)
    img = np.broadcast_to(tint[:, None, None], (3, h, w)).copy()
    if config.noise_level > 0:
        texture = (
            0.6 * _value_noise(rng, h, w, 32)
            + 0.3 * _value_noise(rng, h, w, 8)
            + 0.1 * rng.random((h, w))
        ) - 0.5
        chroma = rng.uniform(0.7, 1.3, size=3)
        img += config.noise_level * 0.8 * texture[None] * chroma[:, None, None]
    return img


def road_coverage(graph: RoadGraph, config: SceneConfig) -> np.ndarray:
    """Anti-aliased stroke coverage in [0, 1]; 0.5 exactly at the stroke edge."""
    half = config.road_width / 2.0
    dist = segment_distance_field(graph, config.width, config.height, half + 1.0)
    return np.clip(half + 0.5 - dist, 0.0, 1.0)


def render_scene(graph: RoadGraph, config: SceneConfig) -> np.ndarray:
    """Render ``graph`` as bright strokes; returns a [3, H, W] array in [0, 1]."""
    config.validate()
    img = render_background(config)
    rng = np.random.default_rng([config.seed, 2])
    road = rng.uniform(0.8, 0.95) + rng.uniform(-0.03, 0.03, size=3)
    cov = road_coverage(graph, config)[None]
    img = img * (1.0 - cov) + road[:, None, None] * cov
    return np.clip(img, 0.0, 1.0)


def make_scene(config: SceneConfig) -> tuple[np.ndarray, RoadGraph]:
    graph = generate_road_graph(config)
    return render_scene(graph, config), graph


def scene_seed(base_seed: int, index: int) -> int:
    return int(base_seed) * 1_000_003 + index


def make_dataset(config: SceneConfig, count: int, out_dir, jobs: int = 1) -> list[Path]:
    """Write ``count`` pairs ``scene_NNNN.img`` / ``scene_NNNN.json`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [scene_seed(config.seed, i) for i in range(count)]

    def one(i: int) -> Path:
        image, graph = make_scene(config.with_seed(seeds[i]))
        stem = out / f"scene_{i:04d}"
        write_image(stem.with_suffix(".img"), image)
        save_graph(graph, stem.with_suffix(".json"))
        return stem

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(jobs) as pool:
            return list(pool.map(one, range(count)))
    return [one(i) for i in range(count)]


def write_image(path, image: np.ndarray) -> None:
    write_raw(path, image)


def read_image(path) -> np.ndarray:
    return read_raw(path)


def list_scenes(directory) -> list[Path]:
    """Scene stems (paths without suffix) that have both an image and a graph."""
    d = Path(directory)
    stems = sorted(p.with_suffix("") for p in d.glob("*.img"))
    return [s for s in stems if s.with_suffix(".json").exists()]

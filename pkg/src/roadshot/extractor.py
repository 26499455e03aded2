"""Model forward pass: conv stem, three heads, EdgeConv GNN and edge scorer."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensornet as tn
from .gridenc import all_pairs
from .tensornet import BatchNormState, Tensor

SUPPORTS = ("complete", "knn_static", "knn_dynamic")
SCORERS = ("bilinear", "mlp")


@dataclass(frozen=True)
class ModelConfig:
    stride: int = 32
    n_in: int = 128
    n_feat: int = 64
    gnn_layers: int = 3
    gnn_dim: int = 64
    support: str = "complete"
    k: int = 4
    scorer: str = "mlp"
    use_raw_features: bool = False
    embed_coords: bool = True
    stem_channels: tuple[int, ...] = (16, 32, 64, 128)

    def __post_init__(self) -> None:
        object.__setattr__(self, "stem_channels", tuple(int(c) for c in self.stem_channels))
        if self.stride != 2 ** (len(self.stem_channels) + 1):
            raise ValueError("stride must equal 2 ** (number of stem blocks)")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.gnn_layers < 1:
            raise ValueError("gnn_layers must be >= 1")
        if self.support not in SUPPORTS:
            raise ValueError(f"support must be one of {SUPPORTS}")
        if self.scorer not in SCORERS:
            raise ValueError(f"scorer must be one of {SCORERS}")

    @property
    def node_dim(self) -> int:
        base = self.n_in if self.use_raw_features else self.n_feat
        return base + (2 if self.embed_coords else 0)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["stem_channels"] = list(self.stem_channels)
        return d


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, Tensor]
    bn: dict[str, BatchNormState] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def trainable(self) -> dict[str, Tensor]:
        return dict(self.tensors)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def init_params(config: ModelConfig, seed: int = 0, junction_prior: float = 0.1) -> ModelParams:
    """He-initialized weights; the junction bias starts at the logit of ``junction_prior``."""
    rng = np.random.default_rng(seed)
    t: dict[str, np.ndarray] = {}
    chans = (3,) + config.stem_channels + (config.n_in,)
    for b in range(len(chans) - 1):
        t[f"stem.{b}.w"] = _he(rng, (chans[b + 1], chans[b], 3, 3), chans[b] * 9)
        t[f"stem.{b}.b"] = np.zeros(chans[b + 1])
    outs = {"junction": 1, "offset": 2, "node": config.n_feat}
    for branch, out_c in outs.items():
        cin = config.n_in
        for layer, cout in enumerate((config.n_feat, config.n_feat, out_c)):
            w = _he(rng, (cout, cin, 3, 3), cin * 9)
            if layer == 2 and branch != "node":
                w *= 0.1
            t[f"{branch}.{layer}.w"] = w
            t[f"{branch}.{layer}.b"] = np.zeros(cout)
            cin = cout
    t["junction.2.b"][:] = np.log(junction_prior / (1.0 - junction_prior))
    bn = {}
    d = config.node_dim
    for layer in range(config.gnn_layers):
        t[f"gnn.{layer}.theta"] = _he(rng, (2 * d, config.gnn_dim), 2 * d)
        t[f"gnn.{layer}.bias"] = np.zeros(config.gnn_dim)
        t[f"gnn.{layer}.gamma"] = np.ones(config.gnn_dim)
        t[f"gnn.{layer}.beta"] = np.zeros(config.gnn_dim)
        bn[f"gnn.{layer}"] = BatchNormState.fresh(config.gnn_dim)
        d = config.gnn_dim
    if config.scorer == "bilinear":
        t["score.w"] = rng.normal(0.0, 1.0 / d, size=(d, d))
        t["score.b"] = np.zeros(1)
    else:
        t["score.w1"] = _he(rng, (2 * d, d), 2 * d)
        t["score.b1"] = np.zeros(d)
        t["score.w2"] = rng.normal(0.0, np.sqrt(1.0 / d), size=(d, 1))
        t["score.b2"] = np.zeros(1)
    tensors = {k: tn.parameter(v, name=k) for k, v in t.items()}
    return ModelParams(config, tensors, bn)


# --------------------------------------------------------------------------
# checkpoints: magic, u32 manifest length, JSON manifest, raw <f8 payload

CKPT_MAGIC = b"ATCK"


def save_params(params: ModelParams, path) -> None:
    arrays: list[tuple[str, np.ndarray]] = [(k, v.data) for k, v in params.tensors.items()]
    for k, st in params.bn.items():
        arrays.append((f"{k}.running_mean", st.running_mean))
        arrays.append((f"{k}.running_var", st.running_var))
    manifest = {
        "config": params.config.as_dict(),
        "tensors": [[name, list(a.shape)] for name, a in arrays],
        "bn_momentum": {k: st.momentum for k, st in params.bn.items()},
    }
    blob = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<I", len(blob)) + blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_params(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<I", raw[4:8])
    manifest = json.loads(raw[8 : 8 + n].decode("utf-8"))
    config = ModelConfig(**manifest["config"])
    offset = 8 + n
    values: dict[str, np.ndarray] = {}
    for name, shape in manifest["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        values[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * count
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    bn = {}
    for k, mom in manifest["bn_momentum"].items():
        bn[k] = BatchNormState(values.pop(f"{k}.running_mean"), values.pop(f"{k}.running_var"), mom)
    tensors = {k: tn.parameter(v, name=k) for k, v in values.items()}
    return ModelParams(config, tensors, bn)


# --------------------------------------------------------------------------
# CNN parts


def stem_forward(images, params: ModelParams) -> Tensor:
    """Five stride-2 conv + ReLU blocks; [N, 3, H, W] → [N, n_in, H/32, W/32]."""
    x = tn.as_tensor(images)
    if x.data.ndim == 3:
        x = tn.reshape(x, (1,) + x.shape)
    h, w = x.shape[2], x.shape[3]
    stride = params.config.stride
    if h % stride or w % stride:
        raise ValueError(f"image {w}x{h} is not divisible by {stride}")
    b = 0
    while f"stem.{b}.w" in params.tensors:
        x = tn.relu(tn.conv2d(x, params[f"stem.{b}.w"], params[f"stem.{b}.b"], stride=2, pad=1))
        b += 1
    return x


def _branch(fmap: Tensor, params: ModelParams, name: str) -> Tensor:
    x = fmap
    for layer in range(3):
        x = tn.conv2d(x, params[f"{name}.{layer}.w"], params[f"{name}.{layer}.b"], stride=1, pad=1)
        if layer < 2:
            x = tn.relu(x)
    return x


@dataclass
class HeadOutputs:
    junction: Tensor  # [N, H, W] in (0, 1)
    offsets: Tensor  # [N, H, W, 2] in [-0.5, 0.5]
    node_features: Tensor  # [N, F, H, W]
    fmap: Tensor  # [N, n_in, H, W]


def heads_forward(fmap: Tensor, params: ModelParams) -> HeadOutputs:
    n, _, h, w = fmap.shape
    jlogit = _branch(fmap, params, "junction")
    junction = tn.sigmoid(tn.reshape(jlogit, (n, h, w)))
    off = tn.mul(tn.tanh(_branch(fmap, params, "offset")), 0.5)
    offsets = tn.transpose(off, (0, 2, 3, 1))
    nodef = _branch(fmap, params, "node")
    return HeadOutputs(junction, offsets, nodef, fmap)


# --------------------------------------------------------------------------
# node selection


@dataclass
class NodeBatch:
    """Detected nodes of one or more images, concatenated.

    ``image_index[k]`` names the image of node ``k``; ``cells`` are (row, col)
    and ``coords`` are (x, y) pixels in that image.
    """

    cells: np.ndarray
    coords: np.ndarray
    feats: Tensor
    image_index: np.ndarray

    def __len__(self) -> int:
        return len(self.cells)

    def slices(self, num_images: int) -> list[np.ndarray]:
        return [np.flatnonzero(self.image_index == i) for i in range(num_images)]


def decode_cells(offsets: np.ndarray, cells: np.ndarray, stride: int) -> np.ndarray:
    """Pixel coordinates of cells given [H, W, 2] offsets: (u + X + 0.5) * stride."""
    if len(cells) == 0:
        return np.zeros((0, 2))
    r, c = cells[:, 0], cells[:, 1]
    x = (offsets[r, c, 0] + c + 0.5) * stride
    y = (offsets[r, c, 1] + r + 0.5) * stride
    return np.stack([x, y], axis=1)


def gather_nodes(heads: HeadOutputs, cells_per_image: list[np.ndarray], config: ModelConfig) -> NodeBatch:
    """Build node embeddings for the given (row, col) cells of each image."""
    source = heads.fmap if config.use_raw_features else heads.node_features
    n, f, h, w = source.shape
    flat_feats = tn.reshape(tn.transpose(source, (0, 2, 3, 1)), (n * h * w, f))
    cells_all, coords_all, img_all, flat_idx = [], [], [], []
    for i, cells in enumerate(cells_per_image):
        cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
        cells_all.append(cells)
        coords_all.append(decode_cells(heads.offsets.data[i], cells, config.stride))
        img_all.append(np.full(len(cells), i, dtype=np.int64))
        flat_idx.append(i * h * w + cells[:, 0] * w + cells[:, 1])
    cells = np.concatenate(cells_all) if cells_all else np.zeros((0, 2), dtype=np.int64)
    coords = np.concatenate(coords_all) if coords_all else np.zeros((0, 2))
    image_index = np.concatenate(img_all) if img_all else np.zeros(0, dtype=np.int64)
    feats = tn.gather_rows(flat_feats, np.concatenate(flat_idx) if flat_idx else np.zeros(0, dtype=np.int64))
    if config.embed_coords:
        norm = coords / np.array([w * config.stride, h * config.stride], dtype=np.float64)
        feats = tn.concat([feats, Tensor(norm)], axis=1)
    return NodeBatch(cells, coords, feats, image_index)


def select_nodes(heads: HeadOutputs, j_thr: float, config: ModelConfig) -> NodeBatch:
    """One node per cell with junction-ness strictly above ``j_thr``."""
    cells = []
    for i in range(heads.junction.shape[0]):
        rows, cols = np.nonzero(heads.junction.data[i] > j_thr)
        cells.append(np.stack([rows, cols], axis=1))
    return gather_nodes(heads, cells, config)


# --------------------------------------------------------------------------
# support graphs


def knn_indices(feats: np.ndarray, k: int) -> np.ndarray:
    """For each row, the ``k`` nearest other rows by Euclidean distance.

    Ties resolve to the lower index. ``k`` is truncated to ``n - 1``.
    """
    n = len(feats)
    k = min(k, n - 1)
    if k <= 0:
        return np.zeros((n, 0), dtype=np.int64)
    # direct differences keep exact ties exact (the expanded form does not)
    diff = feats[:, None, :] - feats[None, :, :]
    d2 = (diff * diff).sum(axis=2)
    np.fill_diagonal(d2, np.inf)
    return np.argsort(d2, axis=1, kind="stable")[:, :k]


def build_support_graph(n: int, feats: np.ndarray | None, support: str, k: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Directed message edges (src, dst) for one image's ``n`` nodes.

    A lone node gets a self-edge so the layer still produces output.
    """
    if n == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    if n == 1:
        return np.zeros(1, dtype=np.int64), np.zeros(1, dtype=np.int64)
    if support == "complete":
        dst, src = np.nonzero(~np.eye(n, dtype=bool))
        return src.astype(np.int64), dst.astype(np.int64)
    nbrs = knn_indices(np.asarray(feats), k)
    dst = np.repeat(np.arange(n), nbrs.shape[1])
    return nbrs.ravel().astype(np.int64), dst.astype(np.int64)


def _batched_support(x: np.ndarray, groups: list[np.ndarray], support: str, k: int):
    srcs, dsts = [], []
    for idx in groups:
        if len(idx) == 0:
            continue
        s, d = build_support_graph(len(idx), x[idx], support, k)
        srcs.append(idx[s])
        dsts.append(idx[d])
    if not srcs:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(srcs), np.concatenate(dsts)


# --------------------------------------------------------------------------
# GNN and scorer


def edgeconv_layer(
    x: Tensor,
    src: np.ndarray,
    dst: np.ndarray,
    theta: Tensor,
    bias: Tensor | None,
    gamma: Tensor | None = None,
    beta: Tensor | None = None,
    bn_state: BatchNormState | None = None,
    mode: str = "train",
) -> Tensor:
    """x_i' = max_j ReLU(Θ [x_i ‖ x_j − x_i] + b), then batch normalization."""
    xi = tn.gather_rows(x, dst)
    xj = tn.gather_rows(x, src)
    msg = tn.relu(tn.linear(tn.concat([xi, tn.sub(xj, xi)], axis=1), theta, bias))
    out = tn.max_reduce_segments(msg, dst, x.shape[0])
    if gamma is None:
        return out
    return tn.batchnorm(out, gamma, beta, bn_state, mode)


def gnn_forward(batch: NodeBatch, params: ModelParams, num_images: int, mode: str = "train") -> Tensor:
    config = params.config
    x = batch.feats
    if len(batch) == 0:
        return Tensor(np.zeros((0, config.gnn_dim)))
    groups = batch.slices(num_images)
    static = None
    if config.support == "knn_static":
        static = _batched_support(x.data, groups, "knn_static", config.k)
    for layer in range(config.gnn_layers):
        if config.support == "complete":
            src, dst = _batched_support(x.data, groups, "complete", config.k)
        elif config.support == "knn_static":
            src, dst = static
        else:
            src, dst = _batched_support(x.data, groups, "knn_dynamic", config.k)
        x = edgeconv_layer(
            x,
            src,
            dst,
            params[f"gnn.{layer}.theta"],
            params[f"gnn.{layer}.bias"],
            params[f"gnn.{layer}.gamma"],
            params[f"gnn.{layer}.beta"],
            params.bn[f"gnn.{layer}"],
            mode,
        )
    return x


@dataclass
class EdgeScores:
    """Probabilities for unordered node pairs (indices into the node batch)."""

    pairs: np.ndarray
    probs: np.ndarray
    prob_tensor: Tensor | None = None  # differentiable probs when recorded

    def __len__(self) -> int:
        return len(self.pairs)


def score_logits(x: Tensor, pairs: np.ndarray, params: ModelParams) -> Tensor:
    """Symmetrized raw scores (g(x_a, x_b) + g(x_b, x_a)) / 2."""
    a, b = pairs[:, 0], pairs[:, 1]
    xa, xb = tn.gather_rows(x, a), tn.gather_rows(x, b)
    if params.config.scorer == "bilinear":
        w = params["score.w"]
        g_ab = tn.bilinear_form(xa, w, xb)
        g_ba = tn.bilinear_form(xb, w, xa)
        return tn.add(tn.mul(tn.add(g_ab, g_ba), 0.5), params["score.b"])

    def mlp(u, v):
        h = tn.relu(tn.linear(tn.concat([u, v], axis=1), params["score.w1"], params["score.b1"]))
        return tn.reshape(tn.linear(h, params["score.w2"], params["score.b2"]), (len(pairs),))

    return tn.mul(tn.add(mlp(xa, xb), mlp(xb, xa)), 0.5)


def score_edges(x: Tensor, pairs: np.ndarray, params: ModelParams) -> EdgeScores:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        return EdgeScores(pairs, np.zeros(0), None)
    logits = score_logits(x, pairs, params)
    probs = tn.sigmoid(logits)
    return EdgeScores(pairs, probs.data, probs)


def pairs_within_images(batch: NodeBatch, num_images: int) -> np.ndarray:
    out = []
    for idx in batch.slices(num_images):
        if len(idx) >= 2:
            out.append(idx[all_pairs(len(idx))])
    return np.concatenate(out) if out else np.zeros((0, 2), dtype=np.int64)


@dataclass
class ForwardResult:
    junction: np.ndarray  # [H, W]
    offsets: np.ndarray  # [H, W, 2]
    nodes: NodeBatch
    edges: EdgeScores


def model_forward(image, params: ModelParams, j_thr: float = 0.5) -> ForwardResult:
    """Inference on one [3, H, W] image with batch norm in eval mode."""
    with tn.no_grad():
        fmap = stem_forward(image, params)
        heads = heads_forward(fmap, params)
        batch = select_nodes(heads, j_thr, params.config)
        if len(batch) == 0:
            scores = EdgeScores(np.zeros((0, 2), dtype=np.int64), np.zeros(0))
        else:
            x = gnn_forward(batch, params, 1, mode="eval")
            scores = score_edges(x, pairs_within_images(batch, 1), params)
    return ForwardResult(heads.junction.data[0], heads.offsets.data[0], batch, scores)

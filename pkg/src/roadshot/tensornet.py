"""Dense float64 tensors with reverse-mode differentiation.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to per-parent gradients. ``backward``
orders the recorded graph into a :class:`Tape` and replays it in reverse.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return index_select(self, index)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


_local = threading.local()


def _recording() -> bool:
    return getattr(_local, "recording", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run ops on this thread without recording them for differentiation."""
    prev = _recording()
    _local.recording = False
    try:
        yield
    finally:
        _local.recording = prev


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _recording() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


# --------------------------------------------------------------------------
# tape and backward


@dataclass
class Tape:
    """Recorded operations in topological order (inputs before outputs)."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


class DetachedError(RuntimeError):
    pass


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE, copy=True)
    else:
        t.grad += g


def backward(loss: Tensor, tape: Tape | None = None) -> Tape:
    """Populate ``.grad`` of every ``requires_grad`` leaf reachable from ``loss``.

    Leaf gradients accumulate across calls; intermediate gradients are freed.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise DetachedError("loss is not connected to any tensor that requires grad")
    if tape is None:
        tape = Tape.record(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            _accumulate(node, g)
            continue
        parent_grads = node.backward_fn(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.data.shape:
                pg = _unbroadcast(pg, p.data.shape)
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    return tape


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# --------------------------------------------------------------------------
# elementwise and shape ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def sum_all(x: Tensor) -> Tensor:
    return _node(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape),))


def mean_all(x: Tensor) -> Tensor:
    n = max(x.size, 1)
    return _node(np.asarray(x.data.mean() if x.size else 0.0), (x,), lambda g: (np.broadcast_to(g / n, x.shape),))


def reshape(x: Tensor, shape) -> Tensor:
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=()) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.data.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def index_select(x: Tensor, index) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate gradient."""

    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return _node(x.data[index], (x,), bw)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Rows ``x[idx]`` of a 2-D tensor."""
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _node(x.data[idx], (x,), bw)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


# --------------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _node(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),))


# --------------------------------------------------------------------------
# layers


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` for ``x`` of shape [N, D_in] and ``weight`` [D_in, D_out]."""
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
        parents = (x, weight, bias)
    else:
        parents = (x, weight)

    def bw(g):
        grads = (g @ weight.data.T, x.data.T @ g)
        return grads + (g.sum(axis=0),) if bias is not None else grads

    return _node(out, parents, bw)


def bilinear_form(xi: Tensor, weight: Tensor, xj: Tensor) -> Tensor:
    """Row-wise ``xi[p]^T W xj[p]`` for paired rows, shape [P]."""
    xiw = xi.data @ weight.data
    out = np.einsum("pd,pd->p", xiw, xj.data)

    def bw(g):
        gcol = g[:, None]
        return (
            gcol * (xj.data @ weight.data.T),
            xi.data.T @ (gcol * xj.data),
            gcol * xiw,
        )

    return _node(out, (xi, weight, xj), bw)


def _conv_out(n: int, k: int, stride: int, pad: int) -> int:
    span = n + 2 * pad - k
    if span < 0:
        raise ValueError(f"conv2d: extent {n} is smaller than kernel {k} with pad {pad}")
    # floor, as in common frameworks: trailing rows that do not fit a full window are skipped
    return span // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation on [C, H, W] or batched [N, C, H, W] input.

    ``weight`` has shape [C_out, C_in, k, k] with odd ``k``.
    """
    batched = x.data.ndim == 4
    xd = x.data if batched else x.data[None]
    if xd.ndim != 4:
        raise ValueError(f"conv2d: expected [C,H,W] or [N,C,H,W] input, got {x.shape}")
    n, c, h, w = xd.shape
    co, ci, k, k2 = weight.shape
    if ci != c or k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d: weight {weight.shape} incompatible with input {x.shape}")
    if bias is not None and bias.shape != (co,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({co},)")
    ho, wo = _conv_out(h, k, stride, pad), _conv_out(w, k, stride, pad)
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    cols = np.empty((n, c, k, k, ho, wo), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    cols = cols.reshape(n, c * k * k, ho * wo)
    w2 = weight.data.reshape(co, c * k * k)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, co, ho, wo)
    if not batched:
        out = out[0]

    def bw(g):
        g = g.reshape(n, co, ho * wo)
        gw = np.einsum("nop,nkp->ok", g, cols, optimize=True).reshape(weight.shape)
        dcols = np.matmul(w2.T, g).reshape(n, c, k, k, ho, wo)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i, j]
        dx = dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp
        if not batched:
            dx = dx[0]
        grads = (dx, gw)
        return grads + (g.sum(axis=(0, 2)),) if bias is not None else grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, bw)


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.1) -> "BatchNormState":
        return cls(np.zeros(channels), np.ones(channels), momentum)


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState | None = None,
    mode: str = "train",
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over rows of a [N, C] tensor.

    In train mode with fewer than two rows there are no batch statistics, so
    only the affine part is applied. ``state`` is updated in train mode.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    xd = x.data
    n = xd.shape[0]
    if mode == "eval":
        if state is None:
            raise ValueError("eval-mode batchnorm needs running statistics")
        inv = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (xd - state.running_mean) * inv
        out = xhat * gamma.data + beta.data

        def bw_eval(g):
            return (g * gamma.data * inv, (g * xhat).sum(axis=0), g.sum(axis=0))

        return _node(out, (x, gamma, beta), bw_eval)

    if n < 2:
        out = xd * gamma.data + beta.data
        return _node(out, (x, gamma, beta), lambda g: (g * gamma.data, (g * xd).sum(axis=0), g.sum(axis=0)))

    mean = xd.mean(axis=0)
    var = xd.var(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean) * inv
    out = xhat * gamma.data + beta.data
    if state is not None:
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mean
        state.running_var = (1 - m) * state.running_var + m * xd.var(axis=0, ddof=1)

    def bw(g):
        dxhat = g * gamma.data
        dx = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        return (dx, (g * xhat).sum(axis=0), g.sum(axis=0))

    return _node(out, (x, gamma, beta), bw)


def segment_argmax(values: np.ndarray, segment_ids: np.ndarray, num_segments: int) -> np.ndarray:
    """Row index of the per-segment, per-column maximum; ties go to the lowest row."""
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    counts = np.bincount(segment_ids, minlength=num_segments)
    if len(counts) > num_segments or np.any(counts[:num_segments] == 0):
        empty = np.flatnonzero(counts[:num_segments] == 0)
        raise ValueError(f"max_reduce_segments: empty segment(s) {empty[:5].tolist()}")
    order = np.argsort(segment_ids, kind="stable")
    sv = values[order]
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    seg_max = np.maximum.reduceat(sv, starts, axis=0)
    sorted_ids = segment_ids[order]
    is_max = sv == seg_max[sorted_ids]
    pos = np.where(is_max, np.arange(len(sv))[:, None], len(sv))
    first = np.minimum.reduceat(pos, starts, axis=0)
    return order[first]


def max_reduce_segments(values: Tensor, segment_ids, num_segments: int) -> Tensor:
    """Per-segment maximum of rows of ``values`` [E, D] → [num_segments, D]."""
    arg = segment_argmax(values.data, segment_ids, num_segments)
    cols = np.arange(values.shape[1])[None, :]
    out = values.data[arg, cols]

    def bw(g):
        dv = np.zeros_like(values.data)
        dv[arg, cols] = g
        return (dv,)

    return _node(out, (values,), bw)


# --------------------------------------------------------------------------
# losses


def bce_loss(p: Tensor, y, clamp_eps: float = 1e-7) -> Tensor:
    """Mean binary cross-entropy with probabilities clamped to [eps, 1 - eps]."""
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=DTYPE)
    if p.size == 0:
        return _node(np.asarray(0.0), (p,), lambda g: (np.zeros_like(p.data),))
    inside = (p.data >= clamp_eps) & (p.data <= 1.0 - clamp_eps)
    ph = np.clip(p.data, clamp_eps, 1.0 - clamp_eps)
    n = p.size
    loss = -(y * np.log(ph) + (1.0 - y) * np.log(1.0 - ph)).mean()

    def bw(g):
        return (g * inside * (ph - y) / (ph * (1.0 - ph)) / n,)

    return _node(np.asarray(loss), (p,), bw)


def masked_mse(pred: Tensor, target, mask) -> Tensor:
    """Squared error summed over the last axis, averaged over masked cells.

    ``pred`` and ``target`` are [..., 2]; ``mask`` is [...] binary. An empty
    mask gives a zero loss with zero gradient.
    """
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=DTYPE)
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=DTYPE)
    if pred.shape != target.shape or pred.shape[:-1] != mask.shape:
        raise ValueError(f"masked_mse: shapes {pred.shape}, {target.shape}, {mask.shape} disagree")
    count = mask.sum()
    diff = (pred.data - target) * mask[..., None]
    if count == 0:
        return _node(np.asarray(0.0), (pred,), lambda g: (np.zeros_like(pred.data),))
    loss = (diff * diff).sum() / count
    return _node(np.asarray(loss), (pred,), lambda g: (g * 2.0 * diff / count,))


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray | None],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place. Missing gradients count as zero."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        if g is None:
            g = np.zeros_like(p.data)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        grads = {k: p.grad for k, p in self.params.items()}
        adam_step(self.params, grads, self.state, self.lr, self.betas[0], self.betas[1], self.eps)


# --------------------------------------------------------------------------
# raw tensor dumps (same layout as scene images)

MAGIC = b"ATLG"


def write_raw(path, array: np.ndarray) -> None:
    """Write a [C, H, W] array as a 16-byte header plus little-endian float32 planes."""
    array = np.asarray(array)
    if array.ndim == 2:
        array = array[None]
    c, h, w = array.shape
    header = MAGIC + np.array([w, h, c], dtype="<u4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def read_raw(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16 or header[:4] != MAGIC:
            raise ValueError(f"{path}: not an ATLG raw file")
        w, h, c = np.frombuffer(header[4:], dtype="<u4")
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != int(w) * int(h) * int(c):
        raise ValueError(f"{path}: payload has {data.size} values, header says {c}x{h}x{w}")
    return data.reshape(int(c), int(h), int(w)).astype(np.float64)

"""Small reverse-mode autodiff engine on numpy arrays.

Only the operations the network and the losses need are provided. Every op
records a closure mapping the output gradient to input gradients; ``backward``
walks the recorded graph in reverse topological order, visiting each node once.

Storage is float32 by default. Reductions (sum/mean/segment means) accumulate in
float64. Gradient checks run the whole graph in float64.
"""
from __future__ import annotations

import contextlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

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
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            return reshape(take(self, np.array([idx])), self.shape[1:])
        return take(self, np.asarray(idx))


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else DTYPE))


def _record(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad."""
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


# ---------------------------------------------------------------- elementwise


def add(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    out = x.data + y.data

    def bw(g):
        return _unbroadcast(g, x.shape), _unbroadcast(g, y.shape)

    return _record(out, (x, y), bw, "add")


def sub(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    out = x.data - y.data

    def bw(g):
        return _unbroadcast(g, x.shape), -_unbroadcast(g, y.shape)

    return _record(out, (x, y), bw, "sub")


def mul(x, y) -> Tensor:
    x = as_tensor(x)
    if not isinstance(y, Tensor):
        c = y
        out = (x.data * c).astype(x.dtype, copy=False)
        return _record(out, (x,), lambda g: (g * c,), "scale")
    out = x.data * y.data

    def bw(g):
        return _unbroadcast(g * y.data, x.shape), _unbroadcast(g * x.data, y.shape)

    return _record(out, (x, y), bw, "mul")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return _record(out, (x,), lambda g: (np.where(out > 0, g, 0),), "relu")


# ------------------------------------------------------------------ reductions


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = np.asarray(x.data.sum(axis=axis, dtype=np.float64), dtype=x.dtype)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape),)

    return _record(out, (x,), bw, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    out = np.asarray(x.data.mean(axis=axis, dtype=np.float64), dtype=x.dtype)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g / n, x.shape),)
        return (np.broadcast_to(np.expand_dims(g / n, axis), x.shape),)

    return _record(out, (x,), bw, "mean")


def max_all(x: Tensor) -> Tensor:
    """Maximum over every element; gradient goes to the first maximal entry."""
    if x.size == 0:
        raise ShapeError("max_all: empty tensor")
    flat = int(np.argmax(x.data))
    out = np.asarray(x.data.reshape(-1)[flat])

    def bw(g):
        gx = np.zeros(x.size, dtype=x.dtype)
        gx[flat] = g
        return (gx.reshape(x.shape),)

    return _record(out, (x,), bw, "max")


def segment_mean(x: Tensor, ids: np.ndarray, num: int) -> Tensor:
    """Row means grouped by integer ``ids`` -> shape (num, ...). Empty groups give 0."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != (x.shape[0],):
        raise ShapeError(f"segment_mean: ids shape {ids.shape} vs rows {x.shape[0]}")
    counts = np.bincount(ids, minlength=num).astype(np.float64)
    onehot = np.zeros((num, x.shape[0]), dtype=np.float64)
    onehot[ids, np.arange(x.shape[0])] = 1.0
    flat = x.data.reshape(x.shape[0], -1).astype(np.float64)
    sums = onehot @ flat
    denom = np.maximum(counts, 1.0)[:, None]
    out = (sums / denom).astype(x.dtype).reshape((num,) + x.shape[1:])

    def bw(g):
        gf = g.reshape(num, -1) / denom
        return (gf[ids].reshape(x.shape),)

    return _record(out, (x,), bw, "segment_mean")


# --------------------------------------------------------------- shape / index


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return _record(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} on axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, tensors, bw, "concat")


def take(x: Tensor, idx: np.ndarray) -> Tensor:
    """Rows ``x[idx]`` (repeats allowed)."""
    idx = np.asarray(idx, dtype=np.int64)
    out = x.data[idx]

    def bw(g):
        gx = np.zeros(x.shape, dtype=np.float64)
        np.add.at(gx, idx, g)
        return (gx,)

    return _record(out, (x,), bw, "take")


def pick(x: Tensor, idx: np.ndarray) -> Tensor:
    """``x[i, idx[i]]`` for a 2-D tensor."""
    idx = np.asarray(idx, dtype=np.int64)
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        raise ShapeError(f"pick: x {x.shape} with index {idx.shape}")
    rows = np.arange(x.shape[0])
    out = x.data[rows, idx]

    def bw(g):
        gx = np.zeros(x.shape, dtype=x.dtype)
        gx[rows, idx] = g
        return (gx,)

    return _record(out, (x,), bw, "pick")


# -------------------------------------------------------------- nn primitives


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``x`` (B, in), ``w`` (in, out), ``b`` (out,)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense: x {x.shape} incompatible with W {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"dense: bias {b.shape} for W {w.shape}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data

    def bw(g):
        gx = g @ w.data.T
        gw = x.data.T @ g
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0, dtype=np.float64)

    parents = (x, w) if b is None else (x, w, b)
    return _record(out, parents, bw, "dense")


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad="same") -> Tensor:
    """Cross-correlation in channels-last layout.

    ``x`` (B, L, C_in), ``w`` (C_out, C_in, K), ``b`` (C_out,) -> (B, L_out, C_out).
    ``pad="same"`` pads (K-1)//2 zeros on each side, preserving length at stride 1
    for odd K.
    """
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1]:
        raise ShapeError(f"conv1d: x {x.shape} incompatible with w {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv1d: bias {b.shape} for w {w.shape}")
    B, L, cin = x.shape
    cout, _, K = w.shape
    p = (K - 1) // 2 if pad == "same" else int(pad)
    lp = L + 2 * p
    if lp < K:
        raise ShapeError(f"conv1d: input length {L} (padded {lp}) shorter than kernel {K}")
    lout = (lp - K) // stride + 1
    xp = np.pad(x.data, ((0, 0), (p, p), (0, 0))) if p else x.data
    if stride == 1:
        out, bw = _conv1d_shift(xp, w.data, B, L, lp, lout, p, x.dtype)
    else:
        out, bw = _conv1d_im2col(xp, w.data, B, L, lp, lout, p, stride, x.dtype)
    if b is not None:
        out += b.data
        bw_nob = bw

        def bw(g):
            return (*bw_nob(g), g.reshape(-1, cout).sum(axis=0, dtype=np.float64))

    parents = (x, w) if b is None else (x, w, b)
    return _record(out, parents, bw, "conv1d")


def _conv1d_shift(xp, w, B, L, lp, lout, p, dtype):
    # The padded batch is treated as one long sequence; each tap is a matmul on a
    # shifted (contiguous) view, so no im2col copy is needed. Rows that straddle
    # two samples are computed and then discarded.
    cout, cin, K = w.shape
    flat = xp.reshape(B * lp, cin)
    m = B * lp - (K - 1)
    taps = [np.ascontiguousarray(w[:, :, k].T) for k in range(K)]
    y = np.zeros((B * lp, cout), dtype=np.result_type(xp, w))
    y[:m] = flat[0:m] @ taps[0]
    for k in range(1, K):
        y[:m] += flat[k:k + m] @ taps[k]
    out = np.ascontiguousarray(y.reshape(B, lp, cout)[:, :lout])

    def bw(g):
        gy = np.zeros((B, lp, cout), dtype=g.dtype)
        gy[:, :lout] = g
        gy = gy.reshape(B * lp, cout)[:m]
        gflat = np.zeros((B * lp, cin), dtype=dtype)
        gw = np.empty((cout, cin, K), dtype=g.dtype)
        for k in range(K):
            gflat[k:k + m] += gy @ taps[k].T
            gw[:, :, k] = (flat[k:k + m].T @ gy).T
        gx = gflat.reshape(B, lp, cin)[:, p:p + L]
        return gx, gw

    return out, bw


def _conv1d_im2col(xp, w, B, L, lp, lout, p, stride, dtype):
    cout, cin, K = w.shape
    span = stride * (lout - 1) + 1
    # column block k holds the input shifted by k taps
    cols = np.concatenate([xp[:, k:k + span:stride, :] for k in range(K)], axis=2).reshape(B * lout, K * cin)
    wmat = np.ascontiguousarray(w.transpose(2, 1, 0)).reshape(K * cin, cout)
    out = (cols @ wmat).reshape(B, lout, cout)

    def bw(g):
        g2 = g.reshape(B * lout, cout)
        gw = (cols.T @ g2).reshape(K, cin, cout).transpose(2, 1, 0)
        dcols = (g2 @ wmat.T).reshape(B, lout, K, cin)
        gxp = np.zeros((B, lp, cin), dtype=dtype)
        for k in range(K):
            gxp[:, k:k + span:stride, :] += dcols[:, :, k, :]
        return gxp[:, p:p + L, :], gw

    return out, bw


def maxpool1d(x: Tensor, k: int = 2, stride: int | None = None) -> Tensor:
    """Max-pool over the length axis of a (B, L, C) tensor; ties go to the first index."""
    stride = k if stride is None else stride
    if x.ndim != 3:
        raise ShapeError(f"maxpool1d: expected (B, L, C), got {x.shape}")
    L = x.shape[1]
    if L < k:
        raise ShapeError(f"maxpool1d: length {L} shorter than window {k}")
    lout = (L - k) // stride + 1
    span = stride * (lout - 1) + 1
    out = x.data[:, 0:span:stride, :].copy()
    arg = np.zeros(out.shape, dtype=np.int8)
    for j in range(1, k):
        cand = x.data[:, j:j + span:stride, :]
        better = cand > out
        out = np.where(better, cand, out)
        arg[better] = j

    def bw(g):
        gx = np.zeros(x.shape, dtype=x.dtype)
        for j in range(k):
            gx[:, j:j + span:stride, :] += np.where(arg == j, g, 0)
        return (gx,)

    return _record(out, (x,), bw, "maxpool1d")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _record(s, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def bw(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _record(out, (x,), bw, "log_softmax")


def euclidean(x, y) -> Tensor:
    """L2 distance along the last axis; ``y`` may broadcast against ``x``.

    At zero distance the (sub)gradient is taken as 0.
    """
    x, y = as_tensor(x), as_tensor(y)
    try:
        diff = x.data - y.data
    except ValueError as exc:
        raise ShapeError(f"euclidean: shapes {x.shape} and {y.shape}") from exc
    d = np.sqrt(np.square(diff, dtype=np.float64).sum(axis=-1)).astype(diff.dtype)

    def bw(g):
        safe = np.where(d > 0, d, 1)
        unit = np.where((d > 0)[..., None], diff / safe[..., None], 0)
        gd = g[..., None] * unit
        return _unbroadcast(gd, x.shape), -_unbroadcast(gd, y.shape)

    return _record(d, (x, y), bw, "euclidean")


# ------------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    lr: float = 0.001
    weight_decay: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState) -> None:
    """One Adam update with coupled L2 weight decay (g <- g + wd * theta)."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if m.shape != p.shape:
            raise ShapeError(f"adam: moment shape {m.shape} != param {p.shape} for {name}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        upd = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - state.lr * upd).astype(p.dtype, copy=False)


class Adam:
    """Thin owner of named parameters plus an :class:`AdamState`."""

    def __init__(self, params: Mapping[str, Tensor], **hyper):
        self.params = dict(params)
        self.state = AdamState(**hyper)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        adam_step(self.params, grads, self.state)


# -------------------------------------------------------------- gradient check


def numeric_grad(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-3) -> list[np.ndarray]:
    """Central differences of the scalar ``fn`` evaluated in float64."""
    xs = [np.array(a, dtype=np.float64) for a in arrays]
    out = []
    with no_grad():
        for a in xs:
            g = np.zeros_like(a)
            flat, gflat = a.reshape(-1), g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(fn(*[Tensor(x) for x in xs]).data)
                flat[i] = orig - h
                fm = float(fn(*[Tensor(x) for x in xs]).data)
                flat[i] = orig
                gflat[i] = (fp - fm) / (2 * h)
            out.append(g)
    return out


def analytic_grad(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
    ts = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    loss = fn(*ts)
    backward(loss)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def gradcheck(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-3) -> float:
    """Worst relative error between analytic and finite-difference gradients."""
    ana = analytic_grad(fn, arrays)
    num = numeric_grad(fn, arrays, h)
    return max(relative_error(a, n) for a, n in zip(ana, num))


# ------------------------------------------------------------------ checkpoint

CHECKPOINT_VERSION = 1


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path, params: Mapping[str, np.ndarray | Tensor], meta: dict | None = None) -> None:
    """Binary checkpoint: JSON header line, then per parameter a JSON line + raw <f4 data.

    Parameters are written in the mapping's iteration order.
    """
    header = {"format_version": CHECKPOINT_VERSION, "param_count": len(params)}
    if meta is not None:
        header["meta"] = meta
    chunks = [_dumps(header), b"\n"]
    for name, arr in params.items():
        arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr)
        chunks += [_dumps({"name": name, "shape": list(arr.shape)}), b"\n"]
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict | None]:
    raw = Path(path).read_bytes()
    pos = 0

    def line() -> dict:
        nonlocal pos
        end = raw.find(b"\n", pos)
        if end < 0:
            raise CheckpointError(f"{path}: truncated header at byte {pos}")
        obj = json.loads(raw[pos:end])
        pos = end + 1
        return obj

    header = line()
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format_version {header.get('format_version')}")
    params: dict[str, np.ndarray] = {}
    for _ in range(header["param_count"]):
        entry = line()
        shape = tuple(entry["shape"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated data for {entry['name']}")
        params[entry["name"]] = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).astype(np.float32)
        pos += nbytes
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return params, header.get("meta")


def parameters_checksum(params: Iterable[np.ndarray | Tensor]) -> int:
    import zlib

    crc = 0
    for p in params:
        arr = p.data if isinstance(p, Tensor) else p
        crc = zlib.crc32(np.ascontiguousarray(arr).tobytes(), crc)
    return crc


__all__ = [
    "Adam", "AdamState", "Tensor", "ShapeError", "CheckpointError", "adam_step", "add", "analytic_grad",
    "as_tensor", "backward", "concat", "conv1d", "dense", "euclidean", "gradcheck", "load_checkpoint",
    "log_softmax", "max_all", "maxpool1d", "mean", "mul", "no_grad", "numeric_grad", "parameters_checksum",
    "pick", "relative_error", "relu", "reshape", "save_checkpoint", "segment_mean", "softmax", "sub",
    "sum", "take",
]

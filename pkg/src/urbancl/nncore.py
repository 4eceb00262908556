"""Dense float64 tensors with tape-based reverse-mode differentiation.

Ops are plain functions. While a :class:`Tape` is active (``with Tape() as
tape:``) every op whose inputs need gradients is recorded; outside a tape
ops just compute. ``backward(tape, loss)`` then accumulates exact adjoints
into every leaf tensor that requires grad (normally :class:`Parameter`).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import LoadError, ShapeError

DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape})"

    # operator sugar, all routed through the recorded primitives
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    @property
    def T(self):
        return transpose(self)


class Parameter(Tensor):
    """A learnable leaf tensor with a stable string id."""

    __slots__ = ("id",)

    def __init__(self, pid: str, data):
        super().__init__(data, requires_grad=True, name=pid)
        self.id = pid
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.id!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "inputs", "backward", "op")

    def __init__(self, out, inputs, backward, op):
        self.out = out
        self.inputs = inputs
        self.backward = backward
        self.op = op


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of primitive applications."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._outputs: set[int] = set()

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def _add(self, node: _Node) -> None:
        self.nodes.append(node)
        self._outputs.add(id(node.out))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._outputs


def _finite(op: str, arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{op} produced non-finite values")
    return arr


def _record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = _finite(op, out_data)
    out.grad = None
    out.name = None
    out.requires_grad = False
    if _ACTIVE and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE[-1]._add(_Node(out, tuple(inputs), backward, op))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every grad-requiring leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.produced(loss):
        raise ValueError("loss was not produced on this tape")
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.out), None)
        if g is None:
            continue
        grads = node.backward(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if tape.produced(inp):
                key = id(inp)
                if key in pending:
                    pending[key] = pending[key] + gi
                else:
                    pending[key] = gi
            else:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi


def _shape_error(op: str, *shapes) -> ShapeError:
    return ShapeError(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _shape_error("add", a.shape, b.shape) from None
    return _record("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _shape_error("sub", a.shape, b.shape) from None
    return _record("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    """Elementwise product (trailing-axis broadcasting allowed)."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _shape_error("elementwise_mul", a.shape, b.shape) from None
    ad, bd = a.data, b.data
    return _record(
        "elementwise_mul",
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)),
    )


elementwise_mul = mul


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        if bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        return g @ bd.T, ad.T @ g

    return _record("matmul", ad @ bd, (a, b), bw)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise _shape_error("transpose", a.shape)
    return _record("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise _shape_error("reshape", a.shape, tuple(shape)) from None
    return _record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _record("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def total(a) -> Tensor:
    """Sum of all entries (scalar)."""
    a = as_tensor(a)
    return _record("sum", np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    if n == 0:
        raise _shape_error("mean", a.shape)
    return _record("mean", np.array(a.data.sum() / n), (a,), lambda g: (np.full(a.shape, g / n),))


def inner_product(a, b) -> Tensor:
    """Dot product of vectors, or row-wise dot products of two matrices."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.ndim not in (1, 2):
        raise _shape_error("inner_product", a.shape, b.shape)
    ad, bd = a.data, b.data
    if a.ndim == 1:
        return _record("inner_product", np.array(ad @ bd), (a, b), lambda g: (g * bd, g * ad))
    return _record(
        "inner_product",
        np.einsum("ij,ij->i", ad, bd),
        (a, b),
        lambda g: (g[:, None] * bd, g[:, None] * ad),
    )


def log_sum_exp(a, axis: int = -1, mask=None) -> Tensor:
    """Stable log(sum(exp(a))) along ``axis``; ``mask`` (bool) keeps only True entries."""
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise _shape_error("log_sum_exp", x.shape, mask.shape)
        if not mask.any(axis=axis).all():
            raise ValueError("log_sum_exp: a reduction slice has no unmasked entries")
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    soft = e / s

    def bw(g):
        return (np.expand_dims(g, axis) * soft,)

    return _record("log_sum_exp", out, (a,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise _shape_error("concat", *[t.shape for t in ts]) from None
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _record("concat", out, ts, lambda g: tuple(np.split(g, splits, axis=axis)))


def dropout(a, rate: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: scales kept units by 1/(1-rate) so evaluation is the identity."""
    a = as_tensor(a)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _record("dropout", a.data * keep, (a,), lambda g: (g * keep,))


def index_rows(a, idx) -> Tensor:
    """Gather rows ``a[idx]``; the adjoint scatters back with accumulation."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1 or (idx.size and (idx.min() < 0 or idx.max() >= a.shape[0])):
        raise _shape_error("index_rows", a.shape, idx.shape)

    def bw(g):
        if g.ndim == 2:
            # sparse scatter is much faster than np.add.at for long index lists
            scatter = sp.csr_matrix((np.ones(idx.size), (idx, np.arange(idx.size))), shape=(a.shape[0], idx.size))
            return (np.asarray(scatter @ g),)
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _record("index_rows", a.data[idx], (a,), bw)


def spmm(matrix: sp.spmatrix, a) -> Tensor:
    """Constant sparse matrix times a dense tensor (the matrix is not differentiated)."""
    a = as_tensor(a)
    if matrix.shape[1] != a.shape[0]:
        raise _shape_error("spmm", matrix.shape, a.shape)
    mt = matrix.T.tocsr()
    return _record("spmm", np.asarray(matrix @ a.data), (a,), lambda g: (np.asarray(mt @ g),))


def mean_over_set(a, set_size: int) -> Tensor:
    """Average consecutive groups of ``set_size`` rows: (G*n, d) -> (G, d).

    Members are summed in row order, so results are reproducible bit for bit
    when the caller fixes the order of rows within a group.
    """
    a = as_tensor(a)
    if set_size < 1 or a.ndim != 2 or a.shape[0] % set_size:
        raise _shape_error("mean_over_set", a.shape, (set_size,))
    groups = a.shape[0] // set_size
    blocks = a.data.reshape(groups, set_size, a.shape[1])
    acc = blocks[:, 0, :].copy()
    for i in range(1, set_size):
        acc = acc + blocks[:, i, :]
    out = acc / set_size

    def bw(g):
        return (np.repeat(g / set_size, set_size, axis=0),)

    return _record("mean_over_set", out, (a,), bw)


def mean_pool_full(a) -> Tensor:
    """Average over all spatial positions: (N, C, H, W) -> (N, C)."""
    a = as_tensor(a)
    if a.ndim != 4:
        raise _shape_error("mean_pool_full", a.shape)
    n, c, h, w = a.shape
    return _record(
        "mean_pool_full",
        a.data.mean(axis=(2, 3)),
        (a,),
        lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), a.shape).copy(),),
    )


def conv2d(x, w, stride: int = 1) -> Tensor:
    """Valid (unpadded) cross-correlation. x: (N, C, H, W), w: (O, C, k, k)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise _shape_error("conv2d", x.shape, w.shape)
    n, c, h, wd = x.shape
    k = w.shape[2]
    if stride < 1 or h < k or wd < k:
        raise _shape_error("conv2d", x.shape, w.shape)
    ho = (h - k) // stride + 1
    wo = (wd - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: (N, C, Ho, Wo, k, k)
    out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    wdat = w.data

    def bw(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        gx = np.zeros_like(x.data)
        for i in range(k):
            for j in range(k):
                contrib = np.tensordot(g, wdat[:, :, i, j], axes=([1], [0]))  # (N, Ho, Wo, C)
                gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += contrib.transpose(0, 3, 1, 2)
        return gx, gw

    return _record("conv2d", np.ascontiguousarray(out), (x, w), bw)


def mse(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise _shape_error("mse", pred.shape, target.shape)
    diff = pred.data - target.data
    n = diff.size
    return _record("mse", np.array((diff * diff).sum() / n), (pred, target), lambda g: (2 * g * diff / n, -2 * g * diff / n))


# ---------------------------------------------------------------- gradients


def finite_difference_check(f: Callable[[], Tensor], params: Sequence[Parameter], h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` must rebuild the scalar loss from the current parameter values and be
    deterministic (disable dropout).
    """
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    backward(tape, loss)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        ana = p.grad.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f().item()
            flat[i] = old - h
            fm = f().item()
            flat[i] = old
            num = (fp - fm) / (2 * h)
            worst = max(worst, abs(ana[i] - num) / max(1e-8, abs(num)))
    return worst


# ---------------------------------------------------------------- optimizer


class Adam:
    """Bias-corrected Adam with per-parameter moment state."""

    def __init__(self, params: Iterable[Parameter], lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if not lr > 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {p.id: np.zeros_like(p.data) for p in self.params}
        self.v = {p.id: np.zeros_like(p.data) for p in self.params}

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        adam_step(self.params, self.m, self.v, self.lr, self.t, self.beta1, self.beta2, self.eps)


def adam_step(params, m: dict, v: dict, lr: float, t: int, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """One in-place Adam update of ``params`` at step ``t`` (1-based)."""
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if t < 1:
        raise ValueError(f"step counter must be >= 1, got {t}")
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for p in params:
        g = p.grad
        mk = m.setdefault(p.id, np.zeros_like(p.data))
        vk = v.setdefault(p.id, np.zeros_like(p.data))
        mk *= beta1
        mk += (1.0 - beta1) * g
        vk *= beta2
        vk += (1.0 - beta2) * (g * g)
        p.data -= lr * (mk / bc1) / (np.sqrt(vk / bc2) + eps)


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"KCPT"


def save_checkpoint(path, params: Sequence[Parameter], step: int = 0, optimizer: Adam | None = None, extra: dict | None = None) -> None:
    """JSON header (ids, shapes, step, moments flag) followed by little-endian float64 payload.

    Layout: ``KCPT`` | uint64 LE header length | header JSON | values | [m | v].
    """
    entries = [{"id": p.id, "shape": list(p.shape)} for p in params]
    header = {
        "params": entries,
        "step": int(step),
        "has_moments": optimizer is not None,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [p.data.astype("<f8").tobytes() for p in params]
    if optimizer is not None:
        chunks += [optimizer.m[p.id].astype("<f8").tobytes() for p in params]
        chunks += [optimizer.v[p.id].astype("<f8").tobytes() for p in params]
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)


def load_checkpoint(path) -> dict:
    """Returns ``{"values": {id: array}, "step": int, "m": {...}|None, "v": {...}|None, "extra": dict}``."""
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise LoadError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    payload = np.frombuffer(raw, dtype="<f8", offset=12 + hlen)
    offset = 0

    def take(shape):
        nonlocal offset
        n = int(np.prod(shape)) if shape else 1
        if offset + n > payload.size:
            raise LoadError(f"{path}: truncated payload")
        arr = payload[offset : offset + n].astype(DTYPE).reshape(shape)
        offset += n
        return arr

    entries = header["params"]
    values = {e["id"]: take(e["shape"]) for e in entries}
    m = v = None
    if header["has_moments"]:
        m = {e["id"]: take(e["shape"]) for e in entries}
        v = {e["id"]: take(e["shape"]) for e in entries}
    return {"values": values, "step": header["step"], "m": m, "v": v, "extra": header.get("extra", {})}


def assign(params: Sequence[Parameter], values: dict) -> None:
    missing = [p.id for p in params if p.id not in values]
    if missing:
        raise LoadError(f"checkpoint lacks parameters: {', '.join(missing)}")
    for p in params:
        if tuple(values[p.id].shape) != p.shape:
            raise LoadError(f"shape mismatch for {p.id}: {values[p.id].shape} vs {p.shape}")
        p.data = values[p.id].copy()

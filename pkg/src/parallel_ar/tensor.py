"""Dense float64 arrays with tape-based reverse-mode differentiation.

Only the operations needed by the policy network are provided. Every op
accepts arbitrary leading batch dimensions and follows numpy broadcasting;
gradients are summed back to the operand shapes.

Usage::

    with Tape() as tape:
        y = (x @ w).tanh().sum()
    tape.backward(y)
    tape.gradient(w)
"""
from __future__ import annotations

import io
import json
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

MASK_FILL = -1e30
CHECKPOINT_VERSION = 1

_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "node_id", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self._parents: tuple = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return getitem(self, idx)

    def tanh(self): return tanh(self)
    def relu(self): return relu(self)
    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)
    def transpose(self, *axes): return transpose(self, axes if axes else None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in creation order, which is a topological order, so the
    backward pass is a single reversed sweep.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._grads: dict[int, np.ndarray] = {}
        self._holders: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def record(self, out: Tensor, parents: Sequence[Tensor], backward: Callable) -> None:
        out.requires_grad = True
        out.node_id = len(self.nodes)
        out._parents = tuple(parents)
        out._backward = backward
        self.nodes.append(out)

    def _accumulate(self, t: Tensor, g: np.ndarray) -> None:
        key = id(t)
        if key in self._grads:
            self._grads[key] = self._grads[key] + g
        else:
            self._grads[key] = g
            self._holders[key] = t

    def backward(self, root: Tensor, retain: bool = False) -> None:
        """Accumulate d(root)/d(x) for every tensor x that feeds ``root``.

        Gradients of recorded intermediates are released as the sweep passes
        them unless ``retain`` is set; leaf gradients always survive.
        """
        if root.data.size != 1:
            raise ValueError("backward root must be a scalar")
        if root.node_id is None or root.node_id >= len(self.nodes) or self.nodes[root.node_id] is not root:
            raise ValueError("root was not recorded on this tape")
        self._grads = {}
        self._holders = {}
        self._accumulate(root, np.ones_like(root.data))
        for node in reversed(self.nodes[: root.node_id + 1]):
            g = self._grads.get(id(node)) if retain else self._grads.pop(id(node), None)
            if g is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is not None and isinstance(parent, Tensor) and parent.requires_grad:
                    self._accumulate(parent, pg)

    def gradient(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        return np.zeros_like(t.data) if g is None else g


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite values produced by {op}")
    return arr


def _make(data: np.ndarray, parents: Sequence, backward: Callable, op: str) -> Tensor:
    out = Tensor(_finite(data, op))
    tape = _active_tape()
    if tape is not None and any(isinstance(p, Tensor) and p.requires_grad for p in parents):
        tape.record(out, parents, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a_, b_ = _data(a), _data(b)
    sa, sb = a_.shape, b_.shape
    return _make(a_ + b_, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a_, b_ = _data(a), _data(b)
    sa, sb = a_.shape, b_.shape
    return _make(a_ - b_, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a_, b_ = _data(a), _data(b)

    def backward(g):
        return _unbroadcast(g * b_, a_.shape), _unbroadcast(g * a_, b_.shape)

    return _make(a_ * b_, (a, b), backward, "mul")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


def scaled_tanh_clip(x: Tensor, beta: float) -> Tensor:
    """``beta * tanh(x)``; the output magnitude stays strictly below ``beta``."""
    # tanh saturates to exactly 1.0 in float64, so keep one ulp of headroom
    top = np.nextafter(1.0, 0.0)
    y = np.clip(np.tanh(x.data), -top, top)
    return _make(beta * y, (x,), lambda g: (g * beta * (1.0 - y * y),), "scaled_tanh_clip")


# ---------------------------------------------------------------- reductions

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.data.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.data.shape
    count = x.data.size if axis is None else np.prod([shape[a] for a in np.atleast_1d(axis)])

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _make(x.data.mean(axis=axis, keepdims=keepdims), (x,), backward, "mean")


# ---------------------------------------------------------------- shape ops

def matmul(a, b) -> Tensor:
    """Batched matrix product with broadcasting over leading dimensions."""
    a_, b_ = _data(a), _data(b)
    if a_.shape[-1] != b_.shape[-2 if b_.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {a_.shape} @ {b_.shape}")
    if b_.ndim == 2 and a_.ndim > 2:
        # flatten leading dims so a single GEMM does the work
        lead = a_.shape[:-1]
        a2 = a_.reshape(-1, a_.shape[-1])
        out = (a2 @ b_).reshape(*lead, b_.shape[-1])

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ b_.T).reshape(a_.shape), a2.T @ g2

        return _make(out, (a, b), backward, "matmul")

    def backward(g):
        ga = g @ np.swapaxes(b_, -1, -2)
        gb = np.swapaxes(a_, -1, -2) @ g
        return _unbroadcast(ga, a_.shape), _unbroadcast(gb, b_.shape)

    return _make(a_ @ b_, (a, b), backward, "matmul")


def reshape(x: Tensor, shape) -> Tensor:
    orig = x.data.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    return _make(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),), "swapaxes")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    arrays = [_data(t) for t in tensors]
    sizes = [a.shape[axis] for a in arrays]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate(arrays, axis=axis), tuple(tensors), backward, "concat")


def getitem(x: Tensor, idx) -> Tensor:
    shape = x.data.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(x.data[idx], (x,), backward, "getitem")


def take_along_last(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select ``x[..., idx[...]]`` along the last axis; ``idx`` lacks that axis."""
    idx = np.asarray(idx)[..., None]
    shape = x.data.shape

    def backward(g):
        out = np.zeros(shape)
        np.put_along_axis(out, idx, g[..., None], axis=-1)
        return (out,)

    return _make(np.take_along_axis(x.data, idx, axis=-1)[..., 0], (x,), backward, "take_along_last")


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """``x[index]`` along the first axis; the backward scatter-adds repeated rows."""
    index = np.asarray(index, dtype=np.int64)
    shape = x.data.shape

    def backward(g):
        out = np.zeros(shape)
        if len(index) and (np.diff(index) >= 0).all():
            # sorted index (the usual repeat pattern): one segmented sum
            starts = np.flatnonzero(np.r_[True, index[1:] != index[:-1]])
            out[index[starts]] = np.add.reduceat(g, starts, axis=0)
        else:
            np.add.at(out, index, g)
        return (out,)

    return _make(x.data[index], (x,), backward, "gather_rows")


def add_projection(base, x: np.ndarray, w: Tensor) -> Tensor:
    """``base + x @ w`` for a constant feature array ``x`` [..., k] and weight [k, d]."""
    x = np.asarray(x, dtype=np.float64)
    b_ = _data(base)
    x2 = x.reshape(-1, x.shape[-1])
    out = b_ + (x2 @ w.data).reshape(*x.shape[:-1], w.shape[-1])
    sb = b_.shape

    def backward(g):
        return _unbroadcast(g, sb), x2.T @ g.reshape(-1, g.shape[-1])

    return _make(out, (base, w), backward, "add_projection")


def attention_core(q: Tensor, k: Tensor, v: Tensor, heads: int, mask: np.ndarray | None = None) -> Tensor:
    """Multi-head scaled dot-product attention on already projected inputs.

    ``q`` [R, A, d], ``k`` and ``v`` [R, B, d]; ``mask`` [R, A, B]. Returns the
    merged heads [R, A, d] without an output projection. Only the attention
    weights are kept for the backward pass.
    """
    R, A, d = q.shape
    B = k.shape[1]
    if d % heads:
        raise ValueError(f"model width {d} not divisible by {heads} heads")
    dh = d // heads
    scale = 1.0 / np.sqrt(dh)
    q4 = q.data.reshape(R, A, heads, dh).transpose(0, 2, 1, 3)
    k4 = k.data.reshape(R, B, heads, dh).transpose(0, 2, 1, 3)
    v4 = v.data.reshape(R, B, heads, dh).transpose(0, 2, 1, 3)
    scores = (q4 @ k4.transpose(0, 1, 3, 2)) * scale
    if mask is not None:
        m = np.asarray(mask, dtype=bool)[:, None]
        _check_mask(np.broadcast_to(m, scores.shape))
        scores = np.where(m, scores, MASK_FILL)
    scores -= scores.max(axis=-1, keepdims=True)
    attn = np.exp(scores)
    attn /= attn.sum(axis=-1, keepdims=True)
    if mask is not None:
        attn = np.where(m, attn, 0.0)
    out = (attn @ v4).transpose(0, 2, 1, 3).reshape(R, A, d)

    def backward(g):
        g4 = g.reshape(R, A, heads, dh).transpose(0, 2, 1, 3)
        gv = attn.transpose(0, 1, 3, 2) @ g4
        ga = g4 @ v4.transpose(0, 1, 3, 2)
        gs = attn * (ga - (ga * attn).sum(axis=-1, keepdims=True)) * scale
        gq = gs @ k4
        gk = gs.transpose(0, 1, 3, 2) @ q4
        merge = lambda t, n: t.transpose(0, 2, 1, 3).reshape(R, n, d)
        return merge(gq, A), merge(gk, B), merge(gv, B)

    return _make(out, (q, k, v), backward, "attention_core")


def broadcast_to(x: Tensor, shape) -> Tensor:
    orig = x.data.shape
    return _make(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_unbroadcast(g, orig),), "broadcast_to")


# ---------------------------------------------------------------- softmax family

def _check_mask(mask: np.ndarray) -> None:
    if not mask.any(axis=-1).all():
        raise ValueError("masked softmax: a row has no feasible entry")


def masked_softmax(logits: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` marks feasible entries with True.

    Infeasible entries get an additive -1e30 before normalisation and are
    reset to exactly zero afterwards.
    """
    x = logits.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        _check_mask(mask)
        x = np.where(mask, x, MASK_FILL)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    if mask is not None:
        p = np.where(mask, p, 0.0)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (logits,), backward, "masked_softmax")


def masked_log_softmax(logits: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Log of :func:`masked_softmax`; infeasible entries hold -1e30."""
    x = logits.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        _check_mask(mask)
        x = np.where(mask, x, MASK_FILL)
    z = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    if mask is not None:
        out = np.where(mask, out, MASK_FILL)
        p = np.where(mask, p, 0.0)

    def backward(g):
        if mask is not None:
            g = np.where(mask, g, 0.0)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(out, (logits,), backward, "masked_log_softmax")


# ---------------------------------------------------------------- normalisation

def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-8) -> Tensor:
    """``x / sqrt(mean(x**2) + eps) * gain`` over the last axis."""
    xd, gd = x.data, gain.data
    d = xd.shape[-1]
    r = np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    xhat = xd / r

    def backward(g):
        gg = _unbroadcast(g * xhat, gd.shape)
        gy = g * gd
        gx = gy / r - xhat * (gy * xhat).sum(axis=-1, keepdims=True) / (d * r)
        return gx, gg

    return _make(xhat * gd, (x, gain), backward, "rms_norm")


def instance_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each feature over the token axis (-2) of every instance."""
    xd = x.data
    mu = xd.mean(axis=-2, keepdims=True)
    xc = xd - mu
    std = np.sqrt((xc * xc).mean(axis=-2, keepdims=True) + eps)
    xhat = xc / std

    def backward(g):
        gy = g * gain.data
        gx = (gy - gy.mean(axis=-2, keepdims=True)
              - xhat * (gy * xhat).mean(axis=-2, keepdims=True)) / std
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _make(xhat * gain.data + bias.data, (x, gain, bias), backward, "instance_norm")


# ---------------------------------------------------------------- attention

def multi_head_attention(q, k, v, w_q, w_k, w_v, w_o, heads: int,
                         mask: np.ndarray | None = None, bias=None) -> Tensor:
    """Scaled dot-product attention with ``heads`` heads and output projection.

    ``q`` is [..., A, d], ``k`` and ``v`` are [..., B, d]. ``mask`` ([..., A, B],
    True = may attend) is applied before the softmax. ``bias`` is an optional
    additive score term broadcastable to [..., heads, A, B].
    """
    d = w_q.shape[-1]
    if d % heads:
        raise ValueError(f"model width {d} not divisible by {heads} heads")
    dh = d // heads
    qp = split_heads(matmul(q, w_q), heads)
    kp = split_heads(matmul(k, w_k), heads)
    vp = split_heads(matmul(v, w_v), heads)
    scores = matmul(qp, swapaxes(kp, -1, -2)) * (1.0 / np.sqrt(dh))
    if bias is not None:
        scores = scores + bias
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)[..., None, :, :]
    attn = masked_softmax(scores, mask)
    return matmul(merge_heads(matmul(attn, vp)), w_o)


def split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    return swapaxes(reshape(x, (*lead, n, heads, d // heads)), -2, -3)


def merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    return reshape(swapaxes(x, -2, -3), (*lead, n, h * dh))


# ---------------------------------------------------------------- optimisation

class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        b1, b2 = self.betas
        self.t += 1
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"adam.t": np.array(self.t, dtype=np.float64)}
        out.update({f"adam.m.{k}": v for k, v in self.m.items()})
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["adam.t"])
        for k in self.params:
            self.m[k] = np.array(state[f"adam.m.{k}"])
            self.v[k] = np.array(state[f"adam.v.{k}"])


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return total


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write a versioned map of dotted names to float64 arrays (npz container)."""
    header = {"format": "parallel_ar.checkpoint", "version": CHECKPOINT_VERSION, "meta": meta or {}}
    payload = {"__header__": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)}
    for name, arr in arrays.items():
        payload[name] = np.asarray(arr, dtype=np.float64)
    buf = io.BytesIO()
    np.savez(buf, **payload)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as z:
        if "__header__" not in z.files:
            raise ValueError(f"{path}: not a checkpoint (missing header)")
        header = json.loads(bytes(z["__header__"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: checkpoint version {header.get('version')} unsupported")
        arrays = {k: np.array(z[k]) for k in z.files if k != "__header__"}
    return arrays, header.get("meta", {})


def numerical_gradient(f: Callable[[], float], param: Tensor, h: float = 1e-5,
                       indices: Iterable | None = None) -> np.ndarray:
    """Central finite differences of scalar ``f`` with respect to ``param``."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        grad.reshape(-1)[i] = (fp - fm) / (2 * h)
    return grad

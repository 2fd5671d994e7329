"""Reverse-mode automatic differentiation over numpy arrays.

Covers exactly the operations the policy and losses need: matmul,
elementwise arithmetic, concat/slice/gather, embedding lookup, small 2-D
convolutions and transposed convolutions, reductions, the usual
activations, softmax/log-softmax, RMS normalization, causal attention and
rotary position rotation (both composed from primitives).

Ops record onto the thread-local active Tape when one is open; with no
tape they are plain numpy forward passes. Arrays keep whatever float
dtype they are given: float32 for training, float64 for verification.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

# When enabled, every recorded op asserts its output is finite.
CHECK_FINITE = False

_STATE = threading.local()


def _active_tape():
    return getattr(_STATE, "tape", None)


@dataclass
class _Node:
    name: str
    parents: tuple  # node ids
    backward: object  # callable(grad_out) -> list of parent grads (or None)


class Tape:
    """Records ops in topological (execution) order for one backward pass."""

    def __init__(self):
        self.nodes = []
        self._leaf_ids = {}  # id(tensor) -> node id

    def __enter__(self):
        if _active_tape() is not None:
            raise RuntimeError("a tape is already active in this thread")
        _STATE.tape = self
        return self

    def __exit__(self, *exc):
        _STATE.tape = None
        return False

    def _leaf(self, tensor):
        nid = self._leaf_ids.get(id(tensor))
        if nid is None:
            nid = len(self.nodes)
            self.nodes.append(_Node("leaf", (), None))
            self._leaf_ids[id(tensor)] = nid
            tensor._tape = self
            tensor._node = nid
        return nid


class Tensor:
    """A numpy array plus an optional node on the active tape."""

    __slots__ = ("data", "requires_grad", "_tape", "_node")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self._tape = None
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    # Thin operator sugar over the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _node_id(tape, t: Tensor):
    """Node id of t on tape, registering leaves for grad-requiring tensors."""
    if t._tape is tape and t._node is not None:
        return t._node
    if t.requires_grad:
        return tape._leaf(t)
    return None


def _record(name, out_data, inputs, backward):
    if CHECK_FINITE and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"non-finite values produced by op {name!r}")
    tape = _active_tape()
    out = Tensor(out_data)
    if tape is None:
        return out
    pids = tuple(_node_id(tape, t) for t in inputs)
    if all(p is None for p in pids):
        return out
    out._tape = tape
    out._node = len(tape.nodes)
    tape.nodes.append(_Node(name, pids, backward))
    return out


def _unbroadcast(grad, shape):
    """Sum grad down to shape (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_shapes(name, ok, *shapes):
    if not ok:
        raise ValueError(f"{name}: incompatible shapes {shapes}")


# --- elementwise -----------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    out = a.data + b.data

    def bw(g):
        return [_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)]

    return _record("add", out, (a, b), bw)


def sub(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    out = a.data - b.data

    def bw(g):
        return [_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)]

    return _record("sub", out, (a, b), bw)


def mul(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bw(g):
        return [_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)]

    return _record("mul", out, (a, b), bw)


def div(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    out = a.data / b.data
    ad, bd = a.data, b.data

    def bw(g):
        return [_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)]

    return _record("div", out, (a, b), bw)


def exp(a):
    out = np.exp(a.data)

    def bw(g):
        return [g * out]

    return _record("exp", out, (a,), bw)


def log(a):
    ad = a.data

    def bw(g):
        return [g / ad]

    return _record("log", np.log(ad), (a,), bw)


def relu(a):
    ad = a.data
    out = np.maximum(ad, 0)

    def bw(g):
        return [g * (ad > 0)]

    return _record("relu", out, (a,), bw)


def sigmoid(a):
    # exp may overflow for very negative inputs; the result saturates to 0
    # exactly, so the warning is spurious.
    with np.errstate(over="ignore"):
        out = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        return [g * out * (1.0 - out)]

    return _record("sigmoid", out, (a,), bw)


def silu(a):
    ad = a.data
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-ad))
    out = ad * s

    def bw(g):
        return [g * (s + ad * s * (1.0 - s))]

    return _record("silu", out, (a,), bw)


def minimum(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    take_a = a.data <= b.data  # ties route to the first argument
    out = np.where(take_a, a.data, b.data)

    def bw(g):
        return [_unbroadcast(g * take_a, a.data.shape),
                _unbroadcast(g * ~take_a, b.data.shape)]

    return _record("minimum", out, (a, b), bw)


def maximum(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    take_a = a.data >= b.data
    out = np.where(take_a, a.data, b.data)

    def bw(g):
        return [_unbroadcast(g * take_a, a.data.shape),
                _unbroadcast(g * ~take_a, b.data.shape)]

    return _record("maximum", out, (a, b), bw)


def clip(a, lo, hi):
    ad = a.data
    out = np.clip(ad, lo, hi)
    inside = (ad > lo) & (ad < hi)

    def bw(g):
        return [g * inside]

    return _record("clip", out, (a,), bw)


# --- shape and indexing ----------------------------------------------------

def reshape(a, shape):
    old = a.data.shape

    def bw(g):
        return [g.reshape(old)]

    return _record("reshape", a.data.reshape(shape), (a,), bw)


def swap_last2(a):
    def bw(g):
        return [np.swapaxes(g, -1, -2)]

    return _record("swap_last2", np.swapaxes(a.data, -1, -2), (a,), bw)


def transpose(a, axes):
    inv = tuple(np.argsort(axes))

    def bw(g):
        return [np.transpose(g, inv)]

    return _record("transpose", np.transpose(a.data, axes), (a,), bw)


def concat(tensors, axis=-1):
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return list(np.split(g, splits, axis=axis))

    return _record("concat", out, tuple(tensors), bw)


def slice_last(a, start, stop):
    ad = a.data
    out = ad[..., start:stop]

    def bw(g):
        full = np.zeros_like(ad)
        full[..., start:stop] = g
        return [full]

    return _record("slice_last", out, (a,), bw)


def embedding(table, ids):
    """Row lookup: table (V, D), integer ids of any shape -> ids.shape + (D,)."""
    ids = np.asarray(ids)
    _check_shapes("embedding", table.data.ndim == 2, table.data.shape)
    out = table.data[ids]
    vshape = table.data.shape

    def bw(g):
        gt = np.zeros(vshape, dtype=g.dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, vshape[1]))
        return [gt]

    return _record("embedding", out, (table,), bw)


def take_last(a, idx):
    """Pick one entry along the last axis: a (..., A), idx (...) -> (...)."""
    idx = np.asarray(idx)
    out = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]
    shape = a.data.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        return [full]

    return _record("take_last", out, (a,), bw)


# --- reductions ------------------------------------------------------------

def sum_(a, axis=None, keepdims=False):
    ad = a.data
    out = ad.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return [np.broadcast_to(g, ad.shape).astype(g.dtype, copy=True)]
        gg = g if keepdims else np.expand_dims(g, axis)
        return [np.broadcast_to(gg, ad.shape).astype(g.dtype, copy=True)]

    return _record("sum", out, (a,), bw)


def mean(a, axis=None, keepdims=False):
    ad = a.data
    out = ad.mean(axis=axis, keepdims=keepdims)
    n = ad.size if axis is None else ad.shape[axis]

    def bw(g):
        if axis is None:
            return [np.broadcast_to(g / n, ad.shape).astype(g.dtype, copy=True)]
        gg = g if keepdims else np.expand_dims(g, axis)
        return [np.broadcast_to(gg / n, ad.shape).astype(g.dtype, copy=True)]

    return _record("mean", out, (a,), bw)


# --- linear algebra --------------------------------------------------------

def matmul(a, b):
    ad, bd = a.data, b.data
    _check_shapes("matmul", ad.shape[-1] == bd.shape[-2] if bd.ndim >= 2 else False,
                  ad.shape, bd.shape)
    out = np.matmul(ad, bd)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return [_unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)]

    return _record("matmul", out, (a, b), bw)


def softmax(a, axis=-1):
    ad = a.data
    shifted = ad - ad.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return [(g - dot) * out]

    return _record("softmax", out, (a,), bw)


def log_softmax(a, axis=-1):
    ad = a.data
    shifted = ad - ad.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def bw(g):
        return [g - sm * g.sum(axis=axis, keepdims=True)]

    return _record("log_softmax", out, (a,), bw)


def rms_norm(a, gain, eps=1e-6):
    """y = x / sqrt(mean(x^2, last) + eps) * gain."""
    ad, gd = a.data, gain.data
    n = ad.shape[-1]
    m = (ad * ad).mean(axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(m + eps)
    out = ad * r * gd

    def bw(g):
        gg = (g * ad * r).reshape(-1, n).sum(axis=0).reshape(gd.shape)
        # d/dx of x_i * r(x) * g_i: direct term plus the shared-r coupling.
        coef = (g * gd * ad).sum(axis=-1, keepdims=True)
        gx = g * gd * r - ad * (r ** 3) * coef / n
        return [gx, gg.astype(g.dtype)]

    return _record("rms_norm", out, (a, gain), bw)


# --- convolutions (NCHW, valid padding after optional zero pad) -------------

def _im2col(xp, kh, kw, stride, oh, ow):
    """(B, C, HP, WP) -> (B*OH*OW, C*kh*kw) patch matrix (copies)."""
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    strided = windows[:, :, ::stride, ::stride]  # (B, C, OH, OW, kh, kw)
    return np.ascontiguousarray(strided.transpose(0, 2, 3, 1, 4, 5)).reshape(-1, xp.shape[1] * kh * kw)


def _col2im(gcols, xp_shape, kh, kw, stride, oh, ow):
    """Scatter-add (B*OH*OW, C*kh*kw) patch grads back to (B, C, HP, WP)."""
    b_, c, hp, wp = xp_shape
    gx = np.zeros(xp_shape, dtype=gcols.dtype)
    gc = gcols.reshape(b_, oh, ow, c, kh, kw)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i:i + oh * stride:stride, j:j + ow * stride:stride] += \
                gc[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return gx


def conv2d(x, w, bias=None, stride=1, pad=0):
    xd, wd = x.data, w.data
    _check_shapes("conv2d", xd.ndim == 4 and wd.ndim == 4 and xd.shape[1] == wd.shape[1],
                  xd.shape, wd.shape)
    b_, c, h, wdt = xd.shape
    o, _, kh, kw = wd.shape
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    hp, wp = xp.shape[2], xp.shape[3]
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    wmat = wd.reshape(o, -1)
    out = (cols @ wmat.T).reshape(b_, oh, ow, o).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, o)
        gw = (gmat.T @ cols).reshape(wd.shape)
        gx = _col2im(gmat @ wmat, xp.shape, kh, kw, stride, oh, ow)
        if pad:
            gx = gx[:, :, pad:-pad, pad:-pad]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, w) if bias is None else (x, w, bias)
    return _record("conv2d", out, inputs, bw)


def conv2d_transpose(x, w, bias=None, stride=2):
    """x (B, C, H, W), w (C, O, kh, kw) -> (B, O, (H-1)s+kh, (W-1)s+kw).

    Exactly the adjoint of a stride-s valid conv2d, so the forward scatters
    patch contributions and the backward gathers them.
    """
    xd, wd = x.data, w.data
    _check_shapes("conv2d_transpose", xd.ndim == 4 and wd.ndim == 4 and xd.shape[1] == wd.shape[0],
                  xd.shape, wd.shape)
    b_, c, h, wdt = xd.shape
    _, o, kh, kw = wd.shape
    oh = (h - 1) * stride + kh
    ow = (wdt - 1) * stride + kw
    xmat = np.ascontiguousarray(xd.transpose(0, 2, 3, 1)).reshape(-1, c)
    wmat = wd.reshape(c, -1)  # (C, O*kh*kw)
    contrib = xmat @ wmat  # (B*H*W, O*kh*kw)
    out = _col2im(contrib, (b_, o, oh, ow), kh, kw, stride, h, wdt)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def bw(g):
        gcols = _im2col(g, kh, kw, stride, h, wdt)  # (B*H*W, O*kh*kw)
        gx = (gcols @ wmat.T).reshape(b_, h, wdt, c).transpose(0, 3, 1, 2)
        gw = (xmat.T @ gcols).reshape(wd.shape)
        grads = [np.ascontiguousarray(gx), gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, w) if bias is None else (x, w, bias)
    return _record("conv2d_transpose", out, inputs, bw)


# --- attention and rotary (composed from primitives) ------------------------

def rotary(x, positions, base=10000.0):
    """Rotate feature pairs by position-dependent angles.

    x: (..., T, D) with even D; positions: (T,) or broadcastable to x's
    leading dims + (T,). Gradients flow through x only.
    """
    d = x.data.shape[-1]
    if d % 2:
        raise ValueError("rotary needs an even feature dimension")
    half = d // 2
    dtype = x.data.dtype
    freqs = base ** (-np.arange(half, dtype=dtype) / half)
    ang = np.asarray(positions, dtype=dtype)[..., None] * freqs  # (..., T, half)
    cos = Tensor(np.cos(ang))
    sin = Tensor(np.sin(ang))
    x1 = slice_last(x, 0, half)
    x2 = slice_last(x, half, d)
    out1 = sub(mul(x1, cos), mul(x2, sin))
    out2 = add(mul(x1, sin), mul(x2, cos))
    return concat([out1, out2], axis=-1)


def causal_attention(q, k, v, extra_mask=None):
    """Scaled dot-product attention with a causal mask.

    q, k, v: (B, H, T, hd). extra_mask: optional additive (B, 1, T, T)
    array (0 for keep, large negative for drop), used for padding.
    Output at position t depends only on positions <= t.
    """
    b, nh, t, hd = q.data.shape
    scale = 1.0 / np.sqrt(hd)
    scores = mul(matmul(q, swap_last2(k)), scale)
    causal = np.triu(np.full((t, t), -1e9, dtype=q.data.dtype), k=1)
    mask = causal[None, None, :, :]
    if extra_mask is not None:
        mask = mask + extra_mask
    probs = softmax(add(scores, Tensor(mask)), axis=-1)
    return matmul(probs, v)


# --- backward --------------------------------------------------------------

def backward(tape: Tape, loss: Tensor, params):
    """Gradients of a scalar loss for each tensor in params (zeros when a
    parameter is not reachable from the loss on this tape)."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss._tape is not tape or loss._node is None:
        # Loss disconnected from every recorded op: all-zero gradients.
        return [np.zeros_like(p.data) for p in params]
    grads = {loss._node: np.ones_like(loss.data)}
    for nid in range(loss._node, -1, -1):
        g = grads.pop(nid, None)
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.backward is None:
            grads[nid] = g  # leaf: keep for collection below
            continue
        pgrads = node.backward(g)
        for pid, pg in zip(node.parents, pgrads):
            if pid is None or pg is None:
                continue
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    out = []
    for p in params:
        nid = p._node if p._tape is tape else None
        g = grads.get(nid) if nid is not None else None
        out.append(g if g is not None else np.zeros_like(p.data))
    return out

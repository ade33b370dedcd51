"""Reverse-mode automatic differentiation over dense float64 arrays.

Every differentiable operation records a graph node whose backward rule (VJP)
is itself written in terms of these same operations. Running ``backward`` with
``create_graph=True`` therefore produces gradients that are ordinary graph
tensors, so a second backward through them yields correct second-order
products. Graphs are never freed; repeated backward passes are always legal.

Broadcasting is deliberately restricted to scalar-vs-tensor. All other shape
alignment goes through explicit ``reshape`` / ``broadcast_to`` calls.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (e.g. for sampling loops)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Node:
    """Provenance record: the op that produced a tensor and its inputs.

    ``vjps`` holds one callable per parent mapping the output gradient to that
    parent's gradient contribution (or None for non-differentiable slots).
    """

    __slots__ = ("op", "parents", "vjps")

    def __init__(self, op, parents, vjps):
        self.op = op
        self.parents = parents
        self.vjps = vjps


class Tensor:
    """A float64 n-d array, optionally linked into the autodiff graph.

    A tensor without a node is a leaf; backward never propagates past leaves.
    """

    __slots__ = ("data", "requires_grad", "node")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item: tensor has {self.data.size} elements")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def sum(self, axes=None, keepdims=False) -> "Tensor":
        return tsum(self, axes, keepdims)

    def mean(self, axes=None, keepdims=False) -> "Tensor":
        return tmean(self, axes, keepdims)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, op, parents, vjps) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(op, tuple(parents), tuple(vjps))
    return out


def _check_same_shape(op, a, b):
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise ops (binary kinds accept a python scalar on either side)


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        return _result(a.data + float(b), "add", (a,), (lambda g: g,))
    if not isinstance(a, Tensor):
        return add(b, a)
    _check_same_shape("add", a, b)
    return _result(a.data + b.data, "add", (a, b), (lambda g: g, lambda g: g))


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        return _result(a.data - float(b), "sub", (a,), (lambda g: g,))
    if not isinstance(a, Tensor):
        return _result(float(a) - b.data, "sub", (b,), (lambda g: neg(g),))
    _check_same_shape("sub", a, b)
    return _result(a.data - b.data, "sub", (a, b), (lambda g: g, lambda g: neg(g)))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        c = float(b)
        return _result(a.data * c, "mul", (a,), (lambda g: mul(g, c),))
    if not isinstance(a, Tensor):
        return mul(b, a)
    _check_same_shape("mul", a, b)
    return _result(
        a.data * b.data, "mul", (a, b), (lambda g: mul(g, b), lambda g: mul(g, a))
    )


def div(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        if c == 0.0:
            raise ValueError("div: division by zero")
        return mul(a, 1.0 / c)
    if np.any(b.data == 0.0):
        raise ValueError("div: division by zero")
    if not isinstance(a, Tensor):
        c = float(a)
        return _result(
            c / b.data, "div", (b,), (lambda g: neg(div(mul(g, c), mul(b, b))),)
        )
    _check_same_shape("div", a, b)
    return _result(
        a.data / b.data,
        "div",
        (a, b),
        (lambda g: div(g, b), lambda g: neg(div(mul(g, a), mul(b, b)))),
    )


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, "neg", (a,), (lambda g: neg(g),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = _result(y, "tanh", (a,), (None,))
    if out.node is not None:
        out.node.vjps = (lambda g: mul(g, sub(1.0, mul(out, out))),)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = np.empty_like(a.data)
    pos = a.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = _result(y, "sigmoid", (a,), (None,))
    if out.node is not None:
        out.node.vjps = (lambda g: mul(g, mul(out, sub(1.0, out))),)
    return out


def relu(a: Tensor) -> Tensor:
    mask = Tensor((a.data > 0).astype(np.float64))
    return _result(np.maximum(a.data, 0.0), "relu", (a,), (lambda g: mul(g, mask),))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise ValueError("log: non-positive input")
    return _result(np.log(a.data), "log", (a,), (lambda g: div(g, a),))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    if not np.all(np.isfinite(y)):
        raise ValueError("exp: overflow to non-finite values")
    out = _result(y, "exp", (a,), (None,))
    if out.node is not None:
        out.node.vjps = (lambda g: mul(g, out),)
    return out


def softplus(a: Tensor) -> Tensor:
    # log(1 + exp(a)), computed in the overflow-safe log-sum-exp form
    y = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
    return _result(y, "softplus", (a,), (lambda g: mul(g, sigmoid(a)),))


def _recip0(a: Tensor) -> Tensor:
    # 1/a with the convention 0 at a == 0 (subgradient choice at norm kinks)
    nz = a.data != 0.0
    y = np.zeros_like(a.data)
    y[nz] = 1.0 / a.data[nz]
    out = _result(y, "recip0", (a,), (None,))
    if out.node is not None:
        out.node.vjps = (lambda g: neg(mul(g, mul(out, out))),)
    return out


# ---------------------------------------------------------------------------
# structural ops


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = a.data.shape
    return _result(
        a.data.reshape(shape), "reshape", (a,), (lambda g: reshape(g, old),)
    )


def take_flat(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather from the flattened tensor; output has idx's shape.

    Linear, so its VJP is scatter-add with the same index pattern; together the
    pair subsumes padding, cropping, tiling, transposition and im2col.
    """
    in_shape = a.data.shape
    data = a.data.reshape(-1).take(idx)
    return _result(
        data, "take", (a,), (lambda g: scatter_flat(g, idx, in_shape),)
    )


def scatter_flat(a: Tensor, idx: np.ndarray, out_shape) -> Tensor:
    """Scatter-add the tensor's elements into zeros of out_shape (flat idx)."""
    out_shape = tuple(int(s) for s in out_shape)
    n = int(np.prod(out_shape))
    data = np.bincount(
        idx.reshape(-1), weights=a.data.reshape(-1), minlength=n
    ).reshape(out_shape)
    return _result(data, "scatter", (a,), (lambda g: take_flat(g, idx),))


_broadcast_idx_cache: dict = {}


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Materialized numpy-style broadcast; gradient sums over expanded axes."""
    shape = tuple(int(s) for s in shape)
    key = (a.data.shape, shape)
    idx = _broadcast_idx_cache.get(key)
    if idx is None:
        idx = np.ascontiguousarray(np.broadcast_to(
            np.arange(a.data.size, dtype=np.intp).reshape(a.data.shape), shape))
        _broadcast_idx_cache[key] = idx
    return take_flat(a, idx)


def transpose2d(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ValueError(f"transpose2d: expected 2-d, got shape {a.data.shape}")
    data = np.ascontiguousarray(a.data.T)
    return _result(data, "transpose2d", (a,), (lambda g: transpose2d(g),))


def _normalize_axes(axes, ndim) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, (int, np.integer)):
        axes = (int(axes),)
    axes = tuple(sorted(int(ax) % ndim for ax in axes))
    if len(axes) == 0:
        raise ValueError("reduce: empty reduction set")
    if len(set(axes)) != len(axes):
        raise ValueError(f"reduce: duplicate axes {axes}")
    return axes


def tsum(a: Tensor, axes=None, keepdims=False) -> Tensor:
    axes = _normalize_axes(axes, a.data.ndim)
    in_shape = a.data.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(in_shape))
    data = a.data.sum(axis=axes, keepdims=keepdims)
    if not keepdims and data.ndim == 0:
        data = data.reshape(1)

    def vjp(g):
        return broadcast_to(reshape(g, kept), in_shape)

    return _result(data, "sum", (a,), (vjp,))


def tmean(a: Tensor, axes=None, keepdims=False) -> Tensor:
    axes = _normalize_axes(axes, a.data.ndim)
    n = int(np.prod([a.data.shape[i] for i in axes]))
    return mul(tsum(a, axes, keepdims), 1.0 / n)


def l2norm(a: Tensor, axes=None, keepdims=False) -> Tensor:
    """sqrt of the sum of squares; gradient 0 at exact zeros of the norm."""
    s = tsum(mul(a, a), axes, keepdims)
    y = np.sqrt(s.data)
    out = _result(y, "l2norm", (s,), (None,))
    if out.node is not None:
        out.node.vjps = (lambda g: mul(mul(g, 0.5), _recip0(out)),)
    return out


# ---------------------------------------------------------------------------
# dense algebra


def matmul_t(a: Tensor, b: Tensor, ta: bool = False, tb: bool = False) -> Tensor:
    """op(a) @ op(b) with optional transposes resolved inside BLAS (no copies).

    The four flag combinations are closed under differentiation, so gradients
    never materialize explicit transposes.
    """
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(
            f"matmul: expected 2-d operands, got {a.data.shape} and {b.data.shape}"
        )
    am = a.data.T if ta else a.data
    bm = b.data.T if tb else b.data
    if am.shape[1] != bm.shape[0]:
        raise ValueError(f"matmul: inner extents differ, {am.shape} x {bm.shape}")

    def vjp_a(g):
        return matmul_t(b, g, tb, True) if ta else matmul_t(g, b, False, not tb)

    def vjp_b(g):
        return matmul_t(g, a, True, ta) if tb else matmul_t(a, g, not ta, False)

    return _result(am @ bm, "matmul", (a, b), (vjp_a, vjp_b))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return matmul_t(a, b)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax of a 2-d tensor, max-shifted for stability."""
    if a.data.ndim != 2:
        raise ValueError(f"softmax_rows: expected 2-d, got shape {a.data.shape}")
    if not np.all(np.isfinite(a.data)):
        raise ValueError("softmax_rows: non-finite input")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    out = _result(y, "softmax_rows", (a,), (None,))
    if out.node is not None:

        def vjp(g):
            gy = mul(g, out)
            s = tsum(gy, axes=1, keepdims=True)
            return mul(out, sub(g, broadcast_to(s, a.data.shape)))

        out.node.vjps = (vjp,)
    return out


def logsumexp_rows(a: Tensor) -> Tensor:
    """Row-wise log-sum-exp of a 2-d tensor -> shape [R]."""
    if a.data.ndim != 2:
        raise ValueError(f"logsumexp_rows: expected 2-d, got shape {a.data.shape}")
    m = a.data.max(axis=1, keepdims=True)
    y = (m + np.log(np.exp(a.data - m).sum(axis=1, keepdims=True))).reshape(-1)

    def vjp(g):
        return mul(broadcast_to(reshape(g, (a.data.shape[0], 1)), a.data.shape),
                   softmax_rows(a))

    return _result(y, "logsumexp_rows", (a,), (vjp,))


def tanh_outer_add(a: Tensor, b: Tensor) -> Tensor:
    """tanh(a[t] + b[j]) for all pairs: [T,P] x [J,P] -> [T,J,P].

    Fused so only the output is retained for backward (the pairwise sums of
    the additive attention score are the memory hot spot).
    """
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise ValueError(
            f"tanh_outer_add: incompatible shapes {a.data.shape} and {b.data.shape}"
        )
    y = np.tanh(a.data[:, None, :] + b.data[None, :, :])
    out = _result(y, "tanh_outer_add", (a, b), (None, None))
    if out.node is not None:

        def through(g):
            return mul(g, sub(1.0, mul(out, out)))

        out.node.vjps = (
            lambda g: tsum(through(g), axes=1),
            lambda g: tsum(through(g), axes=0),
        )
    return out


# ---------------------------------------------------------------------------
# convolution and pooling (compositions of the linear primitives above)

_conv_index_cache: dict = {}


def _conv_indices(in_shape, kh, kw, stride, padding):
    """Pad-placement and im2col gather indices for an NHWC convolution."""
    key = (in_shape, kh, kw, stride, padding)
    hit = _conv_index_cache.get(key)
    if hit is not None:
        return hit
    b, h, w, cin = in_shape
    if padding == "same":
        oh = -(-h // stride)
        ow = -(-w // stride)
        ph = max((oh - 1) * stride + kh - h, 0)
        pw = max((ow - 1) * stride + kw - w, 0)
        pt, pl = ph // 2, pw // 2
    elif padding == "valid":
        if kh > h or kw > w:
            raise ValueError(
                f"conv2d: {kh}x{kw} kernel does not fit {h}x{w} input (valid padding)"
            )
        oh = (h - kh) // stride + 1
        ow = (w - kw) // stride + 1
        pt = pl = ph = pw = 0
    else:
        raise ValueError(f"conv2d: unknown padding {padding!r}")
    hp, wp = h + ph, w + pw
    padded_shape = (b, hp, wp, cin)

    if ph or pw:
        rr = (np.arange(h) + pt)[None, :, None, None]
        cc = (np.arange(w) + pl)[None, None, :, None]
        bb = np.arange(b)[:, None, None, None]
        ch = np.arange(cin)[None, None, None, :]
        pad_idx = (((bb * hp + rr) * wp + cc) * cin + ch).astype(np.intp)
        pad_idx = np.ascontiguousarray(np.broadcast_to(pad_idx, in_shape))
    else:
        pad_idx = None

    orow = np.arange(oh) * stride
    ocol = np.arange(ow) * stride
    r = orow[:, None, None, None, None] + np.arange(kh)[None, None, :, None, None]
    c = ocol[None, :, None, None, None] + np.arange(kw)[None, None, None, :, None]
    ch = np.arange(cin)[None, None, None, None, :]
    base = (r * wp + c) * cin + ch  # [oh, ow, kh, kw, cin]
    base = base.reshape(1, oh, ow, kh * kw * cin)
    boff = (np.arange(b) * (hp * wp * cin)).reshape(b, 1, 1, 1)
    col_idx = np.ascontiguousarray((base + boff).astype(np.intp))

    out = (pad_idx, padded_shape, col_idx, oh, ow)
    _conv_index_cache[key] = out
    return out


def conv2d(x: Tensor, w: Tensor, bias=None, stride=1, padding="same",
           mask=None) -> Tensor:
    """Cross-correlation of NHWC input with a [kh,kw,cin,cout] kernel.

    An optional binary mask is multiplied into the kernel, so masked taps
    contribute nothing and receive exactly-zero gradients.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError(
            f"conv2d: expected 4-d input/kernel, got {x.data.shape} / {w.data.shape}"
        )
    kh, kw, cin, cout = w.data.shape
    if x.data.shape[3] != cin:
        raise ValueError(
            f"conv2d: input channels {x.data.shape[3]} != kernel cin {cin}"
        )
    if mask is not None:
        mask = as_tensor(mask)
        _check_same_shape("conv2d mask", w, mask)
        w = mul(w, mask)
    pad_idx, padded_shape, col_idx, oh, ow = _conv_indices(
        x.data.shape, kh, kw, int(stride), padding
    )
    xp = scatter_flat(x, pad_idx, padded_shape) if pad_idx is not None else x
    cols = reshape(take_flat(xp, col_idx), (-1, kh * kw * cin))
    out = matmul(cols, reshape(w, (kh * kw * cin, cout)))
    if bias is not None:
        if bias.data.shape != (cout,):
            raise ValueError(
                f"conv2d: bias shape {bias.data.shape} != ({cout},)"
            )
        out = add(out, broadcast_to(reshape(bias, (1, cout)), out.data.shape))
    return reshape(out, (x.data.shape[0], oh, ow, cout))


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 stride-2 max pooling (ceil mode) over NHWC input."""
    if x.data.ndim != 4:
        raise ValueError(f"maxpool2x2: expected 4-d input, got {x.data.shape}")
    b, h, w, c = x.data.shape
    oh, ow = -(-h // 2), -(-w // 2)
    xp = np.full((b, oh * 2, ow * 2, c), -np.inf)
    xp[:, :h, :w, :] = x.data
    win = xp.reshape(b, oh, 2, ow, 2, c).transpose(0, 1, 3, 5, 2, 4)
    win = win.reshape(b, oh, ow, c, 4)
    k = win.argmax(axis=-1)
    dr, dc = k // 2, k % 2
    rows = 2 * np.arange(oh)[None, :, None, None] + dr
    cols = 2 * np.arange(ow)[None, None, :, None] + dc
    bi = np.arange(b)[:, None, None, None]
    ci = np.arange(c)[None, None, None, :]
    idx = np.ascontiguousarray((((bi * h + rows) * w + cols) * c + ci).astype(np.intp))
    data = np.take_along_axis(win, k[..., None], axis=-1)[..., 0]
    in_shape = x.data.shape
    return _result(
        data, "maxpool2x2", (x,), (lambda g: scatter_flat(g, idx, in_shape),)
    )


# ---------------------------------------------------------------------------
# backward


def _toposort(root: Tensor) -> list:
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(root: Tensor, create_graph=False) -> dict:
    """Accumulate gradients of a scalar root over every reachable leaf.

    Returns {leaf Tensor: gradient Tensor}. With ``create_graph`` the returned
    gradients carry their own graphs and can be differentiated again.
    """
    if root.data.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.data.shape}")
    if not root.requires_grad:
        return {}
    topo = _toposort(root)
    grads = {id(root): Tensor(np.ones_like(root.data))}
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = bool(create_graph)
    try:
        for t in reversed(topo):
            if t.node is None:
                continue
            g = grads.pop(id(t))
            for p, vjp in zip(t.node.parents, t.node.vjps):
                if vjp is None or not p.requires_grad:
                    continue
                pg = vjp(g)
                acc = grads.get(id(p))
                grads[id(p)] = pg if acc is None else add(acc, pg)
    finally:
        _GRAD_ENABLED = prev
    return {t: grads[id(t)] for t in topo if t.node is None and id(t) in grads}


def grad(root: Tensor, wrt, create_graph=False) -> list:
    """Gradients of a scalar root w.r.t. a list of tensors (zeros if unused)."""
    gmap = backward(root, create_graph=create_graph)
    return [
        gmap.get(t, Tensor(np.zeros_like(t.data))) for t in wrt
    ]

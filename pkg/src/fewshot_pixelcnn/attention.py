"""Patch key/value memory over support images and additive-attention queries.

Support images are augmented with relative-position channels (and optionally
one-hot support-identity channels), encoded by a shallow strided conv net into
keys and values, and queried per output pixel with a tanh additive score.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .model import encode_supports, features, scale_levels
from .tensor import (
    Tensor,
    add,
    broadcast_to,
    conv2d,
    matmul,
    relu,
    reshape,
    scatter_flat,
    softmax_rows,
    take_flat,
    tanh_outer_add,
)


@dataclass
class AttentionMemory:
    """Flattened patch keys/values [S*K^2, P] plus trace coordinates."""

    keys: Tensor
    values: Tensor
    patch_centers: list  # (support_index, row, col) per memory row


@dataclass
class AttentionTrace:
    """Per-output-pixel attention weight rows recorded during sampling."""

    weights: np.ndarray  # [H*W, S*K^2]
    patch_centers: list
    support_shape: tuple  # (S, H, W)

    def validate(self, tol: float = 1e-6) -> None:
        w = self.weights
        if np.any(w < -tol) or np.any(w > 1 + tol):
            raise ValueError("AttentionTrace: weights outside [0, 1]")
        if np.any(np.abs(w.sum(axis=1) - 1.0) > tol):
            raise ValueError("AttentionTrace: rows do not sum to 1")


def augment_support(support: np.ndarray, cfg: ModelConfig,
                    identity: bool | None = None) -> np.ndarray:
    """Append x/y position channels in [-1,1] and one-hot identity channels."""
    support = np.asarray(support, dtype=np.float64)
    s, h, w, c = support.shape
    if identity is None:
        identity = cfg.identity_channels
    xs = np.linspace(-1.0, 1.0, w) if w > 1 else np.full(w, -1.0)
    ys = np.linspace(-1.0, 1.0, h) if h > 1 else np.full(h, -1.0)
    xpos = np.broadcast_to(xs[None, None, :, None], (s, h, w, 1))
    ypos = np.broadcast_to(ys[None, :, None, None], (s, h, w, 1))
    chans = [scale_levels(support, cfg), xpos, ypos]
    if identity:
        one_hot = np.zeros((s, h, w, s))
        for i in range(s):
            one_hot[i, :, :, i] = 1.0
        chans.append(one_hot)
    return np.concatenate(chans, axis=3)


def build_memory(s_aug, params: dict, cfg: ModelConfig) -> AttentionMemory:
    """Two-layer strided conv encoder -> [S*K^2, 2P], split into keys/values.

    Accepts the augmented support stack as an array or as a Tensor (the
    latter allows gradient probes through the encoder input).
    """
    if not isinstance(s_aug, Tensor):
        s_aug = Tensor(np.asarray(s_aug, dtype=np.float64))
    s = s_aug.data.shape[0]
    (k1, s1), (k2, s2) = cfg.patch_kernels
    h = relu(conv2d(s_aug, params["attn.p1.w"], params["attn.p1.b"],
                    s1, "valid"))
    h = conv2d(h, params["attn.p2.w"], params["attn.p2.b"], s2, "valid")
    k = cfg.patch_grid
    if h.data.shape[1] != k or h.data.shape[2] != k:
        raise ValueError(
            f"build_memory: encoder output {h.data.shape[1]}x{h.data.shape[2]} "
            f"!= patch grid {k}"
        )
    pp = cfg.attn_channels
    flat = reshape(h, (s * k * k, 2 * pp))
    rows = s * k * k
    grid = np.arange(rows * 2 * pp, dtype=np.intp).reshape(rows, 2 * pp)
    keys = take_flat(flat, np.ascontiguousarray(grid[:, :pp]))
    values = take_flat(flat, np.ascontiguousarray(grid[:, pp:]))
    _, stride, off = cfg.patch_receptive()
    centers = [(si, i * stride + off, j * stride + off)
               for si in range(s) for i in range(k) for j in range(k)]
    return AttentionMemory(keys=keys, values=values, patch_centers=centers)


def attend(q: Tensor, memory: AttentionMemory, params: dict):
    """Additive attention: e_tj = v' tanh(Wq q_t + key_j).

    Returns (weights [T, S*K^2], context [T, P]); differentiable end to end.
    """
    pp = params["attn.q.w"].data.shape[1]
    qp = matmul(q, params["attn.q.w"])
    qp = add(qp, broadcast_to(reshape(params["attn.q.b"], (1, pp)), qp.data.shape))
    y = tanh_outer_add(qp, memory.keys)
    t, j = y.data.shape[0], y.data.shape[1]
    e = reshape(matmul(reshape(y, (t * j, pp)), reshape(params["attn.v"], (pp, 1))),
                (t, j))
    alpha = softmax_rows(e)
    context = matmul(alpha, memory.values)
    return alpha, context


def attn_context(x: np.ndarray, support: np.ndarray, params: dict,
                 cfg: ModelConfig) -> Tensor:
    """Per-pixel context map f_t(s, x_<t) for one episode: [H,W,P].

    Queries come from the query-layer features of the globally conditioned
    trunk, so the map inherits raster causality from the masked convs.
    """
    if not cfg.attention:
        raise ValueError("attn_context: attention disabled in config")
    x = np.asarray(x, dtype=np.float64)
    fs = encode_supports(np.asarray(support)[None], params, cfg)
    q = features(x[None], fs, params, cfg)
    q = reshape(q, (cfg.height * cfg.width, cfg.planes))
    memory = build_memory(augment_support(support, cfg), params, cfg)
    _, context = attend(q, memory, params)
    return reshape(context, (cfg.height, cfg.width, cfg.attn_channels))


def batch_context_builder(episodes, params: dict, cfg: ModelConfig):
    """Closure mapping query-layer features [B,H,W,Z] to context [B,H,W,P]."""
    memories = [
        build_memory(augment_support(e.support, cfg), params, cfg)
        for e in episodes
    ]
    bsz = len(episodes)
    t = cfg.height * cfg.width
    z, pp = cfg.planes, cfg.attn_channels
    in_idx = np.arange(bsz * t * z, dtype=np.intp).reshape(bsz, t, z)
    out_shape = (bsz, cfg.height, cfg.width, pp)
    # rows match each episode's [T, P] context so the scatter VJP keeps shape
    out_idx = np.arange(bsz * t * pp, dtype=np.intp).reshape(bsz, t, pp)

    def builder(feat: Tensor) -> Tensor:
        ctx = None
        for b, mem in enumerate(memories):
            q = take_flat(feat, in_idx[b])
            _, context = attend(q, mem, params)
            piece = scatter_flat(context, out_idx[b], out_shape)
            ctx = piece if ctx is None else add(ctx, piece)
        return ctx

    return builder

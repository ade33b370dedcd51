"""Conditional autoregressive image model: support encoder, masked-conv trunk,
exact likelihood, and raster-order ancestral sampling.

All functions are pure in (params, config); parameters live in a flat
name -> Tensor dict so adapted copies can be swapped in (the meta variant
relies on this).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .data import Episode
from .layers import (
    bernoulli_nll,
    categorical_nll,
    conv_weight,
    dense_weight,
    glorot_uniform,
    make_raster_mask,
    zeros_param,
)
from .tensor import (
    Tensor,
    add,
    broadcast_to,
    conv2d,
    matmul,
    maxpool2x2,
    mul,
    no_grad,
    relu,
    reshape,
    scatter_flat,
    sigmoid,
    softmax_rows,
)

_mask_cache: dict = {}


def _mask(kh, kw, cin, cout, kind) -> Tensor:
    key = (kh, kw, cin, cout, kind)
    if key not in _mask_cache:
        _mask_cache[key] = make_raster_mask(kh, kw, cin, cout, kind)
    return _mask_cache[key]


def init_params(cfg: ModelConfig, seed: int) -> dict:
    """Glorot-uniform weights, zero biases; deterministic per seed."""
    rng = np.random.default_rng(seed)
    z, pen, c, v = cfg.planes, cfg.penultimate_planes, cfg.channels, cfg.value_levels
    p = {}
    p["trunk.in.w"] = conv_weight(rng, 7, 7, c, z)
    p["trunk.in.b"] = zeros_param(z)
    for i in range(1, cfg.n_layers + 1):
        p[f"trunk.l{i:02d}.w"] = conv_weight(rng, 3, 3, z, z)
        p[f"trunk.l{i:02d}.b"] = zeros_param(z)
    for b in range(1, cfg.n_blocks + 1):
        p[f"trunk.skip{b:02d}.w"] = conv_weight(rng, 1, 1, z, pen)
    p["trunk.pen.b"] = zeros_param(pen)
    out_ch = c if cfg.bernoulli else c * v
    p["head.out.w"] = conv_weight(rng, 1, 1, pen, out_ch)
    p["head.out.b"] = zeros_param(out_ch)
    for ch in range(1, c):  # within-pixel channel-autoregressive taps
        p[f"head.prev{ch}.w"] = conv_weight(rng, 1, 1, ch, 1 if cfg.bernoulli else v)

    if cfg.conditional:
        e, g = cfg.support_planes, cfg.global_dim
        p["enc.in.w"] = conv_weight(rng, 5, 5, c, e)
        p["enc.in.b"] = zeros_param(e)
        for j in range(1, cfg.n_encoder_stages + 1):
            p[f"enc.s{j}.w"] = conv_weight(rng, 3, 3, e, e)
            p[f"enc.s{j}.b"] = zeros_param(e)
        p["enc.fc1.w"] = dense_weight(rng, cfg.support_size * e, g)
        p["enc.fc1.b"] = zeros_param(g)
        p["enc.fc2.w"] = dense_weight(rng, g, g)
        p["enc.fc2.b"] = zeros_param(g)
        p["cond.in.w"] = dense_weight(rng, g, z)
        for i in range(1, cfg.n_layers + 1):
            p[f"cond.l{i:02d}.w"] = dense_weight(rng, g, z)

    if cfg.attention:
        pp = cfg.attn_channels
        caug = c + 2 + (cfg.support_size if cfg.identity_channels else 0)
        (k1, _), (k2, _) = cfg.patch_kernels
        p["attn.p1.w"] = conv_weight(rng, k1, k1, caug, 2 * pp)
        p["attn.p1.b"] = zeros_param(2 * pp)
        p["attn.p2.w"] = conv_weight(rng, k2, k2, 2 * pp, 2 * pp)
        p["attn.p2.b"] = zeros_param(2 * pp)
        p["attn.q.w"] = dense_weight(rng, z, pp)
        p["attn.q.b"] = zeros_param(pp)
        p["attn.v"] = glorot_uniform(rng, (pp,), pp, 1)
        for i in range(cfg.query_layer + 1, cfg.n_layers + 1):
            p[f"ctx.l{i:02d}.w"] = conv_weight(rng, 1, 1, pp, z)

    if cfg.meta:
        for j in (1, 2, 3):
            p[f"g.c{j}.w"] = conv_weight(rng, 3, 3, z, z)
            p[f"g.c{j}.b"] = zeros_param(z)
    return p


def scale_levels(x: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) / (cfg.value_levels - 1)


def _inject(fs: Tensor, w: Tensor, shape) -> Tensor:
    """Spatial-constant conditioning bias: [B,G] @ [G,Z] broadcast to [B,H,W,Z]."""
    b = fs.data.shape[0]
    return broadcast_to(reshape(matmul(fs, w), (b, 1, 1, shape[3])), shape)


def encode_supports(supports: np.ndarray, params: dict, cfg: ModelConfig) -> Tensor:
    """Global support-set embeddings f(s) for a batch: [B,S,H,W,C] -> [B,G]."""
    bsz, s = supports.shape[0], supports.shape[1]
    if s != cfg.support_size:
        raise ValueError(
            f"encode_supports: got {s} supports, config expects {cfg.support_size}"
        )
    x = Tensor(scale_levels(supports, cfg).reshape(bsz * s, cfg.height, cfg.width,
                                                   cfg.channels))
    h = relu(conv2d(x, params["enc.in.w"], params["enc.in.b"], 1, "same"))
    for j in range(1, cfg.n_encoder_stages + 1):
        h = relu(conv2d(h, params[f"enc.s{j}.w"], params[f"enc.s{j}.b"], 1, "same"))
        h = maxpool2x2(h)
    flat = reshape(h, (bsz, s * cfg.support_planes))
    g1 = matmul(flat, params["enc.fc1.w"])
    g1 = relu(add(g1, broadcast_to(reshape(params["enc.fc1.b"], (1, -1)), g1.data.shape)))
    g2 = matmul(g1, params["enc.fc2.w"])
    return add(g2, broadcast_to(reshape(params["enc.fc2.b"], (1, -1)), g2.data.shape))


def encode_support(support: np.ndarray, params: dict, cfg: ModelConfig) -> Tensor:
    """f(s) for a single support set: [S,H,W,C] -> [G]."""
    return reshape(encode_supports(np.asarray(support)[None], params, cfg),
                   (cfg.global_dim,))


_chan_idx_cache: dict = {}


def _channel_scatter_idx(full_shape, ch):
    key = (full_shape, ch)
    hit = _chan_idx_cache.get(key)
    if hit is None:
        grid = np.arange(int(np.prod(full_shape)), dtype=np.intp).reshape(full_shape)
        sl = grid[:, :, :, ch]
        if sl.ndim == 3:  # binary head keeps its singleton channel axis
            sl = sl[..., None]
        hit = np.ascontiguousarray(sl)
        _chan_idx_cache[key] = hit
    return hit


def _forward_core(x_data: np.ndarray, fs, params: dict, cfg: ModelConfig,
                  ctx=None, ctx_builder=None, stop_layer=None):
    """Trunk + head. `ctx` (or `ctx_builder` invoked on the query-layer
    features) feeds the second-half layers through per-layer 1x1 projections.
    `stop_layer` returns that trunk layer's post-activation features instead.
    """
    # spatial extents come from the input so sampling can crop to the live rows
    z = cfg.planes
    x01 = Tensor(scale_levels(x_data, cfg))
    bsz, hh, ww = x01.data.shape[0], x01.data.shape[1], x01.data.shape[2]
    fmap_shape = (bsz, hh, ww, z)

    h = conv2d(x01, params["trunk.in.w"], params["trunk.in.b"], 1, "same",
               mask=_mask(7, 7, cfg.channels, z, "A"))
    if fs is not None:
        h = add(h, _inject(fs, params["cond.in.w"], fmap_shape))
    h = relu(h)
    if stop_layer == 0:
        return h

    block_in, skip_sum = h, None
    m3 = _mask(3, 3, z, z, "B")
    for i in range(1, cfg.n_layers + 1):
        t = conv2d(h, params[f"trunk.l{i:02d}.w"], params[f"trunk.l{i:02d}.b"],
                   1, "same", mask=m3)
        if fs is not None:
            t = add(t, _inject(fs, params[f"cond.l{i:02d}.w"], fmap_shape))
        if ctx is not None and i > cfg.query_layer:
            t = add(t, conv2d(ctx, params[f"ctx.l{i:02d}.w"], None, 1, "same"))
        if i % 2 == 1:
            h = relu(t)
        else:
            h = relu(add(block_in, t))
            block_in = h
            sk = conv2d(h, params[f"trunk.skip{i // 2:02d}.w"], None, 1, "same")
            skip_sum = sk if skip_sum is None else add(skip_sum, sk)
        if stop_layer == i:
            return h
        if i == cfg.query_layer and ctx_builder is not None:
            ctx = ctx_builder(h)

    pen_shape = (bsz, hh, ww, cfg.penultimate_planes)
    pen = relu(add(skip_sum,
                   broadcast_to(reshape(params["trunk.pen.b"], (1, 1, 1, -1)),
                                pen_shape)))
    base = conv2d(pen, params["head.out.w"], params["head.out.b"], 1, "same")
    if not cfg.bernoulli:
        base = reshape(base, (bsz, hh, ww, cfg.channels, cfg.value_levels))
    logits = base
    full = logits.data.shape
    for ch in range(1, cfg.channels):
        prev = Tensor(scale_levels(x_data[..., :ch], cfg))
        term = conv2d(prev, params[f"head.prev{ch}.w"], None, 1, "same")
        logits = add(logits,
                     scatter_flat(term, _channel_scatter_idx(full, ch), full))
    return logits


def forward(x, f_s, attn_ctx, params: dict, cfg: ModelConfig) -> Tensor:
    """Per-pixel logits for raw-level input x [B,H,W,C] (teacher forcing)."""
    if attn_ctx is not None and not cfg.attention:
        raise ValueError("forward: attention context given but attention disabled")
    if cfg.attention and attn_ctx is None:
        raise ValueError("forward: attention enabled, attn_ctx required")
    x_data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    return _forward_core(x_data, f_s, params, cfg, ctx=attn_ctx)


def features(x, f_s, params: dict, cfg: ModelConfig, layer=None) -> Tensor:
    """Post-activation trunk features at the query layer (default L)."""
    x_data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    return _forward_core(x_data, f_s, params, cfg,
                         stop_layer=cfg.query_layer if layer is None else layer)


def _as_batch(episodes) -> list:
    return episodes if isinstance(episodes, (list, tuple)) else [episodes]


def _nll_from_logits(logits: Tensor, targets: np.ndarray, cfg: ModelConfig) -> Tensor:
    if cfg.bernoulli:
        return bernoulli_nll(logits, Tensor(targets))
    return categorical_nll(logits, targets.astype(np.intp))


def nll(episodes, params: dict, cfg: ModelConfig) -> Tensor:
    """Mean NLL (nats/dim) of episode targets under the configured variant.

    Pure meta models score targets unconditionally; conditional variants
    encode f(s), and attention variants additionally query the patch memory.
    """
    eps = _as_batch(episodes)
    targets = np.stack([e.target for e in eps])
    fs = None
    if cfg.conditional:
        fs = encode_supports(np.stack([e.support for e in eps]), params, cfg)
    ctx_builder = None
    if cfg.attention:
        from .attention import batch_context_builder

        ctx_builder = batch_context_builder(eps, params, cfg)
    logits = _forward_core(targets, fs, params, cfg, ctx_builder=ctx_builder)
    return _nll_from_logits(logits, targets, cfg)


def conditioning_maps(fs: Tensor, params: dict, cfg: ModelConfig) -> dict:
    """The injected per-layer conditioning bias maps, for inspection."""
    shape = (fs.data.shape[0], cfg.height, cfg.width, cfg.planes)
    names = ["cond.in.w"] + [f"cond.l{i:02d}.w" for i in range(1, cfg.n_layers + 1)]
    return {n: _inject(fs, params[n], shape).data for n in names}


@dataclass
class SampleResult:
    image: np.ndarray  # [H,W,C] raw levels
    log_prob: float  # joint log-likelihood accumulated during sampling
    attn_weights: np.ndarray | None = None  # [H*W, S*K^2] rows, or None


def sample(support: np.ndarray, params: dict, cfg: ModelConfig,
           rng_seed: int) -> SampleResult:
    """Raster-order ancestral sampling of one image given a support set.

    The forward pass at row r is cropped to rows [0, r]: the causal masks
    zero every kernel tap below the current row, so the cropped logits are
    bit-identical to full-image logits.
    """
    rng = np.random.default_rng(rng_seed)
    h, w, c = cfg.height, cfg.width, cfg.channels
    with no_grad():
        fs = None
        if cfg.conditional:
            fs = encode_supports(np.asarray(support)[None], params, cfg)
        memory = None
        if cfg.attention:
            from .attention import attend, augment_support, build_memory

            memory = build_memory(augment_support(np.asarray(support), cfg),
                                  params, cfg)

        x = np.zeros((1, h, w, c))
        logp = 0.0
        weights = np.zeros((h * w, memory.keys.data.shape[0])) if memory else None

        def make_ctx_builder(rows):
            def ctx_builder(feat):
                q = reshape(feat, (rows * w, cfg.planes))
                alpha, context = attend(q, memory, params)
                ctx_builder.alpha = alpha.data
                return reshape(context, (1, rows, w, cfg.attn_channels))

            return ctx_builder

        for r in range(h):
            builder = make_ctx_builder(r + 1) if cfg.attention else None
            for col in range(w):
                for ch in range(c):
                    logits = _forward_core(x[:, : r + 1], fs, params, cfg,
                                           ctx_builder=builder)
                    t = r * w + col
                    if cfg.bernoulli:
                        l = logits.data[0, r, col, ch]
                        p1 = float(sigmoid(Tensor([l])).data[0])
                        val = 1.0 if rng.random() < p1 else 0.0
                        # same stabilized form the nll op uses
                        sp = lambda a: max(a, 0.0) + np.log1p(np.exp(-abs(a)))
                        logp += -sp(-l) if val == 1.0 else -sp(l)
                    else:
                        row = logits.data[0, r, col, ch]
                        pr = softmax_rows(Tensor(row[None, :])).data[0]
                        val = float(np.searchsorted(np.cumsum(pr), rng.random()))
                        val = min(val, cfg.value_levels - 1)
                        m = row.max()
                        logp += row[int(val)] - (m + np.log(np.exp(row - m).sum()))
                    x[0, r, col, ch] = val
                    if weights is not None and ch == 0:
                        weights[t] = builder.alpha[t]
    return SampleResult(image=x[0], log_prob=float(logp), attn_weights=weights)

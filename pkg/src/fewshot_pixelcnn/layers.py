"""Neural building blocks: causal masks, init, RMSProp, per-pixel likelihoods."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    Tensor,
    add,
    logsumexp_rows,
    mul,
    neg,
    reshape,
    softplus,
    sub,
    take_flat,
    tmean,
    tsum,
)


def make_raster_mask(kh: int, kw: int, cin: int, cout: int, kind: str) -> Tensor:
    """Binary conv-kernel mask enforcing raster-order causality.

    Kind A zeroes the center tap and everything raster-later; kind B zeroes
    only strictly raster-later taps. Returned constant tensor is shaped like
    the kernel [kh, kw, cin, cout].
    """
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"make_raster_mask: kernel extents must be odd, got {kh}x{kw}")
    if kind not in ("A", "B"):
        raise ValueError(f"make_raster_mask: unknown kind {kind!r}")
    m = np.zeros((kh, kw, cin, cout))
    ch, cw = kh // 2, kw // 2
    m[:ch, :, :, :] = 1.0
    m[ch, :cw, :, :] = 1.0
    if kind == "B":
        m[ch, cw, :, :] = 1.0
    return Tensor(m)


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def conv_weight(rng: np.random.Generator, kh: int, kw: int, cin: int, cout: int) -> Tensor:
    return glorot_uniform(rng, (kh, kw, cin, cout), kh * kw * cin, kh * kw * cout)


def dense_weight(rng: np.random.Generator, n_in: int, n_out: int) -> Tensor:
    return glorot_uniform(rng, (n_in, n_out), n_in, n_out)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


@dataclass
class OptState:
    """RMSProp state: per-parameter squared-gradient accumulators."""

    lr: float = 1e-4
    decay: float = 0.95
    eps: float = 1e-8
    step: int = 0
    acc: dict = field(default_factory=dict)


def rmsprop_step(params: dict, grads: dict, opt: OptState):
    """One RMSProp update, in place on the parameter buffers.

    acc <- decay*acc + (1-decay)*g^2 ; p <- p - lr*g/sqrt(acc+eps)
    """
    for name in params:
        if name not in grads:
            raise KeyError(f"rmsprop_step: missing gradient for {name!r}")
    for name, p in params.items():
        g = grads[name]
        g = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ValueError(
                f"rmsprop_step: gradient shape {g.shape} != param shape "
                f"{p.data.shape} for {name!r}"
            )
        acc = opt.acc.get(name)
        if acc is None:
            acc = np.zeros_like(p.data)
        acc = opt.decay * acc + (1.0 - opt.decay) * g * g
        opt.acc[name] = acc
        p.data -= opt.lr * g / np.sqrt(acc + opt.eps)
    opt.step += 1
    return params, opt


def bernoulli_nll(logits: Tensor, targets: Tensor) -> Tensor:
    """Mean negative log likelihood (nats per pixel) of binary targets.

    Stabilized as t*softplus(-l) + (1-t)*softplus(l).
    """
    targets = targets if isinstance(targets, Tensor) else Tensor(targets)
    if logits.data.shape != targets.data.shape:
        raise ValueError(
            f"bernoulli_nll: shape mismatch {logits.data.shape} vs {targets.data.shape}"
        )
    if not np.all((targets.data == 0.0) | (targets.data == 1.0)):
        raise ValueError("bernoulli_nll: targets must be binary")
    t = targets.detach()
    pos = mul(t, softplus(neg(logits)))
    rest = mul(sub(1.0, t), softplus(logits))
    return tmean(add(pos, rest))


def categorical_nll(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean NLL in nats per dim: logits [..., V], integer targets [...]."""
    v = logits.data.shape[-1]
    if v < 2:
        raise ValueError(f"categorical_nll: need at least 2 levels, got {v}")
    tgt = np.asarray(targets)
    if tgt.shape != logits.data.shape[:-1]:
        raise ValueError(
            f"categorical_nll: target shape {tgt.shape} != {logits.data.shape[:-1]}"
        )
    tgt = tgt.reshape(-1)
    if np.any(tgt != np.floor(tgt)):
        raise ValueError("categorical_nll: non-integer targets")
    tgt = tgt.astype(np.intp)
    if tgt.min() < 0 or tgt.max() >= v:
        raise ValueError(f"categorical_nll: target out of range [0, {v})")
    rows = logits.data.size // v
    flat = reshape(logits, (rows, v))
    z = logsumexp_rows(flat)
    picked = take_flat(flat, np.arange(rows, dtype=np.intp) * v + tgt)
    return tmean(sub(z, picked))

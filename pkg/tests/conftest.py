import numpy as np
import pytest

from fewshot_pixelcnn.tensor import Tensor


def jitter_params(params: dict, scale: float = 0.05, seed: int = 99) -> dict:
    """Move every parameter (biases included) off relu kinks."""
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.data += rng.normal(scale=scale, size=p.data.shape)
    return params


def finite_diff(f, tensors, step: float = 1e-5, max_entries: int = 8,
                seed: int = 0):
    """Central finite differences of scalar f() w.r.t. listed tensors.

    Returns a list of (tensor, flat_index, fd_value) probes over a random
    subset of entries.
    """
    rng = np.random.default_rng(seed)
    probes = []
    for t in tensors:
        flat = t.data.reshape(-1)
        k = min(max_entries, flat.size)
        for i in rng.choice(flat.size, size=k, replace=False):
            old = flat[i]
            flat[i] = old + step
            fp = f()
            flat[i] = old - step
            fm = f()
            flat[i] = old
            probes.append((t, int(i), (fp - fm) / (2 * step)))
    return probes


def check_grads(f, tensors, grads_map, step: float = 1e-5, tol: float = 1e-4,
                max_entries: int = 8, seed: int = 0) -> float:
    """Assert analytic gradients match central differences; returns worst err."""
    worst = 0.0
    for t, i, fd in finite_diff(f, tensors, step, max_entries, seed):
        g = grads_map.get(t)
        ga = 0.0 if g is None else float(g.data.reshape(-1)[i])
        rel = abs(fd - ga) / max(abs(fd), abs(ga), 1e-6)
        worst = max(worst, rel)
        assert rel < tol, f"grad mismatch at {t}[{i}]: fd={fd} analytic={ga}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def rand_tensor(rng, shape, scale=1.0, grad=True) -> Tensor:
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=grad)


def op_gradient_cases(rng):
    """name -> (scalar builder, wrt tensors) for every differentiable op."""
    from fewshot_pixelcnn.tensor import (
        add, broadcast_to, conv2d, div, exp, l2norm, log, logsumexp_rows,
        matmul, maxpool2x2, mul, neg, relu, reshape, scatter_flat, sigmoid,
        softmax_rows, softplus, sub, take_flat, tanh, tanh_outer_add, tmean,
        tsum,
    )

    a = rand_tensor(rng, (3, 4), scale=0.8)
    b = rand_tensor(rng, (3, 4), scale=0.8)
    pos = Tensor(np.abs(rng.normal(size=(3, 4))) + 0.5, requires_grad=True)
    x4 = rand_tensor(rng, (2, 5, 5, 2), scale=0.8)
    w4 = rand_tensor(rng, (3, 3, 2, 3), scale=0.5)
    idx = rng.integers(0, 12, size=(2, 6)).astype(np.intp)
    idx34 = rng.integers(0, 20, size=(3, 4)).astype(np.intp)
    const44 = Tensor(rng.normal(size=(4, 4)))
    return {
        "add": (lambda: tsum(mul(add(a, b), add(a, b))), [a, b]),
        "sub": (lambda: tsum(mul(sub(a, b), sub(a, b))), [a, b]),
        "mul": (lambda: tsum(tanh(mul(a, b))), [a, b]),
        "div": (lambda: tsum(tanh(div(a, pos))), [a, pos]),
        "tanh": (lambda: tsum(mul(tanh(a), tanh(a))), [a]),
        "sigmoid": (lambda: tsum(mul(sigmoid(a), a)), [a]),
        "relu": (lambda: tsum(mul(relu(a), a)), [a]),
        "log": (lambda: tsum(mul(log(pos), pos)), [pos]),
        "exp": (lambda: tsum(tanh(exp(a))), [a]),
        "neg": (lambda: tsum(mul(neg(a), a)), [a]),
        "softplus": (lambda: tsum(mul(softplus(a), a)), [a]),
        "matmul": (lambda: tsum(tanh(matmul(a, const44))), [a]),
        "conv2d": (lambda: tsum(tanh(conv2d(x4, w4, None, 1, "same"))), [x4, w4]),
        "sum": (lambda: tsum(mul(tsum(a, axes=0, keepdims=True),
                                 tsum(a, axes=0, keepdims=True))), [a]),
        "mean": (lambda: tsum(tanh(tmean(a, axes=1))), [a]),
        "l2norm": (lambda: l2norm(a), [a]),
        "softmax": (lambda: tsum(mul(softmax_rows(a), b)), [a, b]),
        "logsumexp": (lambda: tsum(tanh(logsumexp_rows(a))), [a]),
        "take": (lambda: tsum(tanh(take_flat(a, idx))), [a]),
        "scatter": (lambda: tsum(tanh(scatter_flat(a, idx34, (4, 5)))), [a]),
        "broadcast": (lambda: tsum(tanh(broadcast_to(reshape(tsum(a, 1), (3, 1)),
                                                     (3, 7)))), [a]),
        "maxpool": (lambda: tsum(tanh(maxpool2x2(x4))), [x4]),
        "tanh_outer_add": (lambda: tsum(mul(tanh_outer_add(a, b),
                                            tanh_outer_add(a, b))), [a, b]),
    }

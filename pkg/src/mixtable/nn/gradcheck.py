"""Central finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, backward


def relative_error(analytic, numeric, floor=1e-6):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_grad(fn, inputs, name, eps=1e-3, entries=None):
    """Central differences of scalar ``fn(inputs)`` w.r.t. ``inputs[name]``."""
    x = inputs[name]
    flat = x.reshape(-1)
    idx = range(flat.size) if entries is None else entries
    out = {}
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(fn(inputs))
        flat[i] = orig - eps
        lo = float(fn(inputs))
        flat[i] = orig
        out[i] = (hi - lo) / (2 * eps)
    return out


def check_gradients(fn, arrays, eps=1e-3, max_entries=None, rng=None, floor=1e-6):
    """Compare backprop against central differences.

    ``fn`` maps a dict of Tensors to a scalar Tensor. ``arrays`` holds float64
    arrays by name. With ``max_entries`` only that many randomly chosen entries
    per array are differenced. Returns ``{name: max relative error}``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    arrays = {k: np.array(v, dtype=np.float64, copy=True) for k, v in arrays.items()}
    tensors = {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}
    loss = fn(tensors)
    backward(loss)
    analytic = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()}

    def scalar(arrs):
        return fn({k: Tensor(v) for k, v in arrs.items()}).data

    report = {}
    for name, value in arrays.items():
        size = value.size
        entries = None
        if max_entries is not None and size > max_entries:
            entries = rng.choice(size, size=max_entries, replace=False)
        numeric = numeric_grad(scalar, arrays, name, eps=eps, entries=entries)
        keys = list(numeric)
        a = analytic[name].reshape(-1)[keys]
        n = np.array([numeric[i] for i in keys])
        report[name] = float(relative_error(a, n, floor).max()) if keys else 0.0
    return report

"""Central finite differences for checking hand-written backward passes."""

import hashlib

import numpy as np


def numerical_grad(f, x, eps=1e-5, indices=None):
    """Central-difference gradient of scalar ``f()`` w.r.t. array ``x`` (perturbed in place).

    ``indices`` limits the probe to those flat positions; the result then
    has one entry per index.
    """
    flat = x.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = []
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        out.append((fp - fm) / (2 * eps))
    out = np.array(out)
    return out.reshape(x.shape) if indices is None else out


def rel_error(analytic, numeric, floor=1e-6):
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def activation_pattern(net):
    """Digest of every ReLU mask and max-pool argmax cached by the last forward pass."""
    from .layers import MaxPool2d, ReLU

    h = hashlib.sha256()
    for _, layer in net._leaves():
        if isinstance(layer, ReLU) and layer._cache is not None:
            h.update(np.packbits(layer._cache).tobytes())
        elif isinstance(layer, MaxPool2d) and layer._cache is not None:
            h.update(layer._cache[1].tobytes())
    return h.digest()


def clear_caches(net):
    for _, layer in net._leaves():
        layer._cache = None
    for _, layer in net.layers:
        layer._cache = None


def network_numerical_grad(net, loss_fn, x, index, eps_schedule=(1e-5, 1e-6, 1e-7)):
    """Central difference of ``loss_fn()`` w.r.t. ``x.flat[index]`` that avoids kinks.

    ReLU and max pool are piecewise linear; a probe that moves any
    pre-activation across zero (or changes a pool winner) measures a chord
    across the kink instead of the derivative. Each step in
    ``eps_schedule`` is tried until both probes keep the activation pattern
    of the unperturbed point. Returns ``(grad, eps_used, clean)``.
    """
    flat = x.reshape(-1)
    old = flat[index]
    loss_fn()
    base = activation_pattern(net)
    clear_caches(net)
    g = eps = None
    for eps in eps_schedule:
        flat[index] = old + eps
        fp = loss_fn()
        pp = activation_pattern(net)
        clear_caches(net)
        flat[index] = old - eps
        fm = loss_fn()
        pm = activation_pattern(net)
        clear_caches(net)
        flat[index] = old
        g = (fp - fm) / (2 * eps)
        if pp == base and pm == base:
            return g, eps, True
    return g, eps, False

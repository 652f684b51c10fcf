"""Hot inner loops, each with a numba and a pure-numpy implementation.

The backend is chosen once at import time from ``DWIC_BACKEND``
(``numba`` or ``numpy``). When unset, numba is used if it imports.
Both implementations of a kernel accumulate in the same order, so they
return bit-identical results; ``tests/test_kernels.py`` holds them to that.
"""

import os

import numpy as np

try:
    import numba
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

_requested = os.environ.get("DWIC_BACKEND", "").strip().lower()
if _requested not in ("", "numba", "numpy"):
    raise ImportError(f"DWIC_BACKEND must be 'numba' or 'numpy', got {_requested!r}")
BACKEND = "numpy" if (_requested == "numpy" or not HAVE_NUMBA) else "numba"


def conv_out_size(size, kernel, stride, pad):
    return (size + 2 * pad - kernel) // stride + 1


# ---------------------------------------------------------------------------
# im2col / col2im
# ---------------------------------------------------------------------------

def im2col_numpy(x, k, stride, pad):
    n, c, h, w = x.shape
    oh = conv_out_size(h, k, stride, pad)
    ow = conv_out_size(w, k, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    sn, sc, sh, sw = x.strides
    win = np.lib.stride_tricks.as_strided(
        x, (n, oh, ow, c, k, k), (sn, stride * sh, stride * sw, sc, sh, sw), writeable=False
    )
    return win.reshape(n * oh * ow, c * k * k)


def col2im_numpy(cols, x_shape, k, stride, pad):
    n, c, h, w = x_shape
    oh = conv_out_size(h, k, stride, pad)
    ow = conv_out_size(w, k, stride, pad)
    d = cols.reshape(n, oh, ow, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    dx = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for ki in range(k):
        for kj in range(k):
            dx[:, :, ki:ki + stride * (oh - 1) + 1:stride, kj:kj + stride * (ow - 1) + 1:stride] += d[:, :, ki, kj]
    if pad:
        dx = dx[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(dx)


# ---------------------------------------------------------------------------
# max pooling (argmax is the first maximum in row-major window order)
# ---------------------------------------------------------------------------

def maxpool_forward_numpy(x, k, stride, pad):
    n, c, h, w = x.shape
    oh = conv_out_size(h, k, stride, pad)
    ow = conv_out_size(w, k, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf)
    sn, sc, sh, sw = x.strides
    win = np.lib.stride_tricks.as_strided(
        x, (n, c, oh, ow, k, k), (sn, sc, stride * sh, stride * sw, sh, sw), writeable=False
    ).reshape(n, c, oh, ow, k * k)
    arg = np.argmax(win, axis=-1).astype(np.int32)
    out = np.take_along_axis(win, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def maxpool_backward_numpy(dout, arg, x_shape, k, stride, pad):
    n, c, h, w = x_shape
    oh, ow = dout.shape[2], dout.shape[3]
    dx = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dout.dtype)
    for ki in range(k):
        for kj in range(k):
            contrib = np.where(arg == ki * k + kj, dout, 0).astype(dout.dtype)
            dx[:, :, ki:ki + stride * (oh - 1) + 1:stride, kj:kj + stride * (ow - 1) + 1:stride] += contrib
    if pad:
        dx = dx[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(dx)


# ---------------------------------------------------------------------------
# CART split search on binary labels
# ---------------------------------------------------------------------------

def best_split_numpy(X, y, min_leaf):
    """Best Gini split over the columns of ``X`` for 0/1 labels ``y``.

    Returns ``(column, threshold, score)`` where ``score`` is the weighted
    impurity ``n_l*gini_l + n_r*gini_r`` (lower is better), or
    ``(-1, 0.0, inf)`` when no column admits a split.
    """
    n, m = X.shape
    best_col, best_thr, best_score = -1, 0.0, np.inf
    total1 = float(y.sum())
    for j in range(m):
        order = np.argsort(X[:, j], kind="stable")
        xs = X[order, j]
        ys = y[order].astype(np.float64)
        l1 = np.cumsum(ys)[:-1]
        nl = np.arange(1, n, dtype=np.float64)
        nr = n - nl
        l0 = nl - l1
        r1 = total1 - l1
        r0 = nr - r1
        score = (nl - (l0 * l0 + l1 * l1) / nl) + (nr - (r0 * r0 + r1 * r1) / nr)
        ok = (xs[:-1] < xs[1:]) & (nl >= min_leaf) & (nr >= min_leaf)
        if not ok.any():
            continue
        score = np.where(ok, score, np.inf)
        i = int(np.argmin(score))
        if score[i] < best_score:
            best_score = float(score[i])
            best_col = j
            best_thr = float(xs[i] + (xs[i + 1] - xs[i]) / 2.0)
    return best_col, best_thr, best_score


def tree_apply_numpy(X, feature, threshold, left, right):
    """Leaf index reached by each row of ``X``."""
    node = np.zeros(X.shape[0], dtype=np.int64)
    active = feature[node] >= 0
    rows = np.arange(X.shape[0])
    while active.any():
        f = feature[node[active]]
        go_left = X[rows[active], f] <= threshold[node[active]]
        node[active] = np.where(go_left, left[node[active]], right[node[active]])
        active = feature[node] >= 0
    return node


# ---------------------------------------------------------------------------
# concordant-pair counting for the Mann-Whitney statistic
# ---------------------------------------------------------------------------

def pair_counts_numpy(pos, neg):
    """(#pos > neg, #ties) over all positive/negative pairs."""
    greater = 0
    ties = 0
    for p in pos:
        greater += int(np.count_nonzero(p > neg))
        ties += int(np.count_nonzero(p == neg))
    return greater, ties


if HAVE_NUMBA:

    @njit(cache=True)
    def im2col_numba(x, k, stride, pad):
        n, c, h, w = x.shape
        oh = (h + 2 * pad - k) // stride + 1
        ow = (w + 2 * pad - k) // stride + 1
        cols = np.zeros((n * oh * ow, c * k * k), dtype=x.dtype)
        for b in range(n):
            for i in range(oh):
                for j in range(ow):
                    row = (b * oh + i) * ow + j
                    for ch in range(c):
                        for ki in range(k):
                            hi = i * stride + ki - pad
                            if hi < 0 or hi >= h:
                                continue
                            for kj in range(k):
                                wj = j * stride + kj - pad
                                if wj < 0 or wj >= w:
                                    continue
                                cols[row, (ch * k + ki) * k + kj] = x[b, ch, hi, wj]
        return cols

    @njit(cache=True)
    def _col2im_numba(cols, n, c, h, w, k, stride, pad):
        oh = (h + 2 * pad - k) // stride + 1
        ow = (w + 2 * pad - k) // stride + 1
        dx = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
        for b in range(n):
            for ch in range(c):
                for ki in range(k):
                    for kj in range(k):
                        col = (ch * k + ki) * k + kj
                        for i in range(oh):
                            for j in range(ow):
                                dx[b, ch, i * stride + ki, j * stride + kj] += cols[(b * oh + i) * ow + j, col]
        return dx

    def col2im_numba(cols, x_shape, k, stride, pad):
        n, c, h, w = x_shape
        dx = _col2im_numba(np.ascontiguousarray(cols), n, c, h, w, k, stride, pad)
        if pad:
            dx = dx[:, :, pad:-pad, pad:-pad]
        return np.ascontiguousarray(dx)

    @njit(cache=True)
    def maxpool_forward_numba(x, k, stride, pad):
        n, c, h, w = x.shape
        oh = (h + 2 * pad - k) // stride + 1
        ow = (w + 2 * pad - k) // stride + 1
        out = np.empty((n, c, oh, ow), dtype=x.dtype)
        arg = np.empty((n, c, oh, ow), dtype=np.int32)
        for b in range(n):
            for ch in range(c):
                for i in range(oh):
                    for j in range(ow):
                        best = -np.inf
                        besti = 0
                        for ki in range(k):
                            hi = i * stride + ki - pad
                            for kj in range(k):
                                wj = j * stride + kj - pad
                                if hi < 0 or hi >= h or wj < 0 or wj >= w:
                                    v = -np.inf
                                else:
                                    v = x[b, ch, hi, wj]
                                if v > best or (ki == 0 and kj == 0):
                                    best = v
                                    besti = ki * k + kj
                        out[b, ch, i, j] = best
                        arg[b, ch, i, j] = besti
        return out, arg

    @njit(cache=True)
    def _maxpool_backward_numba(dout, arg, n, c, h, w, k, stride, pad):
        oh = dout.shape[2]
        ow = dout.shape[3]
        dx = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dout.dtype)
        for b in range(n):
            for ch in range(c):
                for ki in range(k):
                    for kj in range(k):
                        idx = ki * k + kj
                        for i in range(oh):
                            for j in range(ow):
                                if arg[b, ch, i, j] == idx:
                                    dx[b, ch, i * stride + ki, j * stride + kj] += dout[b, ch, i, j]
        return dx

    def maxpool_backward_numba(dout, arg, x_shape, k, stride, pad):
        n, c, h, w = x_shape
        dx = _maxpool_backward_numba(np.ascontiguousarray(dout), arg, n, c, h, w, k, stride, pad)
        if pad:
            dx = dx[:, :, pad:-pad, pad:-pad]
        return np.ascontiguousarray(dx)

    @njit(cache=True)
    def best_split_numba(X, y, min_leaf):
        n, m = X.shape
        best_col = -1
        best_thr = 0.0
        best_score = np.inf
        total1 = 0.0
        for i in range(n):
            total1 += y[i]
        for j in range(m):
            order = np.argsort(X[:, j], kind="mergesort")
            l1 = 0.0
            col_best = np.inf
            col_i = -1
            for i in range(n - 1):
                l1 += y[order[i]]
                nl = float(i + 1)
                nr = n - nl
                if nl < min_leaf or nr < min_leaf:
                    continue
                if not X[order[i], j] < X[order[i + 1], j]:
                    continue
                l0 = nl - l1
                r1 = total1 - l1
                r0 = nr - r1
                score = (nl - (l0 * l0 + l1 * l1) / nl) + (nr - (r0 * r0 + r1 * r1) / nr)
                if score < col_best:
                    col_best = score
                    col_i = i
            if col_i >= 0 and col_best < best_score:
                a = X[order[col_i], j]
                b = X[order[col_i + 1], j]
                best_score = col_best
                best_col = j
                best_thr = a + (b - a) / 2.0
        return best_col, best_thr, best_score

    @njit(cache=True)
    def tree_apply_numba(X, feature, threshold, left, right):
        out = np.empty(X.shape[0], dtype=np.int64)
        for r in range(X.shape[0]):
            node = 0
            while feature[node] >= 0:
                if X[r, feature[node]] <= threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            out[r] = node
        return out

    @njit(cache=True)
    def _pair_counts_numba(pos, neg):
        greater = 0
        ties = 0
        for p in pos:
            for q in neg:
                if p > q:
                    greater += 1
                elif p == q:
                    ties += 1
        return greater, ties

    def pair_counts_numba(pos, neg):
        g, t = _pair_counts_numba(np.asarray(pos, dtype=np.float64), np.asarray(neg, dtype=np.float64))
        return int(g), int(t)


_IMPLS = {
    name: {"numpy": globals()[f"{name}_numpy"], "numba": globals().get(f"{name}_numba")}
    for name in ("im2col", "col2im", "maxpool_forward", "maxpool_backward",
                 "best_split", "tree_apply", "pair_counts")
}


def get(name, backend=None):
    """Kernel ``name`` for ``backend`` (defaults to the active backend)."""
    backend = backend or BACKEND
    fn = _IMPLS[name][backend]
    if fn is None:
        raise RuntimeError(f"kernel {name!r} has no {backend} implementation (numba missing?)")
    return fn


def im2col(x, k, stride, pad):
    return get("im2col")(np.ascontiguousarray(x), k, stride, pad)


def col2im(cols, x_shape, k, stride, pad):
    return get("col2im")(cols, tuple(x_shape), k, stride, pad)


def maxpool_forward(x, k, stride, pad):
    return get("maxpool_forward")(np.ascontiguousarray(x), k, stride, pad)


def maxpool_backward(dout, arg, x_shape, k, stride, pad):
    return get("maxpool_backward")(dout, arg, tuple(x_shape), k, stride, pad)


def best_split(X, y, min_leaf=1):
    return get("best_split")(np.ascontiguousarray(X, dtype=np.float64),
                             np.ascontiguousarray(y, dtype=np.float64), min_leaf)


def tree_apply(X, feature, threshold, left, right):
    return get("tree_apply")(np.ascontiguousarray(X, dtype=np.float64), feature, threshold, left, right)


def pair_counts(pos, neg):
    return get("pair_counts")(pos, neg)

"""Slow, obviously-correct reference implementations used only by tests."""

import itertools

import numpy as np


def conv2d_loops(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for ni, oi, i, j in itertools.product(range(n), range(o), range(oh), range(ow)):
        acc = 0.0 if b is None else float(b[oi])
        for ci, di, dj in itertools.product(range(c), range(k), range(k)):
            acc += float(xp[ni, ci, i * stride + di, j * stride + dj]) * float(w[oi, ci, di, dj])
        out[ni, oi, i, j] = acc
    return out


def maxpool_loops(x, k, stride, pad):
    n, c, h, w = x.shape
    xp = np.full((n, c, h + 2 * pad, w + 2 * pad), -np.inf)
    xp[:, :, pad:pad + h, pad:pad + w] = x
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    out = np.zeros((n, c, oh, ow))
    for ni, ci, i, j in itertools.product(range(n), range(c), range(oh), range(ow)):
        out[ni, ci, i, j] = xp[ni, ci, i * stride:i * stride + k, j * stride:j * stride + k].max()
    return out


def avgpool_loops(x, k, stride):
    n, c, h, w = x.shape
    oh, ow = (h - k) // stride + 1, (w - k) // stride + 1
    out = np.zeros((n, c, oh, ow))
    for ni, ci, i, j in itertools.product(range(n), range(c), range(oh), range(ow)):
        out[ni, ci, i, j] = x[ni, ci, i * stride:i * stride + k, j * stride:j * stride + k].mean()
    return out


def mann_whitney_pairs(scores, labels):
    """P(score_pos > score_neg) + 0.5 P(tie) by explicit pair enumeration."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def first_order_stats(values, sixth):
    """The nine set statistics written out term by term from their definitions."""
    v = [float(a) for a in values]
    if not v:
        return [0.0] * 9
    n = len(v)
    mean = sum(v) / n
    m2 = sum((a - mean) ** 2 for a in v) / n
    m3 = sum((a - mean) ** 3 for a in v) / n
    m4 = sum((a - mean) ** 4 for a in v) / n
    if n < 2 or m2 < 1e-20:
        m2 = skew = kurt = 0.0
    else:
        skew = m3 / m2 ** 1.5
        kurt = m4 / m2 ** 2 - 3.0
    s = sorted(v)
    median = s[n // 2] if n % 2 else (s[n // 2 - 1] + s[n // 2]) / 2
    extreme = max(v) if sixth == "max" else min(v)
    return [mean, m2 ** 0.5, m2, median, sum(v), extreme, skew, kurt, max(v) - min(v)]


def gini_split_bruteforce(X, y, min_leaf=1):
    """Lowest ``n_l*gini_l + n_r*gini_r`` over all columns and midpoints, by enumeration."""
    best = (np.inf, -1, 0.0)
    n = len(y)
    for j in range(X.shape[1]):
        vals = sorted(set(X[:, j].tolist()))
        for a, b in zip(vals[:-1], vals[1:]):
            thr = a + (b - a) / 2.0
            left = y[X[:, j] <= thr]
            right = y[X[:, j] > thr]
            if len(left) < min_leaf or len(right) < min_leaf:
                continue
            score = 0.0
            for part in (left, right):
                p1 = part.mean()
                score += len(part) * (1 - p1 ** 2 - (1 - p1) ** 2)
            if score < best[0] - 1e-12:
                best = (score, j, thr)
    assert n > 0
    return best

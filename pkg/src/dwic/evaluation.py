"""ROC analysis: curves, AUC, bootstrap intervals, paired tests, PPV/NPV."""

import dataclasses

import numpy as np
from scipy.stats import rankdata

from . import _kernels as K


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores for {labels.size} labels")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    labels = labels.astype(np.int64)
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise ValueError("both classes must be present")
    return scores, labels


@dataclasses.dataclass
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float
    n_pos: int
    n_neg: int
    ci95: tuple = None


def roc(scores, labels):
    """Unique-threshold ROC sweep, predicting positive when ``score >= threshold``.

    The first point is ``(+inf, 0, 0)``; tied scores move the curve in one
    diagonal step. The AUC is the trapezoid area, accumulated in integer
    counts so it is exact up to the final division.
    """
    scores, labels = _check_binary(scores, labels)
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    last = np.r_[s[1:] != s[:-1], True]
    tp = np.r_[0, tp[last]]
    fp = np.r_[0, fp[last]]
    thr = np.r_[np.inf, s[last]]
    n_pos, n_neg = int(tp[-1]), int(fp[-1])
    twice_area = int(np.sum((fp[1:] - fp[:-1]) * (tp[1:] + tp[:-1])))
    auc = twice_area / (2 * n_pos * n_neg)
    return RocCurve(thr, fp / n_neg, tp / n_pos, auc, n_pos, n_neg)


def auc_mann_whitney(scores, labels):
    """``(#concordant + ties/2) / (n_pos * n_neg)`` by direct pair counting."""
    scores, labels = _check_binary(scores, labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    greater, ties = K.pair_counts(pos, neg)
    return (2 * greater + ties) / (2 * pos.size * neg.size)


def _rank_auc(scores, labels):
    """Row-wise AUC from mid-ranks for 2-D ``scores``/``labels``."""
    ranks = rankdata(scores, axis=-1)
    n_pos = labels.sum(axis=-1)
    n_neg = labels.shape[-1] - n_pos
    r_pos = (ranks * labels).sum(axis=-1)
    return (r_pos - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)


def _stratified_indices(labels, n_boot, rng):
    """``(n_boot, n)`` resample indices drawing each class with replacement from itself."""
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    return np.concatenate([pos[rng.integers(0, pos.size, (n_boot, pos.size))],
                           neg[rng.integers(0, neg.size, (n_boot, neg.size))]], axis=1)


def bootstrap_aucs(scores, labels, n_boot=2000, seed=0, chunk=500):
    scores, labels = _check_binary(scores, labels)
    rng = np.random.default_rng(seed)
    out = []
    for start in range(0, n_boot, chunk):
        idx = _stratified_indices(labels, min(chunk, n_boot - start), rng)
        out.append(_rank_auc(scores[idx], labels[idx]))
    return np.concatenate(out)


def bootstrap_ci(scores, labels, n_boot=2000, level=0.95, seed=0):
    """Percentile interval of the AUC over stratified resamples.

    Resampling within each class keeps both classes present, so no
    resample is degenerate.
    """
    aucs = bootstrap_aucs(scores, labels, n_boot, seed)
    alpha = (1 - level) / 2
    lo, hi = np.quantile(aucs, [alpha, 1 - alpha])
    return float(lo), float(hi)


def paired_auc_test(scores_a, scores_b, labels, n_resamples=2000, seed=0):
    """Two-tailed paired bootstrap p-value for ``AUC(a) - AUC(b)``.

    Both score vectors are resampled with the same indices. The p-value is
    twice the fraction of resampled differences on the far side of zero
    from the observed difference, clipped to 1.
    """
    a, labels_a = _check_binary(scores_a, labels)
    b, _ = _check_binary(scores_b, labels)
    observed = roc(a, labels_a).auc - roc(b, labels_a).auc
    rng = np.random.default_rng(seed)
    diffs = []
    for start in range(0, n_resamples, 500):
        idx = _stratified_indices(labels_a, min(500, n_resamples - start), rng)
        lab = labels_a[idx]
        diffs.append(_rank_auc(a[idx], lab) - _rank_auc(b[idx], lab))
    d = np.concatenate(diffs)
    tail = np.mean(d <= 0) if observed >= 0 else np.mean(d >= 0)
    return float(min(1.0, 2 * tail))


def ppv_npv(scores, labels, threshold):
    """``(ppv, npv, sensitivity, specificity)`` predicting positive at ``score >= threshold``.

    Ratios with a zero denominator are ``None``.
    """
    if not np.isfinite(threshold):
        raise ValueError("threshold must be finite")
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    pred = scores >= threshold
    tp = int(np.sum(pred & (labels == 1)))
    fp = int(np.sum(pred & (labels == 0)))
    tn = int(np.sum(~pred & (labels == 0)))
    fn = int(np.sum(~pred & (labels == 1)))

    def ratio(a, b):
        return a / (a + b) if a + b else None

    return ratio(tp, fp), ratio(tn, fn), ratio(tp, fn), ratio(tn, fp)


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------

def _fmt(v):
    return repr(float(v))


def write_roc_csv(path, curve, comment=None):
    with open(path, "w") as f:
        if comment:
            f.write(f"# {comment}\n")
        f.write("threshold,fpr,tpr\n")
        for t, x, y in zip(curve.thresholds, curve.fpr, curve.tpr):
            f.write(f"{_fmt(t)},{_fmt(x)},{_fmt(y)}\n")


def read_roc_csv(path):
    rows = []
    with open(path) as f:
        for line in f:
            if line.startswith("#") or line.startswith("threshold"):
                continue
            rows.append(tuple(float(v) for v in line.strip().split(",")))
    return rows


def write_summary(path, curve, comment=None):
    lo, hi = curve.ci95 if curve.ci95 else (float("nan"), float("nan"))
    with open(path, "w") as f:
        if comment:
            f.write(f"# {comment}\n")
        f.write("auc,ci_lo,ci_hi,n_pos,n_neg\n")
        f.write(f"{_fmt(curve.auc)},{_fmt(lo)},{_fmt(hi)},{curve.n_pos},{curve.n_neg}\n")


def read_summary(path):
    with open(path) as f:
        lines = [ln.strip() for ln in f if not ln.startswith("#")]
    keys = lines[0].split(",")
    vals = lines[1].split(",")
    return {k: (int(v) if k.startswith("n_") else float(v)) for k, v in zip(keys, vals)}


def roc_svg(curves, title="ROC", size=400, comment=None):
    """Self-contained SVG with one polyline per ``(label, RocCurve)``.

    Polyline vertices are the curve's ``(fpr, tpr)`` points in plot units
    (x = fpr*size, y = (1-tpr)*size) with every point kept.
    """
    pad = 40
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size + 2 * pad}" height="{size + 2 * pad}" '
             f'viewBox="{-pad} {-pad} {size + 2 * pad} {size + 2 * pad}">']
    if comment:
        parts.append(f"<!-- {comment} -->")
    parts.append(f'<text x="{size / 2}" y="-15" text-anchor="middle" font-size="14">{title}</text>')
    parts.append(f'<rect x="0" y="0" width="{size}" height="{size}" fill="none" stroke="black"/>')
    parts.append(f'<line x1="0" y1="{size}" x2="{size}" y2="0" stroke="#999" stroke-dasharray="4"/>')
    parts.append(f'<text x="{size / 2}" y="{size + 30}" text-anchor="middle" font-size="12">false positive rate</text>')
    parts.append(f'<text x="-25" y="{size / 2}" text-anchor="middle" font-size="12" '
                 f'transform="rotate(-90 -25 {size / 2})">true positive rate</text>')
    for i, (label, curve) in enumerate(curves):
        pts = " ".join(f"{_fmt(x * size)},{_fmt((1 - y) * size)}" for x, y in zip(curve.fpr, curve.tpr))
        color = colors[i % len(colors)]
        parts.append(f'<polyline data-label="{label}" fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        parts.append(f'<text x="{size - 10}" y="{size - 10 - 16 * i}" text-anchor="end" font-size="12" '
                     f'fill="{color}">{label} (AUC {curve.auc:.3f})</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"

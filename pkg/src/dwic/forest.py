"""CART trees and random forests for binary labels, plus Gini-importance feature ranking."""

import dataclasses
import io
import struct

import numpy as np

from . import _kernels as K


@dataclasses.dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 200
    max_depth: int = None  # None grows until leaves are pure
    min_samples_leaf: int = 1
    mtry: object = "sqrt"  # "sqrt", "all", or an int
    bootstrap: bool = True

    def n_candidates(self, p):
        if self.mtry == "sqrt":
            return max(1, int(np.ceil(np.sqrt(p))))
        if self.mtry == "all":
            return p
        return max(1, min(int(self.mtry), p))


@dataclasses.dataclass
class Tree:
    """Flattened binary tree; ``feature == -1`` marks a leaf.

    ``counts[i]`` holds the (negative, positive) sample counts that reached
    node ``i`` during training. Rows go left when ``x[feature] <= threshold``.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray

    @property
    def n_nodes(self):
        return self.feature.size

    def apply(self, X):
        return K.tree_apply(X, self.feature, self.threshold, self.left, self.right)

    def votes(self, X):
        """1 where the leaf majority is positive, 0 where negative, 0.5 on a tie."""
        c = self.counts[self.apply(X)]
        return np.where(c[:, 1] > c[:, 0], 1.0, np.where(c[:, 1] < c[:, 0], 0.0, 0.5))


def _gini_mass(c0, c1):
    n = c0 + c1
    return n - (c0 * c0 + c1 * c1) / n if n else 0.0


def build_tree(X, y, cfg, rng):
    """Grow one CART tree on ``(X, y)``; returns ``(Tree, importance)``.

    ``importance[j]`` is the total weighted Gini decrease of splits on
    column ``j``. At each node ``cfg.n_candidates`` columns are tried in a
    random order; if none of them separates the node, the remaining
    columns are tried before giving up.
    """
    n, p = X.shape
    m = cfg.n_candidates(p)
    feature, threshold, left, right, counts = [], [], [], [], []
    importance = np.zeros(p)
    yf = y.astype(np.float64)

    def new_node(idx):
        c1 = float(yf[idx].sum())
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        counts.append((idx.size - c1, c1))
        return len(feature) - 1

    stack = [(new_node(np.arange(n)), np.arange(n), 0)]
    while stack:
        node, idx, depth = stack.pop()
        c0, c1 = counts[node]
        if c0 == 0 or c1 == 0 or idx.size < 2 * cfg.min_samples_leaf:
            continue
        if cfg.max_depth is not None and depth >= cfg.max_depth:
            continue
        order = rng.permutation(p)
        col, thr, score = -1, 0.0, np.inf
        for cand in (order[:m], order[m:]):
            if cand.size == 0:
                continue
            j, t, s = K.best_split(X[np.ix_(idx, cand)], yf[idx], cfg.min_samples_leaf)
            if j >= 0:
                col, thr, score = int(cand[j]), t, s
                break
        if col < 0:
            continue
        importance[col] += _gini_mass(c0, c1) - score
        go_left = X[idx, col] <= thr
        li, ri = idx[go_left], idx[~go_left]
        feature[node], threshold[node] = col, thr
        left[node] = new_node(li)
        right[node] = new_node(ri)
        # right pushed first so the left subtree is numbered first
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))
    tree = Tree(np.array(feature, dtype=np.int32), np.array(threshold, dtype=np.float64),
                np.array(left, dtype=np.int32), np.array(right, dtype=np.int32),
                np.array(counts, dtype=np.float64).reshape(-1, 2))
    return tree, importance


def _check_xy(X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError(f"X {X.shape} does not match {y.shape[0]} labels")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    y = y.astype(np.int64)
    if y.min() == y.max():
        raise ValueError("training data contains a single class")
    return X, y


@dataclasses.dataclass
class ForestModel:
    trees: list
    selected: np.ndarray  # columns of the full feature vector the trees read
    n_features: int  # width of the full feature vector
    config: ForestConfig
    seed: int
    importances: np.ndarray = None  # per selected column, mean normalized Gini decrease

    def _columns(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        return X[:, self.selected]

    def predict_proba(self, X):
        """Fraction of trees whose leaf majority is positive (ties count half)."""
        Xs = self._columns(X)
        return np.mean([t.votes(Xs) for t in self.trees], axis=0)


def _tree_seeds(seed, n):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def forest_train(X, y, selected=None, cfg=ForestConfig(), seed=0):
    """Bagged CART forest on columns ``selected`` of ``X`` (all columns when None)."""
    X, y = _check_xy(X, y)
    if np.bincount(y, minlength=2).min() < 2:
        raise ValueError("need at least 2 samples per class")
    selected = np.arange(X.shape[1]) if selected is None else np.asarray(selected, dtype=np.int64)
    Xs = X[:, selected]
    n = Xs.shape[0]
    trees = []
    imp = np.zeros(selected.size)
    for rng in _tree_seeds(seed, cfg.n_trees):
        rows = rng.integers(0, n, n) if cfg.bootstrap else np.arange(n)
        tree, ti = build_tree(Xs[rows], y[rows], cfg, rng)
        trees.append(tree)
        if ti.sum() > 0:
            imp += ti / ti.sum()
    return ForestModel(trees, selected, X.shape[1], cfg, seed, imp / cfg.n_trees)


def forest_predict_proba(model, X):
    return model.predict_proba(X)


def feature_importances(X, y, n_trees=100, seed=0, mtry="sqrt"):
    """Mean per-tree-normalized Gini importance from a bagged ensemble."""
    model = forest_train(X, y, None, ForestConfig(n_trees=n_trees, mtry=mtry), seed)
    return model.importances


def rank_features(importances):
    """Column indices by decreasing importance, ties to the lower index."""
    return np.argsort(-np.asarray(importances), kind="stable")


def stratified_folds(y, n_folds, seed=0):
    """Fold id per sample, dealing each class round-robin after a seeded shuffle."""
    y = np.asarray(y)
    rng = np.random.default_rng(seed)
    fold = np.empty(y.size, dtype=np.int64)
    for c in (0, 1):
        idx = np.flatnonzero(y == c)
        idx = idx[rng.permutation(idx.size)]
        fold[idx] = np.arange(idx.size) % n_folds
    return fold


def effective_folds(y, cv_folds):
    """``cv_folds`` capped by the minority class size (at least 2)."""
    minority = int(np.bincount(np.asarray(y, dtype=np.int64), minlength=2).min())
    if minority < 2:
        raise ValueError("cross-validation needs at least 2 samples per class")
    return min(cv_folds, minority)


def cv_auc_for_k(X, y, k, cv_folds=10, seed=0, selector_trees=100, forest_cfg=ForestConfig()):
    """Cross-validated AUC of forest-on-top-k, ranking features inside each training fold."""
    from .evaluation import roc

    X, y = _check_xy(X, y)
    folds = effective_folds(y, cv_folds)
    fold = stratified_folds(y, folds, seed)
    scores = np.zeros(y.size)
    for f in range(folds):
        tr, te = fold != f, fold == f
        ytr = y[tr]
        if ytr.min() == ytr.max() or np.bincount(ytr, minlength=2).min() < 2:
            scores[te] = ytr.mean()
            continue
        top = rank_features(feature_importances(X[tr], ytr, selector_trees, seed + f))[:k]
        model = forest_train(X[tr], ytr, top, forest_cfg, seed + f)
        scores[te] = model.predict_proba(X[te])
    return roc(scores, y).auc


def select_features(X, y, k=26, seed=0, n_trees=100, k_grid=None, cv_folds=10,
                    forest_cfg=ForestConfig(n_trees=100)):
    """Top-``k`` columns by bagged-tree Gini importance, returned sorted by rank.

    With ``k_grid`` the size is instead chosen by cross-validated AUC over
    the grid (first best wins). ``k`` larger than the number of columns is
    capped. Constant columns never split and so rank last.
    Returns ``(indices, k_used)``.
    """
    X, y = _check_xy(X, y)
    if k_grid:
        aucs = [cv_auc_for_k(X, y, min(kk, X.shape[1]), cv_folds, seed, n_trees, forest_cfg) for kk in k_grid]
        k = list(k_grid)[int(np.argmax(aucs))]
    k = min(int(k), X.shape[1])
    order = rank_features(feature_importances(X, y, n_trees, seed))
    return order[:k], k


# ---------------------------------------------------------------------------
# forest files
# ---------------------------------------------------------------------------

FOREST_MAGIC = b"PRFM"
FOREST_VERSION = 1


def forest_bytes(model, meta=""):
    buf = io.BytesIO()
    buf.write(FOREST_MAGIC)
    mb = meta.encode("utf-8")
    cfg = model.config
    mtry = {"sqrt": -1, "all": -2}.get(cfg.mtry, cfg.mtry)
    buf.write(struct.pack("<I", FOREST_VERSION))
    buf.write(struct.pack("<I", len(mb)))
    buf.write(mb)
    buf.write(struct.pack("<qiiiiI", model.seed, -1 if cfg.max_depth is None else cfg.max_depth,
                          cfg.min_samples_leaf, int(mtry), int(cfg.bootstrap), model.n_features))
    buf.write(struct.pack("<I", model.selected.size))
    buf.write(np.asarray(model.selected, dtype="<i4").tobytes())
    buf.write(struct.pack("<I", len(model.trees)))
    for t in model.trees:
        buf.write(struct.pack("<I", t.n_nodes))
        buf.write(t.feature.astype("<i4").tobytes())
        buf.write(t.threshold.astype("<f8").tobytes())
        buf.write(t.left.astype("<i4").tobytes())
        buf.write(t.right.astype("<i4").tobytes())
        buf.write(t.counts.astype("<f8").tobytes())
    return buf.getvalue()


def save_forest(path, model, meta=""):
    with open(path, "wb") as f:
        f.write(forest_bytes(model, meta))


class ForestFormatError(ValueError):
    pass


def load_forest(path):
    """Returns ``(ForestModel, meta)``; importances are not stored."""
    with open(path, "rb") as f:
        raw = f.read()
    try:
        return _parse_forest(raw, path)
    except (struct.error, UnicodeDecodeError) as exc:
        raise ForestFormatError(f"{path}: truncated or corrupt forest file ({exc})") from None
    except ForestFormatError:
        raise
    except ValueError as exc:
        raise ForestFormatError(f"{path}: corrupt forest file ({exc})") from None


def _parse_forest(raw, path):
    if raw[:4] != FOREST_MAGIC:
        raise ForestFormatError(f"{path}: not a forest file")
    pos = 4

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, raw, pos)
        pos += struct.calcsize(fmt)
        return vals

    def arr(dtype, count):
        nonlocal pos
        a = np.frombuffer(raw, dtype=dtype, count=count, offset=pos).copy()
        pos += a.nbytes
        return a

    (version,) = take("<I")
    if version != FOREST_VERSION:
        raise ForestFormatError(f"{path}: unsupported forest version {version}")
    (mlen,) = take("<I")
    meta = raw[pos:pos + mlen].decode("utf-8")
    pos += mlen
    seed, max_depth, min_leaf, mtry, bootstrap, n_features = take("<qiiiiI")
    mtry = {-1: "sqrt", -2: "all"}.get(mtry, mtry)
    (nsel,) = take("<I")
    selected = arr("<i4", nsel).astype(np.int64)
    (ntrees,) = take("<I")
    trees = []
    for _ in range(ntrees):
        (nn,) = take("<I")
        feature = arr("<i4", nn)
        threshold = arr("<f8", nn)
        left = arr("<i4", nn)
        right = arr("<i4", nn)
        counts = arr("<f8", 2 * nn).reshape(nn, 2)
        trees.append(Tree(feature, threshold, left, right, counts))
    if pos != len(raw):
        raise ForestFormatError(f"{path}: trailing bytes")
    cfg = ForestConfig(ntrees, None if max_depth < 0 else max_depth, min_leaf, mtry, bool(bootstrap))
    return ForestModel(trees, selected, n_features, cfg, seed), meta

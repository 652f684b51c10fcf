import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dwic.forest import (ForestConfig, ForestFormatError, build_tree, effective_folds, feature_importances,
                         forest_bytes, forest_train, load_forest, rank_features, save_forest, select_features,
                         stratified_folds)


def traverse(tree, x):
    """Per-row walk of the flattened arrays, one node at a time."""
    node = 0
    while tree.feature[node] >= 0:
        node = tree.left[node] if x[tree.feature[node]] <= tree.threshold[node] else tree.right[node]
    return node


def toy(n=60, p=4, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    y = (X[:, 0] + 0.5 * X[:, 1] > 0).astype(int)
    return X, y


def test_stump_forest_predicts_prior_majority():
    X, y = toy()
    y[:] = 0
    y[:20] = 1
    model = forest_train(X, y, cfg=ForestConfig(n_trees=1, max_depth=0, bootstrap=False))
    p = model.predict_proba(X)
    assert np.all(p == 0.0)


def test_separable_set_fits_exactly():
    X = np.array([[0, 0], [0, 1], [1, 0], [1, 1], [2, 2], [2, 3], [3, 2], [3, 3]], dtype=float)
    y = np.array([0, 0, 0, 0, 1, 1, 1, 1])
    model = forest_train(X, y, cfg=ForestConfig(n_trees=10, max_depth=2, bootstrap=False), seed=1)
    assert np.array_equal(model.predict_proba(X).round(), y)


def test_node_invariants():
    X, y = toy(80, 5, 3)
    tree, imp = build_tree(X, y, ForestConfig(), np.random.default_rng(0))
    for i in range(tree.n_nodes):
        if tree.feature[i] >= 0:
            l, r = tree.left[i], tree.right[i]
            assert tree.counts[l].sum() > 0 and tree.counts[r].sum() > 0
            np.testing.assert_array_equal(tree.counts[l] + tree.counts[r], tree.counts[i])
    assert tree.counts[0].sum() == 80
    leaves = tree.feature < 0
    assert tree.counts[leaves].sum() == 80
    assert imp.sum() > 0 and np.all(imp >= 0)


def test_predictions_match_per_tree_traversal():
    X, y = toy(50, 6, 1)
    model = forest_train(X, y, cfg=ForestConfig(n_trees=15), seed=4)
    Q = np.random.default_rng(9).standard_normal((100, 6)) * 2
    expected = []
    for x in Q:
        votes = []
        for t in model.trees:
            c = t.counts[traverse(t, x)]
            votes.append(1.0 if c[1] > c[0] else 0.0 if c[1] < c[0] else 0.5)
        expected.append(np.mean(votes))
    np.testing.assert_allclose(model.predict_proba(Q), expected)


def test_vote_fraction_arithmetic():
    X, y = toy()
    model = forest_train(X, y, cfg=ForestConfig(n_trees=5), seed=0)
    pos = forest_train(X, y, cfg=ForestConfig(n_trees=1, max_depth=0, bootstrap=False), seed=0).trees[0]
    pos.counts[0] = (0, 1)
    neg = forest_train(X, y, cfg=ForestConfig(n_trees=1, max_depth=0, bootstrap=False), seed=0).trees[0]
    neg.counts[0] = (1, 0)
    model.trees = [pos] * 120 + [neg] * 80
    assert model.predict_proba(X[:3]).tolist() == [0.6] * 3
    model.trees = [pos] * 7
    assert set(model.predict_proba(X).tolist()) == {1.0}


def test_same_seed_same_structure_and_order_invariance():
    X, y = toy(70, 5, 2)
    a = forest_train(X, y, cfg=ForestConfig(n_trees=20), seed=11)
    b = forest_train(X, y, cfg=ForestConfig(n_trees=20), seed=11)
    assert forest_bytes(a) == forest_bytes(b)
    c = forest_train(X, y, cfg=ForestConfig(n_trees=20), seed=12)
    assert forest_bytes(a) != forest_bytes(c)
    Q = np.random.default_rng(0).standard_normal((30, 5))
    p = a.predict_proba(Q)
    a.trees = a.trees[::-1]
    np.testing.assert_array_equal(a.predict_proba(Q), p)


def test_errors():
    X, y = toy()
    with pytest.raises(ValueError, match="single class"):
        forest_train(X, np.zeros(len(y), int))
    with pytest.raises(ValueError):
        forest_train(X, np.r_[1, np.zeros(len(y) - 1, int)])
    model = forest_train(X, y, cfg=ForestConfig(n_trees=3))
    with pytest.raises(ValueError, match="features"):
        model.predict_proba(X[:, :3])


def test_label_copy_ranks_first_and_constant_ranks_last():
    rng = np.random.default_rng(0)
    y = np.arange(40) % 2
    X = rng.standard_normal((40, 8))
    X[:, 5] = y
    X[:, 2] = 3.0
    imp = feature_importances(X, y, n_trees=50, seed=0, mtry="all")
    order = rank_features(imp)
    assert order[0] == 5
    assert imp[2] == 0
    pos = order.tolist().index(2)
    assert all(imp[j] == 0 for j in order[pos:])


def test_planted_features_found_among_noise():
    hits = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        n = 60
        y = np.arange(n) % 2
        X = rng.standard_normal((n, 90))
        informative = rng.choice(90, 5, replace=False)
        X[:, informative] += 1.5 * y[:, None]
        sel, k = select_features(X, y, k=26, seed=seed, n_trees=100)
        assert k == 26 and len(set(sel.tolist())) == 26
        hits.append(len(set(sel.tolist()) & set(informative.tolist())))
    assert np.median(hits) >= 4


def test_select_caps_k_and_cv_grid():
    X, y = toy(40, 6, 5)
    sel, k = select_features(X, y, k=26, n_trees=20)
    assert k == 6 and sorted(sel.tolist()) == list(range(6))
    sel, k = select_features(X, y, k=26, n_trees=10, k_grid=[1, 3], cv_folds=4,
                             forest_cfg=ForestConfig(n_trees=10))
    assert k in (1, 3) and len(sel) == k


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 30), st.integers(2, 30), st.integers(2, 10), st.integers(0, 1000))
def test_stratified_folds_balance(n0, n1, folds, seed):
    y = np.r_[np.zeros(n0, int), np.ones(n1, int)]
    f = stratified_folds(y, folds, seed)
    for c in (0, 1):
        counts = np.bincount(f[y == c], minlength=folds)
        assert counts.max() - counts.min() <= 1
    assert effective_folds(y, folds) == min(folds, n0, n1)


def test_forest_file_round_trip(tmp_path):
    X, y = toy(50, 7, 6)
    model = forest_train(X, y, selected=[6, 1, 3], cfg=ForestConfig(n_trees=12, max_depth=4), seed=3)
    save_forest(tmp_path / "f.prfm", model, meta="config_hash=z")
    back, meta = load_forest(tmp_path / "f.prfm")
    assert meta == "config_hash=z" and back.config == model.config
    assert back.selected.tolist() == [6, 1, 3] and back.n_features == 7
    np.testing.assert_array_equal(back.predict_proba(X), model.predict_proba(X))
    assert forest_bytes(back, meta) == (tmp_path / "f.prfm").read_bytes()
    raw = (tmp_path / "f.prfm").read_bytes()
    for blob in (b"XXXX" + raw[4:], raw[:-5], raw + b"\0"):
        (tmp_path / "bad.prfm").write_bytes(blob)
        with pytest.raises(ForestFormatError):
            load_forest(tmp_path / "bad.prfm")

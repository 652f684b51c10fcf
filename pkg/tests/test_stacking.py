import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dwic.forest import ForestConfig
from dwic.model import ModelSpec, checkpoint_bytes
from dwic.stacking import (CLASSES, STAT_NAMES, ProbabilitySet, assemble_features, ensemble_train, extract_stats,
                           feature_matrix, feature_names, filter_probabilities, filter_values, member_seed,
                           patient_features, single_cnn_patient_baseline)
from dwic.trainer import TrainConfig

from oracles import first_order_stats


def test_filter_example_and_boundaries():
    np.testing.assert_array_equal(filter_values([0.9, 0.8, 0.76, 0.7, 0.99, 0.75, 0.73]),
                                  [0.99, 0.9, 0.8, 0.76, 0.75])
    assert filter_values([0.1, 0.5, 0.7]).size == 0
    assert filter_values([0.74, 0.74]).size == 0
    assert filter_values([0.7400001]).size == 1
    with pytest.raises(ValueError):
        filter_values([1.2])


def test_filter_probabilities_columns():
    probs = np.array([[0.1, 0.9], [0.95, 0.05], [0.5, 0.5]])
    pca, non = filter_probabilities(probs, "P1", 2)
    assert (pca.cls, non.cls, pca.cnn_index) == ("pca", "nonpca", 2)
    np.testing.assert_array_equal(pca.values, [0.9])
    np.testing.assert_array_equal(non.values, [0.95])


@settings(max_examples=80, deadline=None)
@given(st.lists(st.floats(0, 1), max_size=30), st.floats(0, 0.99), st.floats(0, 0.99), st.integers(0, 2 ** 16))
def test_filter_properties(values, c1, c2, seed):
    lo, hi = sorted((c1, c2))
    a = filter_values(values, lo)
    b = filter_values(values, hi)
    assert len(b) <= len(a) <= 5
    assert np.all(a > lo) and np.all(np.diff(a) <= 0)
    perm = np.random.default_rng(seed).permutation(len(values))
    np.testing.assert_array_equal(filter_values(np.asarray(values)[perm], lo), a)


def test_stats_examples():
    s = extract_stats([0.8, 0.9, 1.0], "pca")
    assert list(s) == list(STAT_NAMES["pca"])
    expected = dict(mean=0.9, std=np.sqrt(0.02 / 3), var=0.02 / 3, median=0.9, sum=2.7, max=1.0, skew=0.0,
                    kurt=-1.5, range=0.2)
    for k, v in expected.items():
        assert s[k] == pytest.approx(v, abs=1e-12), k
    single = extract_stats([0.9], "nonpca")
    assert single == dict(mean=0.9, std=0.0, var=0.0, median=0.9, sum=0.9, min=0.9, skew=0.0, kurt=0.0, range=0.0)
    assert list(extract_stats([], "pca").values()) == [0.0] * 9


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.7400001, 1.0), max_size=5), st.sampled_from(CLASSES))
def test_stats_match_term_by_term_oracle(values, cls):
    got = list(extract_stats(values, cls).values())
    ref = first_order_stats(values, "max" if cls == "pca" else "min")
    np.testing.assert_allclose(got, ref, rtol=1e-9, atol=1e-12)


def test_feature_names_and_order():
    names = feature_names()
    assert len(names) == 90 == len(set(names))
    assert names[:3] == ["cnn1_pca_mean", "cnn1_pca_std", "cnn1_pca_var"]
    assert names[5] == "cnn1_pca_max" and names[14] == "cnn1_nonpca_min" and names[18] == "cnn2_pca_mean"


def test_crafted_sets_assemble_to_hand_vector():
    rng = np.random.default_rng(0)
    sets, expected = {}, []
    for m in range(1, 6):
        for c in CLASSES:
            k = int(rng.integers(0, 6))
            vals = np.sort(rng.uniform(0.75, 1.0, k))[::-1]
            sets[(m, c)] = ProbabilitySet("P", m, c, vals)
            expected += first_order_stats(vals, "max" if c == "pca" else "min")
    vec = assemble_features(sets)
    assert vec.shape == (90,)
    np.testing.assert_allclose(vec, expected, rtol=1e-12, atol=1e-15)
    empty = {(m, c): np.array([]) for m in range(1, 6) for c in CLASSES}
    np.testing.assert_array_equal(assemble_features(empty), np.zeros(90))
    del sets[(3, "nonpca")]
    with pytest.raises(KeyError):
        assemble_features(sets)


def test_patient_features_permutation_invariant_and_duplication():
    rng = np.random.default_rng(1)
    p = rng.uniform(0, 1, (12, 1))
    probs = np.hstack([1 - p, p])
    vec = patient_features([probs] * 5)
    np.testing.assert_array_equal(vec, np.tile(patient_features([probs]), 5))
    np.testing.assert_array_equal(patient_features([probs[rng.permutation(12)]] * 5), vec)
    one = np.array([[0.0, 1.0]])
    assert patient_features([one])[4] == 1.0  # PCa sum


def test_feature_matrix_member_subset():
    rng = np.random.default_rng(2)
    data = {}
    for pid in ("A", "B"):
        ps = []
        for _ in range(5):
            p = rng.uniform(0, 1, (8, 1))
            ps.append(np.hstack([1 - p, p]))
        data[pid] = ps
    full = feature_matrix(data, ["A", "B"])
    first = feature_matrix(data, ["A", "B"], members=[0])
    assert full.shape == (2, 90) and first.shape == (2, 18)
    np.testing.assert_array_equal(full[:, :18], first)


def separable_probs(n, seed):
    """Patients whose positive slices get high PCa probability from every member."""
    rng = np.random.default_rng(seed)
    out, labels = {}, {}
    for i in range(n):
        lab = i % 2
        s = 12
        p = rng.uniform(0.0, 0.3, s)
        if lab:
            p[rng.integers(0, s, 2)] = rng.uniform(0.8, 1.0, 2)
        out[f"P{seed}_{i}"] = [np.column_stack([1 - p, p])] * 5
        labels[f"P{seed}_{i}"] = lab
    return out, labels


def test_single_cnn_baseline_separates_and_is_deterministic():
    fit, fit_labels = separable_probs(24, 0)
    ev, ev_labels = separable_probs(10, 1)
    cfg = ForestConfig(n_trees=30)
    ids, scores = single_cnn_patient_baseline(fit, fit_labels, ev, k=26, seed=3, selector_trees=20, forest_cfg=cfg)
    y = np.array([ev_labels[p] for p in ids])
    assert scores[y == 1].min() > scores[y == 0].max()
    _, again = single_cnn_patient_baseline(fit, fit_labels, ev, k=26, seed=3, selector_trees=20, forest_cfg=cfg)
    np.testing.assert_array_equal(scores, again)


def tiny_sets():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((12, 6, 66, 66)).astype(np.float32)
    y = np.arange(12) % 2
    X[y == 1, :, 20:30, 20:30] += 2
    return (X[:8], y[:8]), (X[8:], y[8:])


def digest(res):
    return hashlib.sha256(checkpoint_bytes(ModelSpec.toy(width=4), res.state)).hexdigest()


def test_ensemble_members_seeded_and_distinct():
    tr, va = tiny_sets()
    cfg = TrainConfig(lr0=0.01, max_epochs=1, batch_size=4)
    spec = ModelSpec.toy(width=4)
    a = ensemble_train(spec, tr, va, cfg, base_seed=5, n_members=3)
    b = ensemble_train(spec, tr, va, cfg, base_seed=5, n_members=3)
    assert [digest(r) for r in a] == [digest(r) for r in b]
    assert len({digest(r) for r in a}) == 3
    assert [member_seed(5, i) for i in range(3)] == [5, 6, 7]
    single = ensemble_train(spec, tr, va, cfg, base_seed=5, n_members=1)
    assert digest(single[0]) == digest(a[0])


def test_parallel_members_match_serial():
    tr, va = tiny_sets()
    cfg = TrainConfig(lr0=0.01, max_epochs=1, batch_size=4)
    spec = ModelSpec.toy(width=4)
    serial = ensemble_train(spec, tr, va, cfg, base_seed=0, n_members=2, workers=1)
    parallel = ensemble_train(spec, tr, va, cfg, base_seed=0, n_members=2, workers=2)
    assert [digest(r) for r in serial] == [digest(r) for r in parallel]


def test_member_failure_names_member():
    tr, va = tiny_sets()
    bad = (tr[0].copy(), tr[1])
    bad[0][0, 0, 0, 0] = np.nan
    with pytest.raises(RuntimeError, match="member 1"):
        ensemble_train(ModelSpec.toy(width=4), bad, va, TrainConfig(max_epochs=1, batch_size=4), n_members=2)

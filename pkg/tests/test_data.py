import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import ks_2samp

from dwic.data import (NormalizationStats, PatientVolume, VolumeFormatError, center_crop, compute_stats,
                       lesion_oracle_score, normalize, preprocess_volume, read_manifest, read_volume,
                       resize_bilinear, stratified_split, synth_generate, write_manifest, write_volume)
from dwic.evaluation import auc_mann_whitney


def vol(pid="P1", s=2, h=5, label=1, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.zeros(s, np.uint8)
    labels[0] = label
    return PatientVolume(pid, rng.standard_normal((s, 6, h, h)).astype(np.float32), labels, label)


# --- normalization ---------------------------------------------------------------

def test_normalize_examples():
    x = np.random.default_rng(0).standard_normal((2, 6, 3, 3)).astype(np.float32)
    np.testing.assert_array_equal(normalize(x, NormalizationStats(np.zeros(6), np.ones(6))), x)
    x = np.zeros((1, 6, 1, 2), np.float32)
    x[..., 0], x[..., 1] = 1, 3
    out = normalize(x, NormalizationStats(np.full(6, 2.0), np.ones(6)))
    np.testing.assert_array_equal(out[0, :, 0], np.tile([-1, 1], (6, 1)))
    with pytest.raises(ValueError):
        NormalizationStats(np.zeros(6), np.r_[np.ones(5), 0.0])


def test_reference_set_is_standardized():
    vols = [vol(f"P{i}", s=3, h=8, seed=i) for i in range(4)]
    for v in vols:
        v.slices *= np.arange(1, 7, dtype=np.float32)[:, None, None]
        v.slices += 5
    stats = compute_stats(vols)
    z = np.concatenate([normalize(v.slices, stats) for v in vols]).astype(np.float64)
    np.testing.assert_allclose(z.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(z.std(axis=(0, 2, 3)), 1, atol=1e-5)


# --- resize / crop -----------------------------------------------------------------

def test_resize_identity_and_constant():
    img = np.random.default_rng(0).standard_normal((3, 7, 7))
    np.testing.assert_array_equal(resize_bilinear(img, 7), img)
    np.testing.assert_allclose(resize_bilinear(np.full((2, 5, 5), 3.25), 144), 3.25)


def test_resize_2x2_to_4x4_closed_form():
    a, b, c, d = 1.0, 2.0, 3.0, 5.0
    img = np.array([[a, b], [c, d]])
    # half-pixel centres: output i samples (i + 0.5)/2 - 0.5 -> -0.25, 0.25, 0.75, 1.25, clamped to [0, 1]
    t = np.array([0.0, 0.25, 0.75, 1.0])
    expected = np.array([[(1 - ty) * ((1 - tx) * a + tx * b) + ty * ((1 - tx) * c + tx * d) for tx in t] for ty in t])
    np.testing.assert_allclose(resize_bilinear(img, 4), expected, atol=1e-12)


def test_center_crop():
    img = np.zeros((144, 144))
    img[39, 39] = 1
    img[72, 72] = 7
    out = center_crop(img, 66)
    assert out.shape == (66, 66) and out[0, 0] == 1 and out[33, 33] == 7
    np.testing.assert_array_equal(center_crop(img, 144), img)
    with pytest.raises(ValueError):
        center_crop(img, 145)
    odd = np.arange(25.0).reshape(5, 5)
    assert center_crop(odd, 1)[0, 0] == 12


def test_preprocess_shapes_and_order_independence():
    vols = [vol(f"P{i}", s=2, h=64, seed=i) for i in range(3)]
    a = [preprocess_volume(v) for v in vols]
    b = [preprocess_volume(v) for v in reversed(vols)][::-1]
    for x, y in zip(a, b):
        assert x.slices.shape == (2, 6, 66, 66) and np.array_equal(x.slices, y.slices)


# --- volume files ----------------------------------------------------------------

def test_volume_round_trip_and_layout(tmp_path):
    v = vol("P7", s=3, h=4)
    p = tmp_path / "P7.dwiv"
    write_volume(p, v)
    raw = p.read_bytes()
    assert raw[:4] == b"DWIV" and len(raw) == 4 + 20 + 3 * 6 * 16 * 4 + 3 + 1
    back = read_volume(p)
    assert back.patient_id == "P7" and back.patient_label == 1
    assert np.array_equal(back.slices, v.slices) and np.array_equal(back.slice_labels, v.slice_labels)


def test_volume_rejects_corruption(tmp_path):
    v = vol()
    p = tmp_path / "v.dwiv"
    write_volume(p, v)
    raw = p.read_bytes()
    for blob in (b"NOPE" + raw[4:], raw[:-1], raw[:10], raw[:4] + b"\x02" + raw[5:]):
        p.write_bytes(blob)
        with pytest.raises(VolumeFormatError):
            read_volume(p)


def test_volume_invariants():
    with pytest.raises(ValueError):
        PatientVolume("x", np.zeros((0, 6, 2, 2), np.float32), np.zeros(0, np.uint8), 0)
    with pytest.raises(ValueError):
        PatientVolume("x", np.zeros((2, 6, 2, 2), np.float32), np.zeros(3, np.uint8), 0)


# --- split -------------------------------------------------------------------------

def cohort(n_pos, n_neg):
    ids = [f"P{i:04d}" for i in range(n_pos + n_neg)]
    return ids, [1] * n_pos + [0] * n_neg


def test_split_clinical_cohort_sizes():
    ids, labels = cohort(175, 252)
    m = stratified_split(ids, labels, seed=0)
    sizes = len(m.train), len(m.val), len(m.test)
    assert sizes == (273, 48, 106)
    for got, want in zip(sizes, (271, 48, 108)):
        assert abs(got - want) <= 2


def test_split_rounding_for_100():
    ids, labels = cohort(40, 60)
    m = stratified_split(ids, labels)
    assert (len(m.train), len(m.val), len(m.test)) == (64, 11, 25)


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 80), st.integers(3, 80), st.integers(0, 2 ** 31))
def test_split_properties(n_pos, n_neg, seed):
    ids, labels = cohort(n_pos, n_neg)
    m = stratified_split(ids, labels, seed=seed)
    sets = [set(m.train), set(m.val), set(m.test)]
    assert not (sets[0] & sets[1]) and not (sets[0] & sets[2]) and not (sets[1] & sets[2])
    assert set().union(*sets) == set(ids)
    frac = n_pos / (n_pos + n_neg)
    for part in (m.train, m.test):
        if len(part) >= 20:
            assert abs(sum(m.labels[p] for p in part) / len(part) - frac) <= 0.05
    assert stratified_split(ids, labels, seed=seed) == m


def test_split_requires_three_per_class():
    ids, labels = cohort(2, 20)
    with pytest.raises(ValueError):
        stratified_split(ids, labels)


def test_manifest_round_trip(tmp_path):
    ids, labels = cohort(10, 14)
    m = stratified_split(ids, labels, seed=1)
    paths = {p: f"pre/{p}.dwiv" for p in ids}
    write_manifest(tmp_path / "m.csv", m, paths, comment="config_hash=1")
    m2, paths2 = read_manifest(tmp_path / "m.csv")
    assert paths2 == paths and m2.labels == m.labels
    assert (sorted(m2.train), sorted(m2.val), sorted(m2.test)) == (m.train, m.val, m.test)


# --- phantoms ----------------------------------------------------------------------

def test_synth_structure_and_determinism():
    a = synth_generate(12, 6.0, seed=3)
    b = synth_generate(12, 6.0, seed=3)
    for x, y in zip(a, b):
        assert np.array_equal(x.slices, y.slices) and np.array_equal(x.slice_labels, y.slice_labels)
    for v in a:
        s = v.slices.shape[0]
        assert 10 <= s <= 16 and v.slices.shape[1:] == (6, 64, 64)
        pos = np.flatnonzero(v.slice_labels)
        if v.patient_label:
            assert 1 <= len(pos) <= 3 and np.all(np.diff(pos) == 1)
        else:
            assert len(pos) == 0


def test_synth_without_contrast_has_no_signal():
    vols = synth_generate(40, 0.0, seed=1)
    pos = [s.mean() for v in vols for s, l in zip(v.slices, v.slice_labels) if l]
    neg = [s.mean() for v in vols for s, l in zip(v.slices, v.slice_labels) if not l]
    assert len(pos) > 10
    assert ks_2samp(pos, neg).pvalue > 0.01


def test_synth_high_contrast_is_separable_by_local_oracle():
    vols = [preprocess_volume(v) for v in synth_generate(30, 6.0, seed=2)]
    scores = [lesion_oracle_score(s) for v in vols for s in v.slices]
    labels = [int(l) for v in vols for l in v.slice_labels]
    assert auc_mann_whitney(np.array(scores), np.array(labels)) >= 0.99

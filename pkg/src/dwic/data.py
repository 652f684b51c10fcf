"""DWI volumes: file format, preprocessing, patient-level splits, phantoms."""

import csv
import dataclasses
import os
import struct

import numpy as np
from scipy.ndimage import gaussian_filter

CHANNELS = ("ADC", "b0", "b100", "b400", "b1000", "b1600")
VOLUME_MAGIC = b"DWIV"
VOLUME_VERSION = 1


class VolumeFormatError(ValueError):
    pass


@dataclasses.dataclass
class PatientVolume:
    patient_id: str
    slices: np.ndarray  # (S, 6, H, W) float32
    slice_labels: np.ndarray  # (S,) uint8
    patient_label: int

    def __post_init__(self):
        if self.slices.ndim != 4 or self.slices.shape[0] < 1:
            raise ValueError(f"{self.patient_id}: slices must be (S>=1, C, H, W), got {self.slices.shape}")
        if self.slice_labels.shape != (self.slices.shape[0],):
            raise ValueError(f"{self.patient_id}: need one label per slice")


# ---------------------------------------------------------------------------
# volume files
# ---------------------------------------------------------------------------

def write_volume(path, vol):
    s, c, h, w = vol.slices.shape
    with open(path, "wb") as f:
        f.write(VOLUME_MAGIC)
        f.write(struct.pack("<5I", VOLUME_VERSION, s, c, h, w))
        f.write(np.ascontiguousarray(vol.slices, dtype="<f4").tobytes())
        f.write(np.asarray(vol.slice_labels, dtype=np.uint8).tobytes())
        f.write(struct.pack("<B", int(vol.patient_label)))


def read_volume(path, patient_id=None):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != VOLUME_MAGIC:
        raise VolumeFormatError(f"{path}: bad magic")
    if len(raw) < 24:
        raise VolumeFormatError(f"{path}: truncated header")
    version, s, c, h, w = struct.unpack("<5I", raw[4:24])
    if version != VOLUME_VERSION:
        raise VolumeFormatError(f"{path}: unsupported version {version}")
    n = s * c * h * w
    if len(raw) != 24 + 4 * n + s + 1:
        raise VolumeFormatError(f"{path}: size does not match header")
    slices = np.frombuffer(raw, dtype="<f4", count=n, offset=24).reshape(s, c, h, w).astype(np.float32)
    labels = np.frombuffer(raw, dtype=np.uint8, count=s, offset=24 + 4 * n).copy()
    if patient_id is None:
        patient_id = os.path.splitext(os.path.basename(path))[0]
    return PatientVolume(patient_id, slices, labels, int(raw[-1]))


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if np.any(self.std <= 0):
            raise ValueError("normalization std must be positive for every channel")

    def to_dict(self):
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}


def compute_stats(volumes):
    """Per-channel mean and population std over every pixel of every slice."""
    total = None
    sq = None
    count = 0
    for vol in volumes:
        x = vol.slices.astype(np.float64)
        s = x.sum(axis=(0, 2, 3))
        total = s if total is None else total + s
        count += x.shape[0] * x.shape[2] * x.shape[3]
    mean = total / count
    for vol in volumes:
        d = vol.slices.astype(np.float64) - mean[None, :, None, None]
        s = (d * d).sum(axis=(0, 2, 3))
        sq = s if sq is None else sq + s
    return NormalizationStats(mean, np.sqrt(sq / count))


def normalize(slices, stats):
    """``(x - mean_c) / std_c`` per channel on an ``(..., C, H, W)`` array."""
    mean = stats.mean.reshape(-1, 1, 1)
    std = stats.std.reshape(-1, 1, 1)
    if np.any(std <= 0):
        raise ValueError("zero std")
    return ((slices - mean) / std).astype(np.float32)


def resize_bilinear(img, size):
    """Bilinear resize of the last two axes with half-pixel-centre alignment.

    Output pixel ``i`` samples source coordinate ``(i + 0.5) * in/out - 0.5``,
    clamped to the image, so corners are not pinned and a same-size resize
    is the identity.
    """
    img = np.asarray(img)
    h, w = img.shape[-2:]
    oh, ow = (size, size) if np.isscalar(size) else size
    if min(h, w, oh, ow) < 1:
        raise ValueError("dimensions must be positive")
    if (oh, ow) == (h, w):
        return img.copy()

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis(h, oh)
    x0, x1, fx = axis(w, ow)
    dt = img.dtype if np.issubdtype(img.dtype, np.floating) else np.float64
    a = img.astype(dt)
    top = a[..., y0, :] * (1 - fy)[:, None] + a[..., y1, :] * fy[:, None]
    return (top[..., x0] * (1 - fx) + top[..., x1] * fx).astype(dt)


def center_crop(img, size):
    """Crop the last two axes to ``size`` around the centre (offset floors)."""
    h, w = img.shape[-2:]
    oh, ow = (size, size) if np.isscalar(size) else size
    if oh > h or ow > w:
        raise ValueError(f"cannot crop {h}x{w} to {oh}x{ow}")
    top, left = (h - oh) // 2, (w - ow) // 2
    return img[..., top:top + oh, left:left + ow].copy()


def preprocess_volume(vol, resize_to=144, crop_to=66):
    slices = center_crop(resize_bilinear(vol.slices, resize_to), crop_to).astype(np.float32)
    return PatientVolume(vol.patient_id, slices, vol.slice_labels.copy(), vol.patient_label)


# ---------------------------------------------------------------------------
# patient-level split
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class SplitManifest:
    train: list
    val: list
    test: list
    labels: dict

    def split_of(self, pid):
        for name in ("train", "val", "test"):
            if pid in getattr(self, name):
                return name
        raise KeyError(pid)

    def counts(self):
        return {name: (sum(self.labels[p] for p in ids), sum(1 - self.labels[p] for p in ids))
                for name, ids in (("train", self.train), ("val", self.val), ("test", self.test))}


def _allocate(total, class_sizes):
    """Split ``total`` across classes proportionally (largest remainder, ties to lower class)."""
    n = sum(class_sizes)
    shares = [total * c / n for c in class_sizes]
    alloc = [int(np.floor(s)) for s in shares]
    order = sorted(range(len(shares)), key=lambda i: (-(shares[i] - alloc[i]), i))
    for i in order[:total - sum(alloc)]:
        alloc[i] += 1
    return alloc


def stratified_split(patient_ids, labels, test_frac=0.25, val_frac=0.15, seed=0):
    """Patient-level train/val/test split preserving the class ratio.

    ``n_test = floor(n * test_frac)`` and ``n_val = floor((n - n_test) * val_frac)``;
    the rest is training. Each total is shared across classes by largest
    remainder, and patients are drawn per class from a seeded permutation.
    """
    ids = list(patient_ids)
    lab = {pid: int(l) for pid, l in zip(ids, labels)}
    if len(lab) != len(ids):
        raise ValueError("duplicate patient ids")
    classes = [sorted(p for p in ids if lab[p] == c) for c in (0, 1)]
    for c, members in enumerate(classes):
        if len(members) < 3:
            raise ValueError(f"class {c} has {len(members)} patients; need at least 3")
    n = len(ids)
    n_test = int(np.floor(n * test_frac))
    n_val = int(np.floor((n - n_test) * val_frac))
    sizes = [len(m) for m in classes]
    test_alloc = _allocate(n_test, sizes)
    val_alloc = _allocate(n_val, [s - t for s, t in zip(sizes, test_alloc)])
    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    for members, nt, nv in zip(classes, test_alloc, val_alloc):
        perm = [members[i] for i in rng.permutation(len(members))]
        test += perm[:nt]
        val += perm[nt:nt + nv]
        train += perm[nt + nv:]
    return SplitManifest(sorted(train), sorted(val), sorted(test), lab)


MANIFEST_FIELDS = ("patient_id", "path", "patient_label", "split")


def write_manifest(path, manifest, paths, comment=None):
    with open(path, "w", newline="") as f:
        if comment:
            f.write(f"# {comment}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for pid in sorted(manifest.labels):
            w.writerow([pid, paths[pid], manifest.labels[pid], manifest.split_of(pid)])


def read_manifest(path):
    """Returns ``(SplitManifest, {patient_id: path})``."""
    sets = {"train": [], "val": [], "test": []}
    labels, paths = {}, {}
    with open(path, newline="") as f:
        for row in csv.DictReader(line for line in f if not line.startswith("#")):
            pid = row["patient_id"]
            labels[pid] = int(row["patient_label"])
            paths[pid] = row["path"]
            sets[row["split"]].append(pid)
    return SplitManifest(sets["train"], sets["val"], sets["test"], labels), paths


# ---------------------------------------------------------------------------
# synthetic phantoms
# ---------------------------------------------------------------------------

# Relative signal level per channel; the lesion signature is in units of
# each channel's background std: dark on ADC, bright on high b-values.
_BASE = np.array([1.5, 1.0, 0.9, 0.7, 0.4, 0.3])
_LESION_SIGN = np.array([-1.0, 0.0, 0.0, 0.3, 1.0, 1.0])
_NOISE_FRAC = 0.1


def _synth_patient(pid, label, contrast, size, rng):
    n_slices = int(rng.integers(10, 17))
    sigma = _BASE * _NOISE_FRAC
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2
    gland = np.exp(-(((yy - c) / (0.3 * size)) ** 2 + ((xx - c) / (0.35 * size)) ** 2))
    slices = np.empty((n_slices, 6, size, size), dtype=np.float32)
    scale = rng.uniform(0.9, 1.1)
    for s in range(n_slices):
        tex = gaussian_filter(rng.standard_normal((6, size, size)), sigma=(0, 2, 2))
        tex /= tex.std(axis=(1, 2), keepdims=True)
        white = rng.standard_normal((6, size, size))
        bg = (_BASE[:, None, None] * scale
              + sigma[:, None, None] * (0.5 * gland + 0.8 * tex + 0.6 * white))
        slices[s] = bg
    slice_labels = np.zeros(n_slices, dtype=np.uint8)
    if label:
        k = int(rng.integers(1, 4))
        start = int(rng.integers(0, n_slices - k + 1))
        span = size / 8
        cy, cx = c + rng.uniform(-span, span, size=2)
        # a ~3x4 px blob once resized to 144 and cropped to 66
        sy, sx = 1.5 * size / 144, 1.9 * size / 144
        for s in range(start, start + k):
            jy, jx = rng.uniform(-0.5, 0.5, size=2)
            blob = np.exp(-(((yy - cy - jy) / sy) ** 2 + ((xx - cx - jx) / sx) ** 2) / 2)
            amp = contrast * rng.uniform(0.8, 1.2)
            slices[s] += (amp * _LESION_SIGN * sigma)[:, None, None] * blob
            slice_labels[s] = 1
    return PatientVolume(pid, slices, slice_labels, int(label))


def synth_generate(n_patients, lesion_contrast, seed=0, size=64, pos_frac=175 / 427):
    """Seeded phantom cohort of 10-16 slice, 6-channel volumes at ``size`` x ``size``.

    Positive patients carry 1-3 contiguous lesion slices with a small blob
    whose amplitude is ``lesion_contrast`` background standard deviations.
    Labels come from one seeded permutation; each patient's pixels come
    from its own child seed.
    """
    if n_patients < 2:
        raise ValueError("need at least 2 patients")
    if lesion_contrast < 0:
        raise ValueError("lesion contrast must be non-negative")
    n_pos = min(max(int(round(n_patients * pos_frac)), 1), n_patients - 1)
    root = np.random.SeedSequence(seed)
    label_rng = np.random.default_rng(root.spawn(1)[0])
    labels = np.zeros(n_patients, dtype=int)
    labels[label_rng.permutation(n_patients)[:n_pos]] = 1
    kids = np.random.SeedSequence(seed, spawn_key=(1,)).spawn(n_patients)
    return [_synth_patient(f"P{i:04d}", labels[i], lesion_contrast, size, np.random.default_rng(kids[i]))
            for i in range(n_patients)]


def lesion_oracle_score(slice_):
    """Max over 3x3 windows of the z-scored (b1000 + b1600 - ADC) map of one slice."""
    z = (slice_ - slice_.mean(axis=(1, 2), keepdims=True)) / slice_.std(axis=(1, 2), keepdims=True)
    m = z[4] + z[5] - z[0]
    k = np.ones(3) / 3
    m = np.apply_along_axis(lambda r: np.convolve(r, k, mode="valid"), 1, m)
    m = np.apply_along_axis(lambda r: np.convolve(r, k, mode="valid"), 0, m)
    return float(m.max())

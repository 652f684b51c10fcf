"""Second stage: slice probabilities from several CNNs -> per-patient statistics -> forest.

For each patient and each CNN the slice probabilities of each class are
filtered (strictly above a cutoff, top five), nine first-order statistics
are taken from each filtered set, and the concatenation is the patient's
feature vector: ``n_members x 2 classes x 9 stats`` values, ordered by
member, then class (PCa before non-PCa), then statistic.
"""

import concurrent.futures as cf
import dataclasses
import logging

import numpy as np

from .forest import ForestConfig, forest_train, select_features
from .model import Network
from .trainer import derived_seeds, train

log = logging.getLogger(__name__)

CLASSES = ("pca", "nonpca")
# the sixth statistic is the set maximum for PCa and the set minimum for non-PCa
STAT_NAMES = {
    "pca": ("mean", "std", "var", "median", "sum", "max", "skew", "kurt", "range"),
    "nonpca": ("mean", "std", "var", "median", "sum", "min", "skew", "kurt", "range"),
}
N_STATS = 9
DEFAULT_CUTOFF = 0.74
DEFAULT_TOP_K = 5


@dataclasses.dataclass
class ProbabilitySet:
    patient_id: str
    cnn_index: int
    cls: str
    values: np.ndarray  # descending, each > cutoff


def filter_values(values, cutoff=DEFAULT_CUTOFF, top_k=DEFAULT_TOP_K):
    """Values strictly above ``cutoff``, descending, at most ``top_k``.

    Equal values keep their input (slice) order.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size and (v.min() < 0 or v.max() > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    keep = np.flatnonzero(v > cutoff)
    order = keep[np.argsort(-v[keep], kind="stable")]
    return v[order[:top_k]]


def filter_probabilities(probs, patient_id="", cnn_index=1, cutoff=DEFAULT_CUTOFF, top_k=DEFAULT_TOP_K):
    """Split one CNN's ``(S, 2)`` slice probabilities into (PCa, non-PCa) sets.

    Column 1 is the PCa probability, column 0 the non-PCa probability.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[1] != 2:
        raise ValueError(f"expected (S, 2) probabilities, got {probs.shape}")
    return (ProbabilitySet(patient_id, cnn_index, "pca", filter_values(probs[:, 1], cutoff, top_k)),
            ProbabilitySet(patient_id, cnn_index, "nonpca", filter_values(probs[:, 0], cutoff, top_k)))


def extract_stats(values, cls="pca"):
    """The nine statistics of one filtered set, as a name -> value dict.

    Moments are population (biased) moments. Skewness is ``m3 / m2**1.5`` and
    kurtosis is the excess ``m4 / m2**2 - 3``; both are 0 when ``m2 == 0``.
    Every statistic of an empty set is 0.
    """
    names = STAT_NAMES[cls]
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return dict.fromkeys(names, 0.0)
    mean = v.mean()
    d = v - mean
    m2 = float(np.mean(d * d))
    if v.size < 2 or m2 < 1e-20:
        m2, skew, kurt = 0.0, 0.0, 0.0
    else:
        skew = float(np.mean(d ** 3) / m2 ** 1.5)
        kurt = float(np.mean(d ** 4) / m2 ** 2 - 3.0)
    out = {
        "mean": float(mean),
        "std": float(np.sqrt(m2)),
        "var": m2,
        "median": float(np.median(v)),
        "sum": float(v.sum()),
        "skew": skew,
        "kurt": kurt,
        "range": float(v.max() - v.min()),
    }
    out["max" if cls == "pca" else "min"] = float(v.max() if cls == "pca" else v.min())
    return {k: out[k] for k in names}


def feature_names(n_members=5):
    return [f"cnn{m}_{c}_{s}" for m in range(1, n_members + 1) for c in CLASSES for s in STAT_NAMES[c]]


def assemble_features(sets, n_members=5):
    """Feature vector from ``{(cnn_index, cls): values}`` covering every member and class."""
    out = []
    for m in range(1, n_members + 1):
        for c in CLASSES:
            if (m, c) not in sets:
                raise KeyError(f"missing probability set for CNN {m}, class {c}")
            s = sets[(m, c)]
            values = s.values if isinstance(s, ProbabilitySet) else s
            out.extend(extract_stats(values, c).values())
    return np.array(out, dtype=np.float64)


def patient_features(member_probs, cutoff=DEFAULT_CUTOFF, top_k=DEFAULT_TOP_K, patient_id=""):
    """Feature vector of one patient from a list of per-member ``(S, 2)`` probability arrays."""
    sets = {}
    for m, probs in enumerate(member_probs, 1):
        pca, non = filter_probabilities(probs, patient_id, m, cutoff, top_k)
        sets[(m, "pca")] = pca
        sets[(m, "nonpca")] = non
    return assemble_features(sets, len(member_probs))


def feature_matrix(probs_by_patient, patient_ids, members=None, cutoff=DEFAULT_CUTOFF, top_k=DEFAULT_TOP_K):
    """Rows of ``patient_features`` for ``patient_ids``.

    ``probs_by_patient[pid]`` is a list of per-member ``(S, 2)`` arrays;
    ``members`` (0-based) restricts which members are used.
    """
    rows = []
    for pid in patient_ids:
        mp = probs_by_patient[pid]
        if members is not None:
            mp = [mp[i] for i in members]
        rows.append(patient_features(mp, cutoff, top_k, pid))
    return np.array(rows)


# ---------------------------------------------------------------------------
# ensemble of CNNs
# ---------------------------------------------------------------------------

def member_seed(base_seed, index):
    """Seed of ensemble member ``index`` (0-based)."""
    return base_seed + index


def _train_member(spec, train_set, val_set, cfg, seed, log_path):
    net = Network(spec, seed=derived_seeds(seed)[0], dtype=np.float32)
    result = train(net, train_set, val_set, dataclasses.replace(cfg, seed=seed), log_path)
    return result


def ensemble_train(spec, train_set, val_set, cfg, base_seed=0, n_members=5, workers=1, log_paths=None):
    """Train ``n_members`` CNNs that differ only in their seeds.

    Returns the list of ``TrainResult``. With ``workers > 1`` members train
    in separate processes; each run depends only on its own seed, so the
    results equal the serial ones.
    """
    log_paths = log_paths or [None] * n_members
    seeds = [member_seed(base_seed, i) for i in range(n_members)]
    if workers <= 1:
        results = []
        for i, s in enumerate(seeds):
            try:
                results.append(_train_member(spec, train_set, val_set, cfg, s, log_paths[i]))
            except Exception as exc:
                raise RuntimeError(f"ensemble member {i + 1} failed: {exc}") from exc
        return results
    with cf.ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_train_member, spec, train_set, val_set, cfg, s, log_paths[i])
                   for i, s in enumerate(seeds)]
        results = []
        for i, fut in enumerate(futures):
            try:
                results.append(fut.result())
            except Exception as exc:
                raise RuntimeError(f"ensemble member {i + 1} failed: {exc}") from exc
        return results


# ---------------------------------------------------------------------------
# patient-level classifier
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class PatientClassifier:
    selected: np.ndarray
    forest: object
    members: list

    def predict_proba(self, features):
        return self.forest.predict_proba(features)


def fit_patient_classifier(features, labels, k=26, seed=0, selector_trees=100,
                           forest_cfg=ForestConfig(), k_grid=None, cv_folds=10, members=None):
    """Select features then train the forest on ``features`` (one row per patient)."""
    selected, _ = select_features(features, labels, k=k, seed=seed, n_trees=selector_trees,
                                  k_grid=k_grid, cv_folds=cv_folds)
    forest = forest_train(features, labels, selected, forest_cfg, seed)
    return PatientClassifier(selected, forest, members)


def single_cnn_patient_baseline(fit_probs, fit_labels, eval_probs, member=0, k=26, seed=0,
                                selector_trees=100, forest_cfg=ForestConfig(),
                                cutoff=DEFAULT_CUTOFF, top_k=DEFAULT_TOP_K):
    """Patient scores from one CNN's 18 features, through the same selector and forest.

    ``fit_probs``/``eval_probs`` map patient id -> list of per-member
    ``(S, 2)`` arrays; only ``member`` (0-based) is read. Returns
    ``(eval_patient_ids, scores)``.
    """
    fit_ids = list(fit_probs)
    eval_ids = list(eval_probs)
    Xf = feature_matrix(fit_probs, fit_ids, [member], cutoff, top_k)
    Xe = feature_matrix(eval_probs, eval_ids, [member], cutoff, top_k)
    clf = fit_patient_classifier(Xf, np.asarray([fit_labels[p] for p in fit_ids]), k, seed,
                                 selector_trees, forest_cfg, members=[member])
    return eval_ids, clf.predict_proba(Xe)

"""Pipeline stages. Each reads its predecessors' artifacts from the work dir.

Work-dir layout::

    preprocessed/<pid>.dwiv      resized + cropped volumes
    split/manifest.csv           patient_id,path,patient_label,split
    split/norm_stats.json        per-channel mean/std
    checkpoints/member<k>.pcnn   CNN weights;  member<k>_metrics.csv per-epoch log
    predictions/slice_probs.csv  every member on every slice
    features/features.csv        patient_id,label,f_000..
    features/feature_names.txt   name of each f_### column
    features/selected.json       selected columns for the ensemble and single arms
    models/forest_{ensemble,single}.prfm
    eval/                        ROC CSVs, summaries, metrics.csv, scores, SVGs
    manifests/<stage>.json       config hash, seeds, sha256 of each output
"""

import csv
import glob
import hashlib
import json
import logging
import os

import numpy as np

from . import data as D
from .evaluation import (auc_mann_whitney, bootstrap_ci, paired_auc_test, ppv_npv, read_roc_csv,
                         roc, roc_svg, write_roc_csv, write_summary)
from .forest import load_forest, save_forest, forest_train, select_features
from .model import network_from_checkpoint, save_checkpoint
from .stacking import N_STATS, CLASSES, ensemble_train, feature_matrix, feature_names, member_seed
from .trainer import write_metrics_csv

log = logging.getLogger(__name__)


class MissingArtifactError(FileNotFoundError):
    pass


class InsufficientDataError(ValueError):
    """The cohort is too small for a stage (e.g. one class absent from the forest fit set)."""


def _p(cfg, *parts):
    return os.path.join(cfg.work_dir, *parts)


def _require(path, stage):
    if not os.path.exists(path):
        raise MissingArtifactError(f"{path} not found; run the '{stage}' stage first")
    return path


def _tag(cfg, stage):
    return f"config_hash={cfg.hash()} stage={stage}"


def _sha256(path):
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def _write_stage_manifest(cfg, stage, outputs, seeds=None):
    os.makedirs(_p(cfg, "manifests"), exist_ok=True)
    rel = {}
    for path in sorted(outputs):
        key = os.path.relpath(path, cfg.work_dir) if not os.path.relpath(path, cfg.work_dir).startswith("..") else path
        rel[key] = _sha256(path)
    doc = {"stage": stage, "config_hash": cfg.hash(), "seeds": seeds or {}, "outputs": rel}
    with open(_p(cfg, "manifests", f"{stage}.json"), "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def _write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=1, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------

def stage_synth(cfg):
    os.makedirs(cfg.data_dir, exist_ok=True)
    vols = D.synth_generate(cfg.n_patients, cfg.lesion_contrast, cfg.synth_seed, cfg.synth_size, cfg.pos_frac)
    outs = []
    for v in vols:
        path = os.path.join(cfg.data_dir, f"{v.patient_id}.dwiv")
        D.write_volume(path, v)
        outs.append(path)
    _write_stage_manifest(cfg, "synth", outs, {"synth_seed": cfg.synth_seed})
    log.info("synth: wrote %d volumes to %s", len(vols), cfg.data_dir)
    return outs


def stage_preprocess(cfg):
    paths = sorted(glob.glob(os.path.join(cfg.data_dir, "*.dwiv")))
    if not paths:
        raise MissingArtifactError(f"no .dwiv volumes in {cfg.data_dir}; run 'synth' or add data")
    os.makedirs(_p(cfg, "preprocessed"), exist_ok=True)
    outs = []
    for path in paths:
        vol = D.preprocess_volume(D.read_volume(path), cfg.resize_to, cfg.crop_to)
        out = _p(cfg, "preprocessed", f"{vol.patient_id}.dwiv")
        D.write_volume(out, vol)
        outs.append(out)
    _write_stage_manifest(cfg, "preprocess", outs)
    log.info("preprocess: %d volumes", len(outs))
    return outs


def stage_split(cfg):
    paths = sorted(glob.glob(_p(cfg, "preprocessed", "*.dwiv")))
    if not paths:
        raise MissingArtifactError("no preprocessed volumes; run the 'preprocess' stage first")
    vols = {os.path.splitext(os.path.basename(p))[0]: D.read_volume(p) for p in paths}
    ids = sorted(vols)
    man = D.stratified_split(ids, [vols[p].patient_label for p in ids], cfg.test_frac, cfg.val_frac, cfg.split_seed)
    os.makedirs(_p(cfg, "split"), exist_ok=True)
    rel_paths = {pid: os.path.join("preprocessed", f"{pid}.dwiv") for pid in ids}
    mpath = _p(cfg, "split", "manifest.csv")
    D.write_manifest(mpath, man, rel_paths, comment=_tag(cfg, "split"))
    ref = man.train if cfg.normalization_scope == "train" else ids
    stats = D.compute_stats([vols[p] for p in ref])
    spath = _p(cfg, "split", "norm_stats.json")
    _write_json(spath, {**stats.to_dict(), "scope": cfg.normalization_scope, "config_hash": cfg.hash()})
    _write_stage_manifest(cfg, "split", [mpath, spath], {"split_seed": cfg.split_seed})
    log.info("split: %s", man.counts())
    return man


def load_split(cfg):
    man, paths = D.read_manifest(_require(_p(cfg, "split", "manifest.csv"), "split"))
    with open(_require(_p(cfg, "split", "norm_stats.json"), "split")) as f:
        s = json.load(f)
    return man, paths, D.NormalizationStats(s["mean"], s["std"])


def _load_volume(cfg, rel):
    path = rel if os.path.isabs(rel) else _p(cfg, rel)
    return D.read_volume(_require(path, "preprocess"))


def slice_arrays(cfg, ids, paths, stats):
    xs, ys = [], []
    for pid in ids:
        vol = _load_volume(cfg, paths[pid])
        xs.append(D.normalize(vol.slices, stats))
        ys.append(vol.slice_labels.astype(np.int64))
    if not xs:
        return np.zeros((0, 6, cfg.crop_to, cfg.crop_to), np.float32), np.zeros(0, np.int64)
    return np.concatenate(xs), np.concatenate(ys)


def stage_train(cfg, workers=None):
    man, paths, stats = load_split(cfg)
    train_set = slice_arrays(cfg, man.train, paths, stats)
    val_set = slice_arrays(cfg, man.val, paths, stats)
    os.makedirs(_p(cfg, "checkpoints"), exist_ok=True)
    logs = [_p(cfg, "checkpoints", f"member{i + 1}_metrics.csv") for i in range(cfg.n_members)]
    spec = cfg.model_spec()
    results = ensemble_train(spec, train_set, val_set, cfg.train_config(), cfg.base_seed, cfg.n_members,
                             workers or cfg.parallel_members)
    outs = []
    for i, res in enumerate(results):
        ck = _p(cfg, "checkpoints", f"member{i + 1}.pcnn")
        save_checkpoint(ck, spec, res.state, meta=f"{_tag(cfg, 'train')} member={i + 1} "
                                                   f"seed={member_seed(cfg.base_seed, i)} best_epoch={res.best_epoch}")
        write_metrics_csv(logs[i], res.history, comment=_tag(cfg, "train"))
        outs += [ck, logs[i]]
    seeds = {f"member{i + 1}": member_seed(cfg.base_seed, i) for i in range(cfg.n_members)}
    _write_stage_manifest(cfg, "train", outs, seeds)
    return results


PROB_FIELDS = ("patient_id", "slice_index", "member", "slice_label", "p_nonpca", "p_pca")


def stage_infer(cfg):
    man, paths, stats = load_split(cfg)
    nets = [network_from_checkpoint(_require(_p(cfg, "checkpoints", f"member{i + 1}.pcnn"), "train"))
            for i in range(cfg.n_members)]
    os.makedirs(_p(cfg, "predictions"), exist_ok=True)
    out = _p(cfg, "predictions", "slice_probs.csv")
    with open(out, "w", newline="") as f:
        f.write(f"# {_tag(cfg, 'infer')}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(PROB_FIELDS)
        for pid in sorted(man.labels):
            vol = _load_volume(cfg, paths[pid])
            x = D.normalize(vol.slices, stats)
            for m, net in enumerate(nets, 1):
                probs = net.predict_proba(x, 32)
                for s, (p0, p1) in enumerate(probs):
                    w.writerow([pid, s, m, int(vol.slice_labels[s]), repr(float(p0)), repr(float(p1))])
    _write_stage_manifest(cfg, "infer", [out])
    return out


def read_slice_probs(path):
    """``{pid: {"labels": (S,), "probs": [per-member (S, 2)]}}``."""
    rows = {}
    with open(path, newline="") as f:
        for r in csv.DictReader(line for line in f if not line.startswith("#")):
            d = rows.setdefault(r["patient_id"], {})
            d.setdefault(int(r["member"]), []).append(
                (int(r["slice_index"]), int(r["slice_label"]), float(r["p_nonpca"]), float(r["p_pca"])))
    out = {}
    for pid, members in rows.items():
        probs, labels = [], None
        for m in sorted(members):
            entries = sorted(members[m])
            probs.append(np.array([[e[2], e[3]] for e in entries]))
            labels = np.array([e[1] for e in entries])
        out[pid] = {"labels": labels, "probs": probs}
    return out


def stage_features(cfg):
    man, _, _ = load_split(cfg)
    sp = read_slice_probs(_require(_p(cfg, "predictions", "slice_probs.csv"), "infer"))
    ids = sorted(man.labels)
    missing = [p for p in ids if p not in sp]
    if missing:
        raise MissingArtifactError(f"no slice predictions for {missing[:3]}; rerun 'infer'")
    X = feature_matrix({p: sp[p]["probs"] for p in ids}, ids, None, cfg.cutoff, cfg.top_k)
    os.makedirs(_p(cfg, "features"), exist_ok=True)
    out = _p(cfg, "features", "features.csv")
    write_feature_csv(out, ids, [man.labels[p] for p in ids], X, comment=_tag(cfg, "features"))
    names = _p(cfg, "features", "feature_names.txt")
    with open(names, "w") as f:
        f.write(f"# {_tag(cfg, 'features')}\n")
        for i, n in enumerate(feature_names(cfg.n_members)):
            f.write(f"f_{i:03d} {n}\n")
    _write_stage_manifest(cfg, "features", [out, names])
    return out


def write_feature_csv(path, ids, labels, X, comment=None):
    with open(path, "w", newline="") as f:
        if comment:
            f.write(f"# {comment}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["patient_id", "label"] + [f"f_{i:03d}" for i in range(X.shape[1])])
        for pid, lab, row in zip(ids, labels, X):
            w.writerow([pid, int(lab)] + [repr(float(v)) for v in row])


def read_feature_csv(path):
    ids, labels, rows = [], [], []
    with open(path, newline="") as f:
        reader = csv.reader(line for line in f if not line.startswith("#"))
        next(reader)
        for r in reader:
            ids.append(r[0])
            labels.append(int(r[1]))
            rows.append([float(v) for v in r[2:]])
    return ids, np.array(labels), np.array(rows)


def _fit_ids(cfg, man):
    ids = sorted(man.val) if cfg.rf_fit_set == "val" else sorted(man.train + man.val)
    pos = sum(man.labels[p] for p in ids)
    if min(pos, len(ids) - pos) < 2:
        raise InsufficientDataError(f"forest fit set '{cfg.rf_fit_set}' has {pos} positive and {len(ids) - pos} "
                                    "negative patients; need at least 2 of each (more patients or rf_fit_set=trainval)")
    return ids


def _single_columns():
    """Columns of member 1 inside the member-major feature vector."""
    return np.arange(len(CLASSES) * N_STATS)


def stage_select(cfg):
    man, _, _ = load_split(cfg)
    ids, labels, X = read_feature_csv(_require(_p(cfg, "features", "features.csv"), "features"))
    row = {p: i for i, p in enumerate(ids)}
    fit = [row[p] for p in _fit_ids(cfg, man)]
    Xf, yf = X[fit], labels[fit]
    ens, k_ens = select_features(Xf, yf, cfg.select_k, cfg.rf_seed, cfg.selector_trees,
                                 cfg.k_grid_values(), cfg.cv_folds, cfg.forest_config())
    single_cols = _single_columns()
    sub, k_single = select_features(Xf[:, single_cols], yf, cfg.select_k, cfg.rf_seed, cfg.selector_trees,
                                    cfg.k_grid_values(), cfg.cv_folds, cfg.forest_config())
    out = _p(cfg, "features", "selected.json")
    _write_json(out, {"config_hash": cfg.hash(), "fit_set": cfg.rf_fit_set,
                      "ensemble": [int(i) for i in ens], "single": [int(i) for i in single_cols[sub]],
                      "k_ensemble": int(k_ens), "k_single": int(k_single)})
    _write_stage_manifest(cfg, "select", [out], {"rf_seed": cfg.rf_seed})
    return out


def stage_train_rf(cfg):
    man, _, _ = load_split(cfg)
    ids, labels, X = read_feature_csv(_require(_p(cfg, "features", "features.csv"), "features"))
    with open(_require(_p(cfg, "features", "selected.json"), "select")) as f:
        sel = json.load(f)
    row = {p: i for i, p in enumerate(ids)}
    fit = [row[p] for p in _fit_ids(cfg, man)]
    os.makedirs(_p(cfg, "models"), exist_ok=True)
    outs = []
    for arm in ("ensemble", "single"):
        model = forest_train(X[fit], labels[fit], sel[arm], cfg.forest_config(), cfg.rf_seed)
        path = _p(cfg, "models", f"forest_{arm}.prfm")
        save_forest(path, model, meta=f"{_tag(cfg, 'train-rf')} arm={arm}")
        outs.append(path)
    _write_stage_manifest(cfg, "train-rf", outs, {"rf_seed": cfg.rf_seed})
    return outs


def _fmt(v):
    return "" if v is None else repr(float(v))


def stage_evaluate(cfg):
    man, _, _ = load_split(cfg)
    sp = read_slice_probs(_require(_p(cfg, "predictions", "slice_probs.csv"), "infer"))
    ids, labels, X = read_feature_csv(_require(_p(cfg, "features", "features.csv"), "features"))
    os.makedirs(_p(cfg, "eval"), exist_ok=True)
    tag = _tag(cfg, "evaluate")
    outs = []
    metrics = []

    def slice_set(pids, member):
        s = np.concatenate([sp[p]["probs"][member][:, 1] for p in pids])
        y = np.concatenate([sp[p]["labels"] for p in pids])
        return s, y

    for m in range(cfg.n_members):
        s, y = slice_set(sorted(man.test), m)
        curve = roc(s, y)
        curve.ci95 = bootstrap_ci(s, y, cfg.n_boot, cfg.ci_level, cfg.eval_seed)
        for path, fn in ((f"slice_member{m + 1}_roc.csv", write_roc_csv),
                         (f"slice_member{m + 1}_summary.csv", write_summary)):
            fn(_p(cfg, "eval", path), curve, comment=tag)
            outs.append(_p(cfg, "eval", path))
        metrics += [(f"slice_test_auc_member{m + 1}", curve.auc),
                    (f"slice_test_ci_lo_member{m + 1}", curve.ci95[0]),
                    (f"slice_test_ci_hi_member{m + 1}", curve.ci95[1])]
        vs, vy = slice_set(sorted(man.val), m)
        if 0 < vy.sum() < vy.size:
            metrics.append((f"slice_val_auc_member{m + 1}", auc_mann_whitney(vs, vy)))

    row = {p: i for i, p in enumerate(ids)}
    test = sorted(man.test)
    Xt = X[[row[p] for p in test]]
    yt = labels[[row[p] for p in test]]
    scores = {}
    for arm in ("ensemble", "single"):
        model, _ = load_forest(_require(_p(cfg, "models", f"forest_{arm}.prfm"), "train-rf"))
        scores[arm] = model.predict_proba(Xt)
        curve = roc(scores[arm], yt)
        curve.ci95 = bootstrap_ci(scores[arm], yt, cfg.n_boot, cfg.ci_level, cfg.eval_seed)
        for path, fn in ((f"patient_{arm}_roc.csv", write_roc_csv), (f"patient_{arm}_summary.csv", write_summary)):
            fn(_p(cfg, "eval", path), curve, comment=tag)
            outs.append(_p(cfg, "eval", path))
        ppv, npv, sens, spec = ppv_npv(scores[arm], yt, cfg.threshold)
        metrics += [(f"patient_auc_{arm}", curve.auc), (f"patient_ci_lo_{arm}", curve.ci95[0]),
                    (f"patient_ci_hi_{arm}", curve.ci95[1]), (f"patient_ppv_{arm}", ppv),
                    (f"patient_npv_{arm}", npv), (f"patient_sensitivity_{arm}", sens),
                    (f"patient_specificity_{arm}", spec)]
    p = paired_auc_test(scores["ensemble"], scores["single"], yt, cfg.n_boot, cfg.eval_seed)
    metrics.append(("patient_auc_diff_p_value", p))

    spath = _p(cfg, "eval", "patient_scores.csv")
    with open(spath, "w") as f:
        f.write(f"# {tag}\n")
        f.write("patient_id,label,score_ensemble,score_single\n")
        for pid, lab, a, b in zip(test, yt, scores["ensemble"], scores["single"]):
            f.write(f"{pid},{int(lab)},{_fmt(a)},{_fmt(b)}\n")
    mpath = _p(cfg, "eval", "metrics.csv")
    with open(mpath, "w") as f:
        f.write(f"# {tag}\n")
        f.write("metric,value\n")
        for name, v in metrics:
            f.write(f"{name},{_fmt(v)}\n")
    outs += [spath, mpath]
    _write_stage_manifest(cfg, "evaluate", outs, {"eval_seed": cfg.eval_seed})
    return dict(metrics)


def read_metrics(path):
    out = {}
    with open(path) as f:
        for line in f:
            if line.startswith("#") or line.startswith("metric,"):
                continue
            k, v = line.strip().split(",", 1)
            out[k] = float(v) if v else None
    return out


class _Curve:
    def __init__(self, rows, auc):
        self.fpr = [r[1] for r in rows]
        self.tpr = [r[2] for r in rows]
        self.auc = auc


def stage_plot(cfg):
    metrics = read_metrics(_require(_p(cfg, "eval", "metrics.csv"), "evaluate"))
    tag = _tag(cfg, "plot")
    outs = []
    slice_curves = []
    for m in range(cfg.n_members):
        rows = read_roc_csv(_require(_p(cfg, "eval", f"slice_member{m + 1}_roc.csv"), "evaluate"))
        slice_curves.append((f"CNN{m + 1}", _Curve(rows, metrics[f"slice_test_auc_member{m + 1}"])))
    patient_curves = []
    for arm in ("ensemble", "single"):
        rows = read_roc_csv(_require(_p(cfg, "eval", f"patient_{arm}_roc.csv"), "evaluate"))
        patient_curves.append((arm, _Curve(rows, metrics[f"patient_auc_{arm}"])))
    for name, title, curves in (("slice_roc.svg", "Slice-level ROC (test)", slice_curves),
                                ("patient_roc.svg", "Patient-level ROC (test)", patient_curves)):
        path = _p(cfg, "eval", name)
        with open(path, "w") as f:
            f.write(roc_svg(curves, title, comment=tag))
        outs.append(path)
    _write_stage_manifest(cfg, "plot", outs)
    return outs


STAGES = {
    "synth": stage_synth,
    "preprocess": stage_preprocess,
    "split": stage_split,
    "train": stage_train,
    "infer": stage_infer,
    "features": stage_features,
    "select": stage_select,
    "train-rf": stage_train_rf,
    "evaluate": stage_evaluate,
    "plot": stage_plot,
}


def run_all(cfg, workers=None, synth=True):
    order = list(STAGES)
    if not synth:
        order.remove("synth")
    for name in order:
        log.info("== stage %s", name)
        if name == "train":
            stage_train(cfg, workers)
        else:
            STAGES[name](cfg)

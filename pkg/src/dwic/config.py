"""Flat ``key = value`` pipeline configuration.

Lines are ``key = value``; ``#`` starts a comment; blank lines are
ignored. Unknown keys and out-of-range values are errors. Path keys
(``data_dir``, ``work_dir``) and ``parallel_members`` are excluded from the
config hash: the same experiment in another directory or with another
worker count hashes identically.
"""

import dataclasses
import hashlib
import os

from .forest import ForestConfig
from .model import ModelSpec
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


PATH_KEYS = ("data_dir", "work_dir")
UNHASHED_KEYS = PATH_KEYS + ("parallel_members",)


@dataclasses.dataclass(frozen=True)
class PipelineConfig:
    data_dir: str = "data"
    work_dir: str = ""
    # synthetic cohort
    n_patients: int = 120
    lesion_contrast: float = 6.0
    synth_size: int = 64
    synth_seed: int = 0
    pos_frac: float = 175 / 427
    # preprocessing and split
    resize_to: int = 144
    crop_to: int = 66
    normalization_scope: str = "train"
    test_frac: float = 0.25
    val_frac: float = 0.15
    split_seed: int = 0
    # CNN
    model: str = "resnet41"
    toy_width: int = 8
    toy_blocks: str = "1,1"
    dropout: float = 0.9
    fc_hidden: int = 0
    lr0: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 1e-6
    batch_size: int = 8
    plateau_patience: int = 10
    min_delta: float = 1e-4
    lr_factor: float = 0.1
    min_lr: float = 1e-6
    max_epochs: int = 100
    class_weight_pos: float = 1.0
    n_members: int = 5
    base_seed: int = 0
    parallel_members: int = 1
    # patient level
    cutoff: float = 0.74
    top_k: int = 5
    select_k: int = 26
    k_grid: str = ""
    cv_folds: int = 10
    selector_trees: int = 100
    n_trees: int = 200
    max_depth: int = -1
    min_samples_leaf: int = 1
    mtry: str = "sqrt"
    rf_seed: int = 0
    rf_fit_set: str = "val"
    # evaluation
    n_boot: int = 2000
    ci_level: float = 0.95
    eval_seed: int = 0
    threshold: float = 0.5

    def __post_init__(self):
        checks = [
            (self.n_patients >= 2, "n_patients must be >= 2"),
            (self.lesion_contrast >= 0, "lesion_contrast must be >= 0"),
            (self.synth_size >= 8, "synth_size must be >= 8"),
            (0 < self.pos_frac < 1, "pos_frac must be in (0, 1)"),
            (self.crop_to <= self.resize_to, "crop_to must not exceed resize_to"),
            (self.normalization_scope in ("train", "all"), "normalization_scope must be train or all"),
            (0 < self.test_frac < 1 and 0 < self.val_frac < 1, "split fractions must be in (0, 1)"),
            (self.model in ("resnet41", "toy"), "model must be resnet41 or toy"),
            (0 <= self.dropout < 1, "dropout must be in [0, 1)"),
            (self.lr0 > 0, "lr0 must be > 0"),
            (0 <= self.momentum < 1, "momentum must be in [0, 1)"),
            (self.batch_size >= 2, "batch_size must be >= 2"),
            (self.max_epochs >= 0, "max_epochs must be >= 0"),
            (self.class_weight_pos > 0, "class_weight_pos must be > 0"),
            (1 <= self.n_members, "n_members must be >= 1"),
            (self.parallel_members >= 1, "parallel_members must be >= 1"),
            (0 <= self.cutoff < 1, "cutoff must be in [0, 1)"),
            (self.top_k >= 1, "top_k must be >= 1"),
            (self.select_k >= 1, "select_k must be >= 1"),
            (self.cv_folds >= 2, "cv_folds must be >= 2"),
            (self.n_trees >= 1 and self.selector_trees >= 1, "tree counts must be >= 1"),
            (self.rf_fit_set in ("val", "trainval"), "rf_fit_set must be val or trainval"),
            (self.n_boot >= 10, "n_boot must be >= 10"),
            (0 < self.ci_level < 1, "ci_level must be in (0, 1)"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        try:
            self.model_spec()
            self.forest_config()
            self.train_config()
            self.k_grid_values()
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def model_spec(self):
        if self.model == "toy":
            try:
                blocks = tuple(int(b) for b in self.toy_blocks.split(","))
            except ValueError:
                raise ConfigError("toy_blocks must be two comma-separated integers") from None
            if len(blocks) != 2:
                raise ConfigError("toy_blocks must be two comma-separated integers")
            spec = ModelSpec.toy(self.toy_width, blocks, dropout=self.dropout, fc_hidden=self.fc_hidden,
                                 input_size=self.crop_to)
        else:
            spec = ModelSpec(dropout=self.dropout, fc_hidden=self.fc_hidden, input_size=self.crop_to)
        return spec

    def train_config(self, seed=0):
        cw = None if self.class_weight_pos == 1.0 else (1.0, self.class_weight_pos)
        return TrainConfig(lr0=self.lr0, momentum=self.momentum, weight_decay=self.weight_decay,
                           batch_size=self.batch_size, plateau_patience=self.plateau_patience,
                           min_delta=self.min_delta, lr_factor=self.lr_factor, min_lr=self.min_lr,
                           max_epochs=self.max_epochs, seed=seed, class_weights=cw)

    def forest_config(self):
        if self.mtry in ("sqrt", "all"):
            mtry = self.mtry
        elif self.mtry.isdigit() and int(self.mtry) >= 1:
            mtry = int(self.mtry)
        else:
            raise ConfigError("mtry must be sqrt, all or a positive integer")
        return ForestConfig(n_trees=self.n_trees, max_depth=None if self.max_depth < 0 else self.max_depth,
                            min_samples_leaf=self.min_samples_leaf, mtry=mtry)

    def k_grid_values(self):
        return [int(v) for v in self.k_grid.split(",") if v.strip()] if self.k_grid else None

    def canonical_text(self):
        """Sorted ``key=value`` lines of every hashed field."""
        d = dataclasses.asdict(self)
        return "".join(f"{k}={d[k]!r}\n" for k in sorted(d) if k not in UNHASHED_KEYS)

    def hash(self):
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:16]

    def to_text(self):
        d = dataclasses.asdict(self)
        return "".join(f"{k} = {d[k]}\n" for k in d)


_FIELDS = {f.name: f for f in dataclasses.fields(PipelineConfig)}


def _coerce(key, raw):
    field = _FIELDS.get(key)
    if field is None:
        raise ConfigError(f"unknown config key {key!r}")
    default = field.default
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None
    return raw


def parse_config_text(text):
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        values[key] = _coerce(key, raw)
    return values


def load_config(path=None, overrides=None):
    """Config from file ``path`` (optional) with ``overrides`` (``key=value`` strings) applied last."""
    values = {}
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file {path} does not exist")
        with open(path) as f:
            values.update(parse_config_text(f.read()))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        values[k.strip()] = _coerce(k.strip(), v.strip())
    if not values.get("work_dir"):
        values["work_dir"] = os.environ.get("DWIC_WORKDIR", "work")
    try:
        return PipelineConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None

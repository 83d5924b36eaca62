"""Standard-vs-targeted training comparisons over repeated random splits.

Every split ``s`` derives its Philox streams from ``SeedSequence(seed,
spawn_key=(s,))``, so the partition, the initial network and the batch
stream of split ``s`` are the same for every method (paired splits) and do
not depend on how many splits are run.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import nn
from .data import (
    CsvSchema,
    Dataset,
    TargetSet,
    apply_standardization,
    fit_standardization,
    generate_synthetic_clustered,
    load_csv,
    load_idx_images,
    resolve_path,
    split_for_targeting,
    standardize_targets,
)
from .io import atomic_write, write_json
from .sampling import RESAMPLE, WEIGHTED_BATCH, build_alias_table, build_plan, resample_dataset
from .similarity import COSINE_MAX, MEASURES, SimilarityMeasure, score_dataset
from .streams import make_rng

log = logging.getLogger(__name__)

STANDARD = "standard"
TARGETED_BATCH = "targeted-batch"
TARGETED_RESAMPLE = "targeted-resample"
METHODS = (STANDARD, TARGETED_BATCH, TARGETED_RESAMPLE)

CSV_COLUMNS = ("method", "split", "epoch", "trainingLoss", "targetMetric", "wallClockSeconds")


class ConfigError(ValueError):
    """An invalid experiment setting; ``field`` names the offending key."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class TrainingDiverged(RuntimeError):
    pass


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclass
class DatasetSpec:
    kind: str = "synthetic"  # synthetic | csv | idx
    name: Optional[str] = None
    # csv
    path: Optional[str] = None
    label_column: int = -1
    feature_columns: Optional[tuple] = None
    header: Optional[bool] = None
    n_classes: Optional[int] = None
    delimiter: str = ","
    # idx
    images: Optional[str] = None
    labels: Optional[str] = None
    limit: Optional[int] = None
    # synthetic
    n_per_cluster: int = 200
    p: int = 5
    clusters: int = 2
    data_seed: int = 0
    separation: float = 6.0
    noise: float = 0.1


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    g: Union[int, float, str] = 1
    methods: tuple = (STANDARD, TARGETED_BATCH)
    t: float = 10.0
    epochs: Optional[int] = None  # None: 200 tabular, 20 images
    batch_size: int = 64
    learning_rate: float = 0.005
    splits: int = 20
    seed: int = 0
    architecture: str = "mlp"  # mlp | convnet
    hidden: tuple = (150, 50)
    kernel_sizes: tuple = (3, 5)
    channels: tuple = (16, 32)
    standardization: str = "auto"  # auto | columnwise | overall | none
    similarity: str = COSINE_MAX
    target_pool: str = "all"  # all | group:<k>
    workers: int = 1

    def validate(self) -> "ExperimentConfig":
        if self.splits < 1:
            raise ConfigError("splits", "must be at least 1")
        if self.epochs is not None and self.epochs < 1:
            raise ConfigError("epochs", "must be at least 1")
        if not self.learning_rate > 0:
            raise ConfigError("learningRate", "must be positive")
        if self.batch_size < 1:
            raise ConfigError("batchSize", "must be at least 1")
        if not self.t > 0:
            raise ConfigError("t", "must be positive")
        if not self.methods:
            raise ConfigError("method", "at least one method is required")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError("method", f"unknown method {m!r}; choose from {METHODS}")
        if self.architecture not in ("mlp", "convnet"):
            raise ConfigError("architecture", f"unknown architecture {self.architecture!r}")
        if self.standardization not in ("auto", "columnwise", "overall", "none"):
            raise ConfigError("standardization", f"unknown mode {self.standardization!r}")
        if self.similarity not in MEASURES:
            raise ConfigError("similarity", f"unknown measure {self.similarity!r}")
        if self.dataset.kind not in ("synthetic", "csv", "idx"):
            raise ConfigError("dataset.kind", f"unknown dataset kind {self.dataset.kind!r}")
        if self.workers < 1:
            raise ConfigError("workers", "must be at least 1")
        if self.target_pool != "all" and not self.target_pool.startswith("group:"):
            raise ConfigError("targetPool", "must be 'all' or 'group:<index>'")
        if isinstance(self.g, str):
            resolve_group_size(self.g, 10**9)  # syntax check only
        return self

    def resolved_epochs(self, data: Dataset) -> int:
        if self.epochs is not None:
            return self.epochs
        return 20 if data.image_shape is not None else 200

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def resolve_group_size(g, n: int) -> int:
    """Accepts a count, a fraction of ``n`` in (0, 1), or ``"n/4"``-style text."""
    value = g
    if isinstance(g, str):
        text = g.strip().replace(" ", "")
        try:
            if text.startswith("n/"):
                value = n // int(text[2:])
            elif "." in text:
                value = float(text)
            else:
                value = int(text)
        except (ValueError, ZeroDivisionError):
            raise ConfigError("g", f"cannot parse group size {g!r}") from None
    if isinstance(value, float):
        if not 0 < value < 1:
            raise ConfigError("g", f"fractional group size must lie in (0, 1), got {value}")
        value = int(math.floor(value * n))
    value = int(value)
    if not 1 <= value <= n - 1:
        raise ConfigError("g", f"group size {value} outside 1..{n - 1}")
    return value


# --------------------------------------------------------------------------
# traces and aggregation
# --------------------------------------------------------------------------

@dataclass
class MetricTrace:
    method: str
    split: int
    training_loss: np.ndarray
    target_metric: np.ndarray
    wall_clock: np.ndarray
    n_train: int = 0
    g: int = 0

    @property
    def epochs(self) -> int:
        return len(self.training_loss)


@dataclass
class AggregateCurve:
    mean: np.ndarray
    lower: np.ndarray  # 25th percentile
    upper: np.ndarray  # 75th percentile

    @classmethod
    def from_values(cls, values) -> "AggregateCurve":
        """``values`` has shape (splits, epochs); quartiles interpolate linearly."""
        v = np.atleast_2d(np.asarray(values, dtype=np.float64))
        lower, upper = np.percentile(v, [25, 75], axis=0, method="linear")
        return cls(v.mean(axis=0), lower, upper)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "q25": self.lower.tolist(), "q75": self.upper.tolist()}


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    traces: list
    task: str
    metric: str
    n: int
    g: int
    epochs: int

    def traces_for(self, method: str) -> list:
        return [tr for tr in self.traces if tr.method == method]

    def values(self, method: str, which: str = "target_metric") -> np.ndarray:
        """(splits, epochs) array of one recorded quantity."""
        return np.array([getattr(tr, which) for tr in self.traces_for(method)])

    def final(self, method: str, which: str = "target_metric") -> np.ndarray:
        return self.values(method, which)[:, -1]

    def curve(self, method: str, which: str = "target_metric") -> AggregateCurve:
        return AggregateCurve.from_values(self.values(method, which))

    @property
    def methods(self) -> list:
        return [m for m in self.config.methods if self.traces_for(m)]


def epochs_to_reach(curve_mean, level: float, higher_is_better: bool = False) -> Optional[int]:
    """First (1-based) epoch whose mean reaches ``level``; None if never."""
    m = np.asarray(curve_mean)
    hit = m >= level if higher_is_better else m <= level
    idx = np.flatnonzero(hit)
    return int(idx[0]) + 1 if len(idx) else None


# --------------------------------------------------------------------------
# data preparation
# --------------------------------------------------------------------------

def load_dataset(spec: DatasetSpec, base: Optional[Path] = None) -> Dataset:
    if spec.kind == "synthetic":
        return generate_synthetic_clustered(spec.n_per_cluster, spec.p, spec.clusters, spec.data_seed,
                                            separation=spec.separation, noise=spec.noise,
                                            n_classes=spec.n_classes)
    if spec.kind == "csv":
        if not spec.path:
            raise ConfigError("dataset.path", "required for csv datasets")
        schema = CsvSchema(label_column=spec.label_column, feature_columns=spec.feature_columns,
                           header=spec.header, n_classes=spec.n_classes, delimiter=spec.delimiter)
        return load_csv(resolve_path(spec.path, base), schema, name=spec.name)
    if not (spec.images and spec.labels):
        raise ConfigError("dataset.images", "idx datasets need both images and labels paths")
    return load_idx_images(resolve_path(spec.images, base), resolve_path(spec.labels, base),
                           limit=spec.limit, name=spec.name)


def _standardization_mode(config: ExperimentConfig, data: Dataset) -> Optional[str]:
    if config.standardization == "none":
        return None
    if config.standardization != "auto":
        return config.standardization
    # regression tables column by column; classification and images overall
    return "overall" if data.task.is_classification else "columnwise"


def _target_candidates(config: ExperimentConfig, data: Dataset):
    if config.target_pool == "all":
        return None
    if data.groups is None:
        raise ConfigError("targetPool", "dataset carries no row groups")
    try:
        group = int(config.target_pool.split(":", 1)[1])
    except ValueError:
        raise ConfigError("targetPool", f"bad group index in {config.target_pool!r}") from None
    rows = np.flatnonzero(data.groups == group)
    if len(rows) == 0:
        raise ConfigError("targetPool", f"no rows in group {group}")
    return rows


def prepare_split(config: ExperimentConfig, data: Dataset, g: int,
                  rng: np.random.Generator) -> tuple[Dataset, TargetSet]:
    train, targets = split_for_targeting(data, g, rng, candidates=_target_candidates(config, data))
    mode = _standardization_mode(config, data)
    if mode is not None and train.n >= 2:
        stats = fit_standardization(train, mode)
        train = apply_standardization(train, stats)
        targets = standardize_targets(targets, stats)
    return train, targets


def build_network(config: ExperimentConfig, data: Dataset, rng: np.random.Generator) -> nn.Network:
    if config.architecture == "convnet":
        if data.image_shape is None:
            raise ConfigError("architecture", "convnet needs image data")
        return nn.build_convnet(data.image_shape, config.kernel_sizes, config.channels,
                                data.task.n_classes, rng)
    head = nn.SOFTMAX_CROSS_ENTROPY if data.task.is_classification else nn.SQUARED_ERROR
    return nn.build_mlp(data.p, config.hidden, head, rng, n_classes=data.task.n_classes)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

class ShuffledBatches:
    """Conventional epoch batching: walk a random permutation in chunks of
    ``b``, reshuffling whenever it is used up."""

    def __init__(self, n: int, b: int, rng: np.random.Generator):
        self.n, self.b, self.rng = n, b, rng
        self._order = rng.permutation(n)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos >= self.n:
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._order[self._pos:self._pos + self.b]
        self._pos += len(idx)
        return idx


class WeightedBatches:
    def __init__(self, table, b: int, rng: np.random.Generator):
        self.table, self.b, self.rng = table, b, rng

    def next(self) -> np.ndarray:
        return self.table.sample(self.b, self.rng)


def target_metric_name(data: Dataset) -> str:
    return "accuracy" if data.task.is_classification else "squared-error"


def train_method(method: str, config: ExperimentConfig, train: Dataset, target_inputs: np.ndarray,
                 net: nn.Network, epochs: int, rng: np.random.Generator, evaluate_epoch=None):
    """Train ``net`` with one method; only target *inputs* are visible here.

    ``evaluate_epoch(net)`` is called after every epoch and its value is
    recorded. Returns (network, training losses, per-epoch metric, wall clock).
    """
    pool = train
    if method == STANDARD:
        batches = ShuffledBatches(train.n, config.batch_size, rng)
    else:
        scores = score_dataset(train, target_inputs, SimilarityMeasure(config.similarity))
        if method == TARGETED_BATCH:
            plan = build_plan(scores, WEIGHTED_BATCH)
            batches = WeightedBatches(build_alias_table(plan), config.batch_size, rng)
        else:
            plan = build_plan(scores, RESAMPLE, t=config.t)
            pool = resample_dataset(plan, train, config.t, rng)
            batches = ShuffledBatches(pool.n, config.batch_size, rng)

    steps = math.ceil(train.n / config.batch_size)
    losses = np.empty(epochs)
    metrics = np.empty(epochs)
    clock = np.empty(epochs)
    x_all, y_all = pool.features, pool.labels
    start = time.perf_counter()
    for epoch in range(epochs):
        total = 0.0
        for _ in range(steps):
            idx = batches.next()
            loss, grad = nn.loss_and_gradient(net, x_all[idx], y_all[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"{method}: non-finite loss at epoch {epoch + 1}")
            net = nn.sgd_step(net, grad, config.learning_rate)
            total += loss
        losses[epoch] = total / steps
        clock[epoch] = time.perf_counter() - start
        metrics[epoch] = evaluate_epoch(net) if evaluate_epoch is not None else np.nan
    return net, losses, metrics, clock


def split_seed(seed: int, split: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(seed, spawn_key=(split,))


def run_split(config: ExperimentConfig, split: int, data: Optional[Dataset] = None) -> list:
    """One paired split: the same partition and initial network for every method."""
    config.validate()
    data = data if data is not None else load_dataset(config.dataset)
    g = resolve_group_size(config.g, data.n)
    epochs = config.resolved_epochs(data)
    part_seq, init_seq, train_seq = split_seed(config.seed, split).spawn(3)
    train, targets = prepare_split(config, data, g, make_rng(part_seq))
    net0 = build_network(config, data, make_rng(init_seq))
    metric = target_metric_name(data)
    held_out = np.asarray(targets.held_out_labels)

    def evaluate_targets(net):
        return nn.evaluate(net, targets.targets, held_out, metric)

    traces = []
    for method in config.methods:
        _, losses, metrics, clock = train_method(
            method, config, train, targets.targets, net0, epochs,
            make_rng(train_seq), evaluate_targets)
        if not np.all(np.isfinite(metrics)):
            raise TrainingDiverged(f"{method}: non-finite target metric in split {split}")
        traces.append(MetricTrace(method, split, losses, metrics, clock, n_train=train.n, g=g))
    return traces


def _run_split_job(args):
    config, split, data = args
    return run_split(config, split, data)


def run_experiment(config: ExperimentConfig, data: Optional[Dataset] = None,
                   base: Optional[Path] = None) -> ExperimentResult:
    config.validate()
    data = data if data is not None else load_dataset(config.dataset, base)
    g = resolve_group_size(config.g, data.n)
    jobs = [(config, s, data) for s in range(config.splits)]
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            per_split = list(pool.map(_run_split_job, jobs))
    else:
        per_split = [_run_split_job(job) for job in jobs]
        for s, _ in enumerate(per_split):
            log.debug("split %d/%d done", s + 1, config.splits)
    traces = [tr for split_traces in per_split for tr in split_traces]
    return ExperimentResult(config, traces, str(data.task), target_metric_name(data), data.n, g,
                            config.resolved_epochs(data))


def run_t_sensitivity(base_config: ExperimentConfig, t_values: Sequence[float],
                      data: Optional[Dataset] = None) -> dict:
    """One resample-scheme experiment per ``t``, sharing split seeds."""
    if TARGETED_RESAMPLE not in base_config.methods:
        raise ConfigError("method", "t-sensitivity needs the targeted-resample method")
    data = data if data is not None else load_dataset(base_config.dataset)
    out = {}
    for t in t_values:
        cfg = dataclasses.replace(base_config, methods=(TARGETED_RESAMPLE,), t=float(t))
        out[float(t)] = run_experiment(cfg, data)
    return out


def run_group_study(base_config: ExperimentConfig, g_values: Sequence,
                    data: Optional[Dataset] = None) -> dict:
    """One experiment per group size; keys are the resolved sizes."""
    data = data if data is not None else load_dataset(base_config.dataset)
    out = {}
    for g in g_values:
        size = resolve_group_size(g, data.n)
        out[size] = run_experiment(dataclasses.replace(base_config, g=size), data)
    return out


# --------------------------------------------------------------------------
# outputs
# --------------------------------------------------------------------------

def write_metrics_csv(path, results: Sequence[ExperimentResult], extra: Optional[dict] = None) -> None:
    """One row per (method, split, epoch). ``extra`` maps a column name to one
    value per result, for studies that stack several experiments."""
    extra = extra or {}
    with atomic_write(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(extra) + list(CSV_COLUMNS))
        for i, result in enumerate(results):
            prefix = [values[i] for values in extra.values()]
            for tr in result.traces:
                for e in range(tr.epochs):
                    writer.writerow(prefix + [tr.method, tr.split, e + 1, repr(float(tr.training_loss[e])),
                                              repr(float(tr.target_metric[e])),
                                              f"{tr.wall_clock[e]:.6f}"])


def summary_dict(result: ExperimentResult) -> dict:
    methods = {}
    for m in result.methods:
        methods[m] = {
            "trainingLoss": result.curve(m, "training_loss").to_dict(),
            "targetMetric": result.curve(m, "target_metric").to_dict(),
            "finalTargetMetric": result.final(m).tolist(),
        }
    n_train = result.traces[0].n_train if result.traces else None
    return {
        "config": result.config.to_dict(),
        "task": result.task,
        "targetMetric": result.metric,
        "n": result.n,
        "g": result.g,
        "nTrain": n_train,
        "epochs": result.epochs,
        "splits": result.config.splits,
        "methods": methods,
    }


def write_summary_json(path, payload) -> None:
    write_json(path, payload)


# --------------------------------------------------------------------------
# manifests
# --------------------------------------------------------------------------

MANIFEST_KEYS = {
    # manifest key: (config attribute, parser)
    "g": ("g", str),
    "method": ("methods", lambda v: tuple(m.strip() for m in v.split(",") if m.strip())),
    "t": ("t", float),
    "epochs": ("epochs", int),
    "batchSize": ("batch_size", int),
    "learningRate": ("learning_rate", float),
    "splits": ("splits", int),
    "seed": ("seed", int),
    "architecture": ("architecture", str),
    "hidden": ("hidden", lambda v: tuple(int(x) for x in v.split(","))),
    "kernelSizes": ("kernel_sizes", lambda v: tuple(int(x) for x in v.split(","))),
    "channels": ("channels", lambda v: tuple(int(x) for x in v.split(","))),
    "standardization": ("standardization", str),
    "similarity": ("similarity", str),
    "targetPool": ("target_pool", str),
    "workers": ("workers", int),
}


def _parse_bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


DATASET_KEYS = {
    "kind": ("kind", str),
    "name": ("name", str),
    "path": ("path", str),
    "labelColumn": ("label_column", int),
    "featureColumns": ("feature_columns", lambda v: tuple(int(x) for x in v.split(","))),
    "header": ("header", _parse_bool),
    "classes": ("n_classes", int),
    "delimiter": ("delimiter", str),
    "images": ("images", str),
    "labels": ("labels", str),
    "limit": ("limit", int),
    "nPerCluster": ("n_per_cluster", int),
    "p": ("p", int),
    "clusters": ("clusters", int),
    "dataSeed": ("data_seed", int),
    "separation": ("separation", float),
    "noise": ("noise", float),
}


def _apply(target, section, keys, prefix=""):
    for key, raw in section.items():
        if key not in keys:
            raise ConfigError(prefix + key, "unknown manifest key")
        attr, parse = keys[key]
        try:
            setattr(target, attr, parse(raw))
        except ValueError as exc:
            raise ConfigError(prefix + key, f"invalid value {raw!r} ({exc})") from None


def parse_manifest(text: str, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Read an INI-style manifest with ``[experiment]`` and ``[dataset]`` sections.

    ``overrides`` uses manifest key names and wins over the file.
    """
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("manifest", str(exc)) from None
    for name in parser.sections():
        if name not in ("experiment", "dataset"):
            raise ConfigError(name, "unknown manifest section")
    config = ExperimentConfig(dataset=DatasetSpec())
    if parser.has_section("dataset"):
        _apply(config.dataset, parser["dataset"], DATASET_KEYS, "dataset.")
    exp = dict(parser["experiment"]) if parser.has_section("experiment") else {}
    exp.update({k: str(v) for k, v in (overrides or {}).items() if v is not None})
    _apply(config, exp, MANIFEST_KEYS)
    return config.validate()


def load_manifest(path, overrides: Optional[dict] = None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("manifest", f"no such file: {path}")
    return parse_manifest(path.read_text(encoding="utf-8"), overrides)

"""Datasets, loaders, standardization and train/target splitting."""

from __future__ import annotations

import csv
import gzip
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .streams import make_rng

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

STD_EPSILON = 1e-8


class DataError(ValueError):
    """Raised for unreadable or inconsistent input data."""


@dataclass(frozen=True)
class Task:
    """Regression (``n_classes is None``) or k-class classification."""

    n_classes: Optional[int] = None

    @property
    def is_classification(self) -> bool:
        return self.n_classes is not None

    @classmethod
    def regression(cls) -> "Task":
        return cls(None)

    @classmethod
    def classification(cls, k: int) -> "Task":
        if k < 2:
            raise ValueError(f"classification needs at least 2 classes, got {k}")
        return cls(int(k))

    def __str__(self) -> str:
        return "regression" if self.n_classes is None else f"classification({self.n_classes})"


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    task: Task
    name: str = "dataset"
    # (channels, height, width) for image data; None for tabular rows.
    image_shape: Optional[tuple] = None
    # per-row integer tags, e.g. the generating cluster of synthetic rows
    groups: Optional[np.ndarray] = None

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise DataError(f"features must be a non-empty n x p matrix, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise DataError("features contain NaN or Inf")
        y = np.asarray(self.labels)
        if y.shape != (x.shape[0],):
            raise DataError(f"expected {x.shape[0]} labels, got shape {y.shape}")
        if self.task.is_classification:
            if not np.all(np.equal(np.mod(y, 1), 0)):
                raise DataError("classification labels must be integers")
            y = y.astype(np.int64)
            if y.min() < 0 or y.max() >= self.task.n_classes:
                raise DataError(f"labels must lie in 0..{self.task.n_classes - 1}")
        else:
            y = y.astype(np.float64)
            if not np.all(np.isfinite(y)):
                raise DataError("labels contain NaN or Inf")
        if self.image_shape is not None and int(np.prod(self.image_shape)) != x.shape[1]:
            raise DataError(f"image shape {self.image_shape} does not match p={x.shape[1]}")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        if self.groups is not None:
            g = np.asarray(self.groups, dtype=np.int64)
            if g.shape != y.shape:
                raise DataError("groups must have one entry per row")
            g.setflags(write=False)
            object.__setattr__(self, "groups", g)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return replace(
            self,
            features=self.features[rows],
            labels=self.labels[rows],
            groups=None if self.groups is None else self.groups[rows],
        )


@dataclass(frozen=True)
class TargetSet:
    """Unlabeled target inputs.

    ``held_out_labels`` exists only so the evaluator can score predictions
    on the targets; nothing on the training path reads it.
    """

    targets: np.ndarray
    held_out_labels: np.ndarray
    rows: Optional[np.ndarray] = None  # indices into the dataset they came from

    def __post_init__(self):
        w = np.atleast_2d(np.asarray(self.targets, dtype=np.float64))
        if w.shape[0] < 1:
            raise DataError("target set must contain at least one target")
        if len(self.held_out_labels) != w.shape[0]:
            raise DataError("one held-out label per target is required")
        w.setflags(write=False)
        object.__setattr__(self, "targets", w)

    @property
    def g(self) -> int:
        return self.targets.shape[0]

    @property
    def p(self) -> int:
        return self.targets.shape[1]


@dataclass(frozen=True)
class StandardizationStats:
    mode: str  # "columnwise" or "overall"
    means: np.ndarray
    std_devs: np.ndarray
    epsilon: float = STD_EPSILON
    label_mean: Optional[float] = None
    label_std: Optional[float] = None


STANDARDIZATION_MODES = ("columnwise", "overall")


# --------------------------------------------------------------------------
# loaders
# --------------------------------------------------------------------------

@dataclass
class CsvSchema:
    """Which CSV columns hold the label and the features.

    Negative indices count from the end, as in Python. ``feature_columns``
    of None means every column except the label.
    """

    label_column: int = -1
    feature_columns: Optional[Sequence[int]] = None
    header: Optional[bool] = None  # None: sniff
    n_classes: Optional[int] = None  # None: regression
    delimiter: str = ","
    skip_columns: Sequence[int] = field(default_factory=tuple)


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def load_csv(path, schema: Optional[CsvSchema] = None, name: Optional[str] = None) -> Dataset:
    """Read a delimited numeric table into a :class:`Dataset`.

    Classification labels that are not already ``0..k-1`` are mapped onto
    that range in sorted order of their distinct values.
    """
    schema = schema or CsvSchema()
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh, delimiter=schema.delimiter) if any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"{path}: no rows")

    header = schema.header
    if header is None:
        header = not all(_is_number(c) for c in rows[0] if c.strip())
    start = 1 if header else 0
    body = rows[start:]
    if not body:
        raise DataError(f"{path}: zero usable rows")

    width = len(body[0])
    label_col = schema.label_column % width if -width <= schema.label_column < width else None
    if label_col is None:
        raise DataError(f"{path}: label column {schema.label_column} absent (rows have {width} columns)")
    if schema.feature_columns is None:
        skip = {c % width for c in schema.skip_columns}
        feature_cols = [c for c in range(width) if c != label_col and c not in skip]
    else:
        feature_cols = [c % width for c in schema.feature_columns]
        if any(not -width <= c < width for c in schema.feature_columns):
            raise DataError(f"{path}: feature column out of range for {width} columns")

    x = np.empty((len(body), len(feature_cols)))
    y = np.empty(len(body))
    for i, row in enumerate(body):
        line = i + start + 1
        if len(row) != width:
            raise DataError(f"{path}:{line}: expected {width} columns, found {len(row)}")
        try:
            x[i] = [float(row[c]) for c in feature_cols]
            y[i] = float(row[label_col])
        except ValueError as exc:
            raise DataError(f"{path}:{line}: unparseable cell ({exc})") from None
        if not (np.all(np.isfinite(x[i])) and np.isfinite(y[i])):
            raise DataError(f"{path}:{line}: non-finite value")

    if schema.n_classes is None:
        task = Task.regression()
    else:
        task = Task.classification(schema.n_classes)
        if not (np.all(y == np.round(y)) and y.min() >= 0 and y.max() < schema.n_classes):
            values = np.unique(y)
            if len(values) > schema.n_classes:
                raise DataError(
                    f"{path}: {len(values)} distinct labels but n_classes={schema.n_classes}")
            y = np.searchsorted(values, y)
    return Dataset(x, y, task, name=name or path.stem)


def _open_maybe_gzip(path: Path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def _read_idx(path: Path, magic: int, limit: Optional[int]):
    with _open_maybe_gzip(path) as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise DataError(f"{path}: truncated IDX header")
    found, count = struct.unpack(">II", raw[:8])
    if found != magic:
        raise DataError(f"{path}: magic number 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    item = int(np.prod(dims[1:])) if ndim > 1 else 1
    if len(raw) - header < count * item:
        raise DataError(f"{path}: truncated, expected {count * item} data bytes, found {len(raw) - header}")
    take = count if limit is None else min(count, limit)
    data = np.frombuffer(raw, dtype=np.uint8, count=take * item, offset=header)
    return count, dims[1:], data.reshape((take,) + tuple(dims[1:]))


def load_idx_images(images_path, labels_path, limit: Optional[int] = None,
                    name: Optional[str] = None) -> Dataset:
    """Load an MNIST-family IDX image/label pair (optionally gzipped).

    Pixels stay in ``[0, 255]``; standardize afterwards.
    """
    images_path, labels_path = Path(images_path), Path(labels_path)
    for path in (images_path, labels_path):
        if not path.is_file():
            raise DataError(f"no such file: {path}")
    if limit is not None and limit < 1:
        raise DataError("limit must be at least 1")
    n_img, dims, images = _read_idx(images_path, IDX_IMAGE_MAGIC, limit)
    n_lab, _, labels = _read_idx(labels_path, IDX_LABEL_MAGIC, limit)
    if n_img != n_lab:
        raise DataError(f"{n_img} images but {n_lab} labels")
    h, w = dims
    features = images.reshape(len(images), h * w).astype(np.float64)
    return Dataset(features, labels.astype(np.int64), Task.classification(10),
                   name=name or images_path.stem, image_shape=(1, h, w))


def write_idx(path, array: np.ndarray, magic: int) -> None:
    """Write a uint8 array as an uncompressed IDX file."""
    array = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def write_csv(path, data: Dataset, header: bool = True) -> None:
    """Write features then label, one row per sample (atomically)."""
    from .io import atomic_write

    with atomic_write(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if header:
            writer.writerow([f"x{j}" for j in range(data.p)] + ["y"])
        for xi, yi in zip(data.features, data.labels):
            writer.writerow([repr(float(v)) for v in xi] + [repr(yi.item())])


# --------------------------------------------------------------------------
# standardization
# --------------------------------------------------------------------------

def fit_standardization(data: Dataset, mode: str = "columnwise",
                        epsilon: float = STD_EPSILON) -> StandardizationStats:
    """Means and population standard deviations of ``data``'s rows."""
    if mode not in STANDARDIZATION_MODES:
        raise ValueError(f"mode must be one of {STANDARDIZATION_MODES}, got {mode!r}")
    if data.n < 2:
        raise DataError("standardization needs at least 2 rows")
    x = data.features
    if mode == "columnwise":
        means, stds = x.mean(axis=0), x.std(axis=0)
    else:
        means, stds = np.array([x.mean()]), np.array([x.std()])
    label_mean = label_std = None
    if not data.task.is_classification:
        label_mean, label_std = float(data.labels.mean()), float(data.labels.std())
    return StandardizationStats(mode, means, stds, epsilon, label_mean, label_std)


def apply_standardization(data: Dataset, stats: StandardizationStats) -> Dataset:
    """``(x - mean) / max(std, epsilon)``; regression labels are standardized too."""
    if stats.mode == "columnwise" and stats.means.shape[0] != data.p:
        raise DataError(f"stats fitted on p={stats.means.shape[0]}, data has p={data.p}")
    x = (data.features - stats.means) / np.maximum(stats.std_devs, stats.epsilon)
    y = data.labels
    if not data.task.is_classification and stats.label_mean is not None:
        y = (y - stats.label_mean) / max(stats.label_std, stats.epsilon)
    return replace(data, features=x, labels=y)


def standardize_targets(targets: TargetSet, stats: StandardizationStats) -> TargetSet:
    if stats.mode == "columnwise" and stats.means.shape[0] != targets.p:
        raise DataError("target dimension does not match standardization stats")
    w = (targets.targets - stats.means) / np.maximum(stats.std_devs, stats.epsilon)
    v = np.asarray(targets.held_out_labels)
    if stats.label_mean is not None and v.dtype.kind == "f":
        v = (v - stats.label_mean) / max(stats.label_std, stats.epsilon)
    return replace(targets, targets=w, held_out_labels=v)


def unstandardize_features(x: np.ndarray, stats: StandardizationStats) -> np.ndarray:
    return x * np.maximum(stats.std_devs, stats.epsilon) + stats.means


# --------------------------------------------------------------------------
# splitting and synthetic data
# --------------------------------------------------------------------------

def split_for_targeting(data: Dataset, g: int, rng: np.random.Generator,
                        candidates=None) -> tuple[Dataset, TargetSet]:
    """Hold out ``g`` rows, chosen uniformly without replacement, as targets.

    ``candidates`` restricts which rows may become targets (e.g. one cluster
    of a synthetic dataset); all remaining rows are returned for training.
    """
    if not 1 <= g <= data.n - 1:
        raise ValueError(f"g must lie in 1..{data.n - 1}, got {g}")
    pool = np.arange(data.n) if candidates is None else np.asarray(candidates, dtype=np.int64)
    if g > len(pool):
        raise ValueError(f"g={g} exceeds the {len(pool)} candidate rows")
    chosen = np.sort(rng.choice(pool, size=g, replace=False))
    mask = np.ones(data.n, dtype=bool)
    mask[chosen] = False
    targets = TargetSet(data.features[chosen], data.labels[chosen].copy(), rows=chosen)
    return data.subset(np.flatnonzero(mask)), targets


def _cluster_directions(count: int, p: int, rng: np.random.Generator) -> np.ndarray:
    raw = rng.standard_normal((count, p))
    if count <= p:
        q, _ = np.linalg.qr(raw.T)
        return q.T[:count]
    dirs = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    # stretch so the closest pair is as far apart as orthogonal unit vectors
    gaps = np.linalg.norm(dirs[:, None] - dirs[None], axis=2)
    closest = gaps[np.triu_indices(count, 1)].min()
    return dirs * (np.sqrt(2.0) / max(closest, 1e-3))


def generate_synthetic_clustered(n_per_cluster: int, p: int, cluster_count: int, seed: int,
                                 separation: float = 6.0, noise: float = 0.1,
                                 n_classes: Optional[int] = None) -> Dataset:
    """Gaussian clusters, each with its own linear label function.

    Cluster centres sit ``separation`` (in units of the unit within-cluster
    standard deviation) along mutually orthogonal directions when
    ``cluster_count <= p``; otherwise along random directions stretched so
    no two centres are closer than in the orthogonal case. With ``n_classes`` set, the label of a row is the
    argmax of its cluster's ``n_classes`` linear scores instead of a single
    real-valued response. ``groups`` records the cluster of every row.
    """
    if min(n_per_cluster, p, cluster_count) < 1:
        raise ValueError("counts and dimension must be at least 1")
    rng = make_rng(seed)
    centres = separation * _cluster_directions(cluster_count, p, rng)
    outputs = 1 if n_classes is None else n_classes
    maps = rng.standard_normal((cluster_count, p, outputs))
    offsets = rng.standard_normal((cluster_count, outputs))
    xs, ys, groups = [], [], []
    for c in range(cluster_count):
        local = rng.standard_normal((n_per_cluster, p))
        scores = local @ maps[c] + offsets[c]
        if n_classes is None:
            ys.append(scores[:, 0] + noise * rng.standard_normal(n_per_cluster))
        else:
            scores = scores + noise * rng.standard_normal(scores.shape)
            ys.append(scores.argmax(axis=1))
        xs.append(centres[c] + local)
        groups.append(np.full(n_per_cluster, c))
    task = Task.regression() if n_classes is None else Task.classification(n_classes)
    return Dataset(np.vstack(xs), np.concatenate(ys), task,
                   name=f"synthetic-{cluster_count}x{n_per_cluster}-p{p}",
                   groups=np.concatenate(groups))


def resolve_path(path, base: Optional[Path] = None) -> Path:
    path = Path(os.path.expanduser(str(path)))
    if not path.is_absolute() and base is not None:
        path = base / path
    return path

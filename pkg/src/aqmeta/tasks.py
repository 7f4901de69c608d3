"""Datasets, synthetic task distributions and the n-way k-shot episode sampler."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

FSDS_MAGIC = b"FSDS"
FSDS_VERSION = 1


class DatasetError(ValueError):
    pass


class EpisodeError(DatasetError):
    pass


class FSDSMagicError(DatasetError):
    pass


class FSDSTruncatedError(DatasetError):
    pass


class FSDSLayoutError(DatasetError):
    """Class structure of an FSDS file is invalid (no classes, an empty class, trailing data)."""


class CSVFormatError(DatasetError):
    pass


class EmptyDatasetError(DatasetError):
    pass


@dataclass(frozen=True)
class Dataset:
    """Examples grouped by class. ``classes[i]`` has shape ``(n_i, *feature_shape)``."""

    class_ids: tuple
    classes: tuple
    feature_min: np.ndarray | None = None
    feature_max: np.ndarray | None = None

    def __post_init__(self):
        if not self.classes:
            raise EmptyDatasetError("dataset has no classes")
        if len(self.class_ids) != len(self.classes):
            raise DatasetError("class_ids and classes differ in length")
        shape = self.classes[0].shape[1:]
        for cid, arr in zip(self.class_ids, self.classes):
            if arr.shape[0] == 0:
                raise DatasetError(f"class {cid!r} is empty")
            if arr.shape[1:] != shape:
                raise DatasetError(f"class {cid!r} has feature shape {arr.shape[1:]}, expected {shape}")

    @property
    def feature_shape(self) -> tuple:
        return self.classes[0].shape[1:]

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def class_sizes(self) -> list[int]:
        return [c.shape[0] for c in self.classes]

    def as_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """All examples stacked, with class *positions* (0..n_classes-1) as labels."""
        x = np.concatenate(self.classes, axis=0)
        y = np.concatenate([np.full(c.shape[0], i) for i, c in enumerate(self.classes)])
        return x, y

    def subset(self, positions: Sequence[int]) -> "Dataset":
        return Dataset(
            tuple(self.class_ids[i] for i in positions),
            tuple(self.classes[i] for i in positions),
            self.feature_min,
            self.feature_max,
        )

    def equals(self, other: "Dataset") -> bool:
        return (
            list(self.class_ids) == list(other.class_ids)
            and len(self.classes) == len(other.classes)
            and all(np.array_equal(a, b) for a, b in zip(self.classes, other.classes))
        )


@dataclass
class Episode:
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    n_way: int
    k_shot: int
    q_query: int
    class_ids: tuple = ()
    support_index: np.ndarray = field(default=None, repr=False)
    query_index: np.ndarray = field(default=None, repr=False)


def sample_episode(ds: Dataset, n_way: int, k_shot: int, q_query: int, rng_seed) -> Episode:
    """Draw one episode; classes and examples are chosen without replacement.

    ``rng_seed`` is an int seed or a ``numpy.random.Generator``. Labels are
    episode-local (0..n_way-1) in the order the classes were drawn.
    ``support_index``/``query_index`` hold ``(class position, row)`` pairs.
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    if n_way < 1 or k_shot < 1 or q_query < 0:
        raise EpisodeError("need n_way >= 1, k_shot >= 1, q_query >= 0")
    if ds.n_classes < n_way:
        raise EpisodeError(f"dataset has {ds.n_classes} classes, episode needs {n_way}")
    need = k_shot + q_query
    eligible = np.array([i for i, n in enumerate(ds.class_sizes()) if n >= need], dtype=int)
    if eligible.size < n_way:
        raise EpisodeError(
            f"only {eligible.size} classes have >= {need} examples, episode needs {n_way}"
        )
    chosen = eligible[rng.choice(len(eligible), size=n_way, replace=False)]
    sx, sy, qx, qy, s_idx, q_idx = [], [], [], [], [], []
    for label, pos in enumerate(chosen):
        rows = rng.permutation(ds.classes[pos].shape[0])[:need]
        s_rows, q_rows = rows[:k_shot], rows[k_shot:]
        sx.append(ds.classes[pos][s_rows])
        qx.append(ds.classes[pos][q_rows])
        sy.append(np.full(k_shot, label))
        qy.append(np.full(q_query, label))
        s_idx.extend((int(pos), int(r)) for r in s_rows)
        q_idx.extend((int(pos), int(r)) for r in q_rows)
    shape = ds.feature_shape
    return Episode(
        support_x=np.concatenate(sx).reshape((-1,) + shape),
        support_y=np.concatenate(sy).astype(int),
        query_x=np.concatenate(qx).reshape((-1,) + shape),
        query_y=np.concatenate(qy).astype(int),
        n_way=n_way,
        k_shot=k_shot,
        q_query=q_query,
        class_ids=tuple(ds.class_ids[p] for p in chosen),
        support_index=np.array(s_idx, dtype=int).reshape(-1, 2),
        query_index=np.array(q_idx, dtype=int).reshape(-1, 2),
    )


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 30
    feature_dim: int = 16
    radius: float = 1.0
    sigma: float = 0.15
    per_class: int = 50

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.feature_dim < 1 or self.per_class < 1:
            raise ValueError("feature_dim and per_class must be positive")


def sample_ball(rng: np.random.Generator, n: int, dim: int, radius: float) -> np.ndarray:
    direction = rng.standard_normal((n, dim))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    r = radius * rng.uniform(size=(n, 1)) ** (1.0 / dim)
    return direction * r


def class_centers(spec: SyntheticSpec, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return sample_ball(rng, spec.n_classes, spec.feature_dim, spec.radius)


def gen_synthetic(spec: SyntheticSpec, seed: int) -> Dataset:
    """Gaussian blobs around centers drawn uniformly from a ball (raw, unnormalized)."""
    rng = np.random.default_rng(seed)
    centers = sample_ball(rng, spec.n_classes, spec.feature_dim, spec.radius)
    classes = tuple(
        c + spec.sigma * rng.standard_normal((spec.per_class, spec.feature_dim)) for c in centers
    )
    return Dataset(tuple(range(spec.n_classes)), classes)


def normalize(ds: Dataset, lo: np.ndarray | None = None, hi: np.ndarray | None = None) -> Dataset:
    """Per-feature min-max scaling to [0, 1]; constant features map to 0."""
    if lo is None or hi is None:
        x, _ = ds.as_arrays()
        lo, hi = x.min(axis=0), x.max(axis=0)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)

    def scale(a):
        return np.where(span > 0, (a - lo) / safe, 0.0)

    return Dataset(ds.class_ids, tuple(scale(c) for c in ds.classes), lo, hi)


def synthetic_split(
    spec: SyntheticSpec, train_classes: int, seed: int
) -> tuple[Dataset, Dataset]:
    """Generate, normalize jointly, and split classes into disjoint train/test sets."""
    if not 0 < train_classes < spec.n_classes:
        raise ValueError("train_classes must leave at least one test class")
    ds = normalize(gen_synthetic(spec, seed))
    positions = list(range(spec.n_classes))
    return ds.subset(positions[:train_classes]), ds.subset(positions[train_classes:])


def split_classes(ds: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    rng = np.random.default_rng(seed)
    order = rng.permutation(ds.n_classes)
    n_train = int(round(train_fraction * ds.n_classes))
    n_train = min(max(n_train, 1), ds.n_classes - 1)
    return ds.subset(sorted(order[:n_train])), ds.subset(sorted(order[n_train:]))


# ---------------------------------------------------------------------------
# FSDS binary format


def fsds_bytes(ds: Dataset) -> bytes:
    shape = ds.feature_shape
    sizes = ds.class_sizes()
    head = [FSDS_MAGIC, struct.pack("<III", FSDS_VERSION, ds.n_classes, len(shape))]
    head.append(struct.pack(f"<{len(shape)}I", *shape))
    if len(set(sizes)) == 1:
        head.append(struct.pack("<I", sizes[0]))
    else:
        head.append(struct.pack("<I", 0))
        head.append(struct.pack(f"<{len(sizes)}I", *sizes))
    body = [np.ascontiguousarray(c, dtype="<f4").tobytes() for c in ds.classes]
    return b"".join(head + body)


def write_fsds(ds: Dataset, path) -> None:
    Path(path).write_bytes(fsds_bytes(ds))


def parse_fsds(buf: bytes) -> Dataset:
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise FSDSTruncatedError(f"FSDS data truncated at byte {pos} (needed {n} more)")
        out = buf[pos : pos + n]
        pos += n
        return out

    if take(4) != FSDS_MAGIC:
        raise FSDSMagicError("not an FSDS file (bad magic)")
    version, n_classes, rank = struct.unpack("<III", take(12))
    if version != FSDS_VERSION:
        raise DatasetError(f"unsupported FSDS version {version}")
    if n_classes == 0:
        raise FSDSLayoutError("FSDS file declares zero classes")
    shape = struct.unpack(f"<{rank}I", take(4 * rank))
    (per_class,) = struct.unpack("<I", take(4))
    if per_class:
        sizes = [per_class] * n_classes
    else:
        sizes = list(struct.unpack(f"<{n_classes}I", take(4 * n_classes)))
        if 0 in sizes:
            raise FSDSLayoutError(f"class {sizes.index(0)} has no examples")
    width = int(np.prod(shape)) if rank else 1
    classes = []
    for n in sizes:
        raw = take(4 * n * width)
        classes.append(np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape((n,) + tuple(shape)))
    if pos != len(buf):
        raise FSDSLayoutError(f"{len(buf) - pos} bytes after the last class")
    return Dataset(tuple(range(n_classes)), tuple(classes))


def load_fsds(path) -> Dataset:
    return parse_fsds(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# CSV


def load_csv(path, label_column: str) -> Dataset:
    """Numeric CSV with a header row; rows are grouped by the label column.

    Features are min-max scaled to [0, 1]; the raw min/max are kept on the dataset.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyDatasetError(f"{path}: empty file") from None
        if label_column not in header:
            raise CSVFormatError(f"{path}: no column named {label_column!r}")
        li = header.index(label_column)
        labels, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise CSVFormatError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            try:
                feats = [float(v) for j, v in enumerate(row) if j != li]
            except ValueError:
                bad = next(v for j, v in enumerate(row) if j != li and not _is_float(v))
                raise CSVFormatError(f"{path}:{lineno}: non-numeric cell {bad!r}") from None
            labels.append(row[li].strip())
            rows.append(feats)
    if not rows:
        raise EmptyDatasetError(f"{path}: no data rows")
    x = np.array(rows, dtype=np.float64)
    keys = sorted(set(labels), key=_label_key)
    labels_arr = np.array(labels)
    classes = tuple(x[labels_arr == k] for k in keys)
    return normalize(Dataset(tuple(_label_value(k) for k in keys), classes))


def _is_float(v: str) -> bool:
    try:
        float(v)
    except ValueError:
        return False
    return True


def _label_key(k: str):
    return (0, float(k), k) if _is_float(k) else (1, 0.0, k)


def _label_value(k: str):
    if _is_float(k):
        f = float(k)
        return int(f) if f.is_integer() else f
    return k

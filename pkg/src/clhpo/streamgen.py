"""Datasets and task streams.

Examples are carried as parallel arrays: a feature matrix ``X`` (n x d), an
integer label vector ``y`` and an ``ids`` vector holding each row's index in
the source dataset. The ids let callers check conservation and trace which
examples reach the optimiser.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_TEST_FRACTION = 0.2
DEFAULT_VAL_FRACTION = 0.1


class ParseError(ValueError):
    pass


def ceil_fraction(fraction: float, n: int) -> int:
    """ceil(fraction * n), immune to products like 0.1 * 30 = 3.0000000000000004."""
    return math.ceil(round(fraction * n, 9))


@dataclass(frozen=True)
class Split:
    X: np.ndarray
    y: np.ndarray
    ids: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    @classmethod
    def empty(cls, dim: int) -> "Split":
        return cls(np.empty((0, dim)), np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64))

    @classmethod
    def concat(cls, parts: list["Split"]) -> "Split":
        return cls(
            np.concatenate([p.X for p in parts]),
            np.concatenate([p.y for p in parts]),
            np.concatenate([p.ids for p in parts]),
        )

    def take(self, idx) -> "Split":
        return Split(self.X[idx], self.y[idx], self.ids[idx])


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    n_classes: int
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.X.ndim != 2 or len(self.X) != len(self.y):
            raise ValueError("X must be (n, d) with one label per row")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise ValueError("labels must lie in [0, n_classes)")

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def __len__(self) -> int:
        return len(self.y)

    def as_split(self) -> Split:
        return Split(self.X, self.y, np.arange(len(self.y)))


@dataclass(frozen=True)
class Task:
    task_id: int
    classes: tuple[int, ...]
    train: Split
    val: Split
    test: Split

    def train_val(self) -> Split:
        """Training data with the validation split folded back in."""
        return Split.concat([self.train, self.val])


@dataclass(frozen=True)
class TaskStream:
    tasks: tuple[Task, ...]
    n_classes: int
    dim: int
    class_order: tuple[int, ...] = field(default=())

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, i: int) -> Task:
        return self.tasks[i]

    @property
    def class_universe(self) -> frozenset[int]:
        return frozenset(c for t in self.tasks for c in t.classes)


def ingest_csv(path, label_column: str) -> Dataset:
    """Read a headed CSV; every column except ``label_column`` is a feature."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        if label_column not in header:
            raise ParseError(f"{path}: no column named {label_column!r}")
        label_pos = header.index(label_column)
        n_features = len(header) - 1
        rows, raw_labels = [], []
        for row_no, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"row {row_no}: expected {n_features} features, got {len(row) - 1}")
            feats = []
            for col, cell in enumerate(row):
                if col == label_pos:
                    continue
                try:
                    feats.append(float(cell))
                except ValueError:
                    raise ParseError(
                        f"row {row_no}, column {header[col]!r}: non-numeric value {cell!r}"
                    ) from None
            rows.append(feats)
            raw_labels.append(row[label_pos].strip())
    if not rows:
        raise ParseError(f"{path}: no data rows")

    try:
        as_int = [int(v) for v in raw_labels]
    except ValueError:
        as_int = None
    if as_int is not None and set(as_int) == set(range(len(set(as_int)))):
        y = np.array(as_int, dtype=np.int64)
        names = tuple(str(i) for i in range(len(set(as_int))))
    else:
        if as_int is not None:
            names = tuple(str(v) for v in sorted(set(as_int)))
            raw_labels = [str(v) for v in as_int]
        else:
            names = tuple(dict.fromkeys(raw_labels))
        lookup = {name: i for i, name in enumerate(names)}
        y = np.array([lookup[v] for v in raw_labels], dtype=np.int64)
    return Dataset(np.array(rows, dtype=np.float64), y, len(names), names)


def _class_centers(n_classes: int, dim: int, separation: float, rng: np.random.Generator) -> np.ndarray:
    # rejection sampling in a cube that widens whenever placement stalls
    half_width = separation * max(1.0, n_classes ** (1.0 / dim)) / 2
    while True:
        centers: list[np.ndarray] = []
        attempts = 0
        while len(centers) < n_classes and attempts < 1000 * n_classes:
            cand = rng.uniform(-half_width, half_width, size=dim)
            attempts += 1
            if all(np.linalg.norm(cand - c) >= separation for c in centers):
                centers.append(cand)
        if len(centers) == n_classes:
            return np.array(centers)
        half_width *= 1.5


def synth_gaussian(n_classes: int, dim: int, n_per_class: int, separation: float, seed: int) -> Dataset:
    """Isotropic unit-variance Gaussian blobs, one per class.

    Class centres are pairwise at least ``separation`` apart. Rows are grouped
    by class in ascending class order.
    """
    if n_classes < 2:
        raise ValueError(f"n_classes must be >= 2, got {n_classes}")
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
    if not separation > 0:
        raise ValueError(f"separation must be > 0, got {separation}")
    rng = np.random.default_rng(seed)
    centers = _class_centers(n_classes, dim, separation, rng)
    X = np.concatenate([c + rng.standard_normal((n_per_class, dim)) for c in centers])
    y = np.repeat(np.arange(n_classes, dtype=np.int64), n_per_class)
    return Dataset(X, y, n_classes, tuple(str(c) for c in range(n_classes)))


def _holdout_per_class(split: Split, fraction: float, rng: np.random.Generator) -> tuple[Split, Split]:
    """Move ceil(fraction * n_c) rows of every class into the second split."""
    keep, held = [], []
    for c in np.unique(split.y):
        rows = np.flatnonzero(split.y == c)
        rows = rows[rng.permutation(len(rows))]
        n_held = ceil_fraction(fraction, len(rows))
        held.append(np.sort(rows[:n_held]))
        keep.append(np.sort(rows[n_held:]))
    return split.take(np.concatenate(keep)), split.take(np.concatenate(held))


def _build_tasks(dataset: Dataset, groups: list[list[int]], seed: int, test_fraction: float) -> list[Task]:
    rng = np.random.default_rng([seed, 1])
    full = dataset.as_split()
    tasks = []
    for i, classes in enumerate(groups):
        rows = np.flatnonzero(np.isin(dataset.y, classes))
        if not len(rows):
            raise ValueError(f"task {i}: classes {classes} have no examples")
        task_data = full.take(rows)
        train, test = _holdout_per_class(task_data, test_fraction, rng)
        tasks.append(Task(i, tuple(sorted(classes)), train, Split.empty(dataset.dim), test))
    return tasks


def build_split_stream(
    dataset: Dataset, n_tasks: int, seed: int, test_fraction: float = DEFAULT_TEST_FRACTION
) -> TaskStream:
    """Partition the classes into ``n_tasks`` equal groups in a seeded order."""
    if n_tasks < 1 or dataset.n_classes % n_tasks:
        raise ValueError(
            f"{dataset.n_classes} classes cannot be split into {n_tasks} equal tasks; "
            "use build_hetero_stream for uneven class counts"
        )
    per_task = dataset.n_classes // n_tasks
    order = np.random.default_rng([seed, 0]).permutation(dataset.n_classes)
    groups = [order[i * per_task:(i + 1) * per_task].tolist() for i in range(n_tasks)]
    tasks = _build_tasks(dataset, groups, seed, test_fraction)
    return TaskStream(tuple(tasks), dataset.n_classes, dataset.dim, tuple(order.tolist()))


def build_hetero_stream(
    dataset: Dataset, class_counts: list[int], seed: int, test_fraction: float = DEFAULT_TEST_FRACTION
) -> TaskStream:
    """Tasks with the given number of classes each, in order.

    Classes beyond ``sum(class_counts)`` in the seeded permutation are unused.
    """
    if not class_counts or any(c < 1 for c in class_counts):
        raise ValueError(f"every class count must be >= 1, got {class_counts}")
    total = sum(class_counts)
    if total > dataset.n_classes:
        raise ValueError(f"class counts sum to {total} but the dataset has {dataset.n_classes} classes")
    order = np.random.default_rng([seed, 0]).permutation(dataset.n_classes)
    groups, start = [], 0
    for count in class_counts:
        groups.append(order[start:start + count].tolist())
        start += count
    if total < dataset.n_classes:
        log.info("hetero stream leaves %d classes unused: %s", dataset.n_classes - total, sorted(order[total:].tolist()))
    tasks = _build_tasks(dataset, groups, seed, test_fraction)
    return TaskStream(tuple(tasks), dataset.n_classes, dataset.dim, tuple(order[:total].tolist()))


def split_train_val(task: Task, val_fraction: float = DEFAULT_VAL_FRACTION, seed: int = 0) -> Task:
    """Carve a class-balanced validation split out of the task's non-test data."""
    if not 0 < val_fraction < 1:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    pool = task.train_val()
    for c in task.classes:
        n_c = int((pool.y == c).sum())
        if n_c < 2:
            raise ValueError(f"class {c} has {n_c} non-test example(s); need at least 2 to split off validation")
    rng = np.random.default_rng([seed, 2, task.task_id])
    train, val = _holdout_per_class(pool, val_fraction, rng)
    return replace(task, train=train, val=val)


def with_validation(stream: TaskStream, val_fraction: float = DEFAULT_VAL_FRACTION, seed: int = 0) -> TaskStream:
    return replace(stream, tasks=tuple(split_train_val(t, val_fraction, seed) for t in stream.tasks))


def make_stream(
    dataset: Dataset,
    seed: int,
    *,
    n_tasks: int | None = None,
    class_counts: list[int] | None = None,
    val_fraction: float = DEFAULT_VAL_FRACTION,
    test_fraction: float = DEFAULT_TEST_FRACTION,
) -> TaskStream:
    """Split or hetero stream with train/val/test partitions filled in."""
    if class_counts is not None:
        stream = build_hetero_stream(dataset, class_counts, seed, test_fraction)
    elif n_tasks is not None:
        stream = build_split_stream(dataset, n_tasks, seed, test_fraction)
    else:
        raise ValueError("give either n_tasks or class_counts")
    return with_validation(stream, val_fraction, seed)

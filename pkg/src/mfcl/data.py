"""Datasets, class-incremental task streams and non-IID client partitions."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    """Malformed IDX file."""


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (n, C, H, W) in [-1, 1]
    labels: np.ndarray  # int64 in [0, num_classes)
    split: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    @property
    def sample_shape(self) -> tuple:
        return tuple(self.images.shape[1:])


def scale_pixels(raw: np.ndarray) -> np.ndarray:
    """Bytes ``[0, 255]`` to ``[-1, 1]``."""
    return raw.astype(np.float64) / 127.5 - 1.0


def unscale_pixels(x: np.ndarray) -> np.ndarray:
    return np.rint((x + 1.0) * 127.5).astype(np.uint8)


def _read_idx(path, magic, ndim):
    path = Path(path)
    blob = path.read_bytes()
    header = 4 + 4 * ndim
    if len(blob) < 4:
        raise IdxTruncatedError(f"{path}: file shorter than the magic number")
    (found,) = struct.unpack(">I", blob[:4])
    if found != magic:
        raise IdxMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    if len(blob) < header:
        raise IdxTruncatedError(f"{path}: header needs {header} bytes, file has {len(blob)}")
    dims = struct.unpack(f">{ndim}I", blob[4:header])
    size = int(np.prod(dims, dtype=np.int64))
    if len(blob) - header < size:
        raise IdxTruncatedError(
            f"{path}: payload has {len(blob) - header} bytes, dimensions {dims} need {size}")
    data = np.frombuffer(blob, dtype=np.uint8, count=size, offset=header)
    return data.reshape(dims)


def read_idx_images(path) -> np.ndarray:
    return _read_idx(path, IDX_IMAGES_MAGIC, 3)


def read_idx_labels(path) -> np.ndarray:
    return _read_idx(path, IDX_LABELS_MAGIC, 1)


def load_idx(images_path, labels_path, split="train") -> Dataset:
    raw = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(raw) != len(labels):
        raise IdxCountMismatchError(
            f"{images_path} holds {len(raw)} images but {labels_path} holds {len(labels)} labels")
    return Dataset(scale_pixels(raw)[:, None, :, :], labels.astype(np.int64), split)


def write_idx_images(path, raw: np.ndarray):
    raw = np.asarray(raw, dtype=np.uint8)
    n, h, w = raw.shape
    Path(path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, n, h, w) + raw.tobytes())


def write_idx_labels(path, labels: np.ndarray):
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


@dataclass(frozen=True)
class BlobSpec:
    """Everything needed to regenerate a blob dataset bitwise."""

    num_classes: int = 20
    samples_per_class: int = 500
    shape: tuple = (1, 8, 8)
    seed: int = 0
    test_per_class: int = 100
    std: float = 0.35
    center_scale: float = 0.6

    def to_json(self) -> str:
        d = dict(self.__dict__)
        d["shape"] = list(self.shape)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "BlobSpec":
        d = json.loads(text)
        d["shape"] = tuple(d["shape"])
        return cls(**d)


def make_blobs(num_classes=20, samples_per_class=500, shape=(1, 8, 8), seed=0,
               test_per_class=100, std=0.35, center_scale=0.6):
    """Gaussian class clusters around seeded random centers, clipped to
    ``[-1, 1]``. Returns ``(train, test)``; samples are in shuffled order."""
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    shape = tuple(int(s) for s in shape)
    rng = np.random.default_rng(seed)
    dim = int(np.prod(shape))
    centers = rng.uniform(-center_scale, center_scale, size=(num_classes, dim))

    def draw(per_class, split):
        labels = np.repeat(np.arange(num_classes), per_class)
        x = centers[labels] + std * rng.standard_normal((len(labels), dim))
        order = rng.permutation(len(labels))
        x = np.clip(x[order], -1.0, 1.0).reshape((len(labels),) + shape)
        return Dataset(x, labels[order].astype(np.int64), split)

    return draw(samples_per_class, "train"), draw(test_per_class, "test")


def blobs_from_spec(spec: BlobSpec):
    return make_blobs(spec.num_classes, spec.samples_per_class, spec.shape, spec.seed,
                      spec.test_per_class, spec.std, spec.center_scale)


@dataclass
class Task:
    index: int
    classes: np.ndarray  # original class ids, in head order
    label_range: tuple  # half-open range in the remapped label space
    train_idx: np.ndarray
    test_idx: np.ndarray

    @property
    def size(self) -> int:
        return len(self.classes)


@dataclass
class TaskStream:
    """Disjoint class-incremental tasks over a relabeled dataset.

    Labels are remapped so task ``t`` owns the contiguous range
    ``[sum_{i<t} |Y^i|, sum_{i<=t} |Y^i|)``, which is the head range the
    classifier opens for it.
    """

    train: Dataset
    test: Dataset
    class_order: np.ndarray
    tasks: list[Task] = field(default_factory=list)

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def q_after(self, t: int) -> int:
        return self.tasks[t].label_range[1]


def split_into_tasks(train: Dataset, test: Dataset, num_tasks: int, seed=0) -> TaskStream:
    num_classes = max(train.num_classes, test.num_classes)
    if num_tasks < 1 or num_classes % num_tasks:
        raise ValueError(f"{num_classes} classes cannot be split into {num_tasks} equal tasks")
    for ds in (train, test):
        missing = set(range(num_classes)) - set(np.unique(ds.labels).tolist())
        if missing:
            raise ValueError(f"{ds.split} split has no samples of classes {sorted(missing)}")
    order = np.random.default_rng(seed).permutation(num_classes)
    remap = np.empty(num_classes, dtype=np.int64)
    remap[order] = np.arange(num_classes)
    rtrain = Dataset(train.images, remap[train.labels], train.split)
    rtest = Dataset(test.images, remap[test.labels], test.split)
    per_task = num_classes // num_tasks
    stream = TaskStream(rtrain, rtest, order)
    for t in range(num_tasks):
        lo, hi = t * per_task, (t + 1) * per_task
        stream.tasks.append(Task(
            index=t, classes=order[lo:hi], label_range=(lo, hi),
            train_idx=np.flatnonzero((rtrain.labels >= lo) & (rtrain.labels < hi)),
            test_idx=np.flatnonzero((rtest.labels >= lo) & (rtest.labels < hi))))
    return stream


def largest_remainder(proportions, total: int) -> np.ndarray:
    """Integer counts proportional to ``proportions`` summing to ``total``."""
    p = np.asarray(proportions, dtype=np.float64)
    raw = p / p.sum() * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    if short > 0:
        # stable sort keeps ties in client order
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(indices, labels, num_clients: int, alpha: float, rng) -> list[np.ndarray]:
    """Split ``indices`` among clients class by class.

    For each class (ascending label) one proportion vector is drawn from
    ``Dirichlet(alpha * 1)`` and the class's indices are cut into contiguous
    blocks of largest-remainder sizes. ``labels[i]`` is the label of
    ``indices[i]``.
    """
    if not alpha > 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    if num_clients < 1:
        raise ValueError(f"num_clients must be >= 1, got {num_clients}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    indices = np.asarray(indices)
    labels = np.asarray(labels)
    parts: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
    for cls in np.unique(labels):
        members = indices[labels == cls]
        if num_clients == 1:
            parts[0].append(members)
            continue
        props = rng.dirichlet(np.full(num_clients, float(alpha)))
        counts = largest_remainder(props, len(members))
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for c in range(num_clients):
            parts[c].append(members[bounds[c]:bounds[c + 1]])
    return [np.concatenate(p) if p else np.empty(0, dtype=np.int64) for p in parts]


def partition_stream(stream: TaskStream, num_clients: int, alpha: float, seed: int):
    """Per-task client index lists: ``result[t][c]`` indexes ``stream.train``."""
    out = []
    for task in stream:
        rng = np.random.default_rng([seed, task.index])
        out.append(dirichlet_partition(task.train_idx, stream.train.labels[task.train_idx],
                                       num_clients, alpha, rng))
    return out


def minibatches(indices, bs: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled batches for one epoch; the last batch may be short."""
    if bs < 1:
        raise ValueError(f"batch size must be >= 1, got {bs}")
    indices = np.asarray(indices)
    if len(indices) == 0:
        return []
    perm = np.random.default_rng([seed, epoch]).permutation(len(indices))
    shuffled = indices[perm]
    return [shuffled[i:i + bs] for i in range(0, len(shuffled), bs)]

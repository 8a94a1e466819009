"""Task streams: permuted, class-split, multi-dataset and synthetic clusters.

Also holds a reader/writer for the IDX binary format MNIST ships in.
"""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .ndnn import RngState


class ConfigurationError(ValueError):
    pass


class IdxFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class TaskDataset:
    task_id: int
    features: np.ndarray
    labels: np.ndarray
    class_count: int
    split: str = "train"

    def __post_init__(self):
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise ConfigurationError("features must be [N, D] with one label per row")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ConfigurationError(f"labels outside [0, {self.class_count})")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class TaskStream:
    tasks: list  # (train, test) pairs
    descriptor: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, i):
        return self.tasks[i]


def _dataset(task_id, x, y, c, split):
    return TaskDataset(task_id, np.ascontiguousarray(x, dtype=np.float64),
                       np.ascontiguousarray(y, dtype=np.int64), int(c), split)


def make_permuted_stream(base, n_tasks: int, seed: int) -> TaskStream:
    """Task 0 is ``base``; each later task applies its own fixed feature permutation."""
    if n_tasks < 1:
        raise ConfigurationError("need at least one task")
    train, test = base
    rng = RngState(seed)
    perms = [np.arange(train.dim)]
    for _ in range(1, n_tasks):
        perms.append(rng.permutation(train.dim))
    tasks = []
    for t, perm in enumerate(perms):
        tasks.append((
            _dataset(t, train.features[:, perm], train.labels, train.class_count, "train"),
            _dataset(t, test.features[:, perm], test.labels, test.class_count, "test"),
        ))
    return TaskStream(tasks, {"kind": "permuted", "seed": seed, "tasks": n_tasks,
                              "permutations": perms})


def make_split_stream(base, classes_per_task: int, seed: int) -> TaskStream:
    train, test = base
    total = train.class_count
    if classes_per_task < 1 or total % classes_per_task:
        raise ConfigurationError(
            f"classes_per_task={classes_per_task} does not divide {total} classes"
        )
    order = RngState(seed).permutation(total)
    groups = order.reshape(-1, classes_per_task)
    tasks = []
    for t, group in enumerate(groups):
        remap = np.full(total, -1, dtype=np.int64)
        remap[group] = np.arange(classes_per_task)
        pair = []
        for ds in (train, test):
            mask = np.isin(ds.labels, group)
            pair.append(_dataset(t, ds.features[mask], remap[ds.labels[mask]],
                                 classes_per_task, ds.split))
        tasks.append(tuple(pair))
    return TaskStream(tasks, {"kind": "split", "seed": seed, "tasks": len(groups),
                              "class_groups": groups.tolist()})


def make_multidataset_stream(datasets) -> TaskStream:
    datasets = list(datasets)
    if not datasets:
        raise ConfigurationError("no datasets given")
    dim = datasets[0][0].dim
    tasks = []
    for t, (train, test) in enumerate(datasets):
        if train.dim != dim or test.dim != dim:
            raise ConfigurationError(
                f"dataset {t} has feature dimension {train.dim}, expected {dim}"
            )
        tasks.append((replace(train, task_id=t), replace(test, task_id=t)))
    return TaskStream(tasks, {"kind": "multidataset", "tasks": len(tasks)})


def pad_features(pair, dim: int):
    """Zero-pad (or reject) a dataset pair to ``dim`` features."""
    out = []
    for ds in pair:
        if ds.dim > dim:
            raise ConfigurationError(f"cannot pad {ds.dim} features down to {dim}")
        x = np.zeros((len(ds), dim))
        x[:, : ds.dim] = ds.features
        out.append(replace(ds, features=x))
    return tuple(out)


def _class_means(rng, n_classes, dim, separation):
    if n_classes <= dim:
        # scaled orthonormal directions: every pair exactly `separation` apart
        q, _ = np.linalg.qr(rng.normal((dim, dim)))
        return q[:, :n_classes].T * (separation / np.sqrt(2.0))
    means = []
    while len(means) < n_classes:
        cand = rng.normal(dim, scale=separation)
        if all(np.linalg.norm(cand - m) >= separation for m in means):
            means.append(cand)
    return np.array(means)


def make_synthetic_task(task_id, n_classes, dim, train_per_class, test_per_class,
                        separation, rng):
    """One Gaussian-cluster problem with unit noise; returns (train, test)."""
    means = _class_means(rng, n_classes, dim, separation)
    pair = []
    for split, per_class in (("train", train_per_class), ("test", test_per_class)):
        y = np.repeat(np.arange(n_classes), per_class)
        x = means[y] + rng.normal((len(y), dim))
        order = rng.permutation(len(y))
        pair.append(_dataset(task_id, x[order], y[order], n_classes, split))
    return tuple(pair)


def make_synthetic_stream(n_tasks, classes_per_task, dim, samples_per_class, separation,
                          seed, test_per_class=None) -> TaskStream:
    if separation < 0:
        raise ConfigurationError("separation must be non-negative")
    test_per_class = samples_per_class if test_per_class is None else test_per_class
    rng = RngState(seed)
    tasks = [
        make_synthetic_task(t, classes_per_task, dim, samples_per_class, test_per_class,
                            separation, rng.spawn(t))
        for t in range(n_tasks)
    ]
    return TaskStream(tasks, {"kind": "synthetic", "seed": seed, "tasks": n_tasks})


def embed_features(pair, dim, offset, seed):
    """Place a pair's features at columns ``offset..`` of a ``dim``-wide array.

    The remaining columns get unit Gaussian noise, so the embedded task is
    only separable inside its own subspace.
    """
    rng = RngState(seed)
    out = []
    for ds in pair:
        if offset + ds.dim > dim:
            raise ConfigurationError(f"{ds.dim} features at offset {offset} exceed {dim}")
        x = rng.normal((len(ds), dim))
        x[:, offset : offset + ds.dim] = ds.features
        out.append(replace(ds, features=x))
    return tuple(out)


def make_clustered_split_stream(n_clusters, classes_per_cluster, classes_per_task, dim,
                                subspace_dim, samples_per_class, separation, seed,
                                test_per_class=100) -> TaskStream:
    """Split tasks drawn from clusters of related classes, interleaved across clusters.

    Each cluster's class means live in its own ``subspace_dim``-wide block of
    features, so tasks of one cluster share discriminative directions while
    tasks of different clusters share none. Tasks are ordered round-robin
    (cluster 0, 1, ..., 0, 1, ...).
    """
    if n_clusters * subspace_dim > dim:
        raise ConfigurationError("clusters do not fit in the feature dimension")
    rng = RngState(seed)
    splits = []
    for c in range(n_clusters):
        pair = make_synthetic_task(0, classes_per_cluster, subspace_dim, samples_per_class,
                                   test_per_class, separation, rng.spawn(1, c))
        pair = embed_features(pair, dim, c * subspace_dim, seed=rng.spawn(2, c).seed)
        splits.append(make_split_stream(pair, classes_per_task, rng.spawn(3, c).seed))
    ordered = [s[i] for i in range(len(splits[0])) for s in splits]
    stream = make_multidataset_stream(ordered)
    stream.descriptor.update(kind="clustered_split", seed=seed,
                             clusters=[t % n_clusters for t in range(len(ordered))])
    return stream


def make_multidomain_stream(specs, seed, order=None) -> TaskStream:
    """Several synthetic "datasets" of differing width and class count.

    ``specs`` holds ``(dim, class_count, samples_per_class, separation)``
    tuples; each dataset is zero-padded to the widest one and the stream
    follows ``order`` (indices into ``specs``).
    """
    rng = RngState(seed)
    width = max(s[0] for s in specs)
    pairs = [
        pad_features(make_synthetic_task(0, c, d, n, max(n // 2, 1), sep, rng.spawn(i)), width)
        for i, (d, c, n, sep) in enumerate(specs)
    ]
    order = list(range(len(specs))) if order is None else list(order)
    stream = make_multidataset_stream([pairs[i] for i in order])
    stream.descriptor.update(kind="multidomain", seed=seed, order=order)
    return stream


def subsample(pair, n_train, n_test, seed):
    rng = RngState(seed)
    out = []
    for ds, n in zip(pair, (n_train, n_test)):
        if n is None or n >= len(ds):
            out.append(ds)
            continue
        idx = np.sort(rng.permutation(len(ds))[:n])
        out.append(replace(ds, features=ds.features[idx], labels=ds.labels[idx]))
    return tuple(out)


# --------------------------------------------------------------------------
# IDX format

_IDX_TYPES = {
    0x08: ">u1",
    0x09: ">i1",
    0x0B: ">i2",
    0x0C: ">i4",
    0x0D: ">f4",
    0x0E: ">f8",
}


def _read_bytes(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as f:
        return f.read()


def read_idx(path) -> np.ndarray:
    """Parse an IDX file into an array with its native dtype."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise IdxFormatError("truncated magic number", len(raw))
    if raw[0] != 0 or raw[1] != 0:
        raise IdxFormatError("bad magic: first two bytes must be zero", 0)
    if raw[2] not in _IDX_TYPES:
        raise IdxFormatError(f"unknown data type 0x{raw[2]:02x}", 2)
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError("truncated dimension field", len(raw))
    shape = struct.unpack(f">{ndim}I", raw[4:header])
    dtype = np.dtype(_IDX_TYPES[raw[2]])
    need = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(raw) - header < need:
        raise IdxFormatError(f"truncated data: need {need} bytes", len(raw))
    if len(raw) - header > need:
        raise IdxFormatError("trailing bytes after data", header + need)
    return np.frombuffer(raw, dtype=dtype, count=need // dtype.itemsize,
                         offset=header).reshape(shape)


def load_idx(path) -> np.ndarray:
    """Read an unsigned-byte IDX file as float64 scaled to [0, 1]."""
    arr = read_idx(path)
    if arr.dtype != np.uint8:
        raise IdxFormatError(f"expected unsigned byte data, got {arr.dtype}", 2)
    return arr.astype(np.float64) / 255.0


def write_idx(path, array) -> None:
    array = np.asarray(array)
    code = {np.dtype(v).newbyteorder("="): k for k, v in _IDX_TYPES.items()}
    key = array.dtype.newbyteorder("=")
    if key not in code:
        raise ValueError(f"unsupported dtype {array.dtype}")
    with open(path, "wb") as f:
        f.write(bytes([0, 0, code[key], array.ndim]))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.astype(_IDX_TYPES[code[key]]).tobytes())


_MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(data_dir, name):
    for cand in (name, name + ".gz", name.replace("-idx", ".idx")):
        p = os.path.join(data_dir, cand)
        if os.path.exists(p):
            return p
    raise FileNotFoundError(os.path.join(data_dir, name))


def load_mnist(data_dir):
    """(train, test) TaskDataset pair with flattened 784-wide features."""
    pair = []
    for split, (img, lab) in _MNIST_FILES.items():
        x = load_idx(_find(data_dir, img))
        y = read_idx(_find(data_dir, lab)).astype(np.int64)
        pair.append(_dataset(0, x.reshape(len(x), -1), y, 10, split))
    return tuple(pair)

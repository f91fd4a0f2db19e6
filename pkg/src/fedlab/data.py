"""Datasets, label-skew partitioners, image augmentation and minibatching."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import CapacityError, ConfigError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

TEST_FRACTION = 0.2


@dataclass
class Dataset:
    samples: np.ndarray
    labels: np.ndarray
    num_classes: int
    image_shape: Optional[tuple[int, int]] = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.samples.ndim != 2 or self.samples.shape[0] != self.labels.shape[0]:
            raise ConfigError(f"{self.samples.shape} samples vs {self.labels.shape} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigError("label outside [0, num_classes)")
        if self.image_shape is not None:
            self.image_shape = (int(self.image_shape[0]), int(self.image_shape[1]))
            if self.image_shape[0] * self.image_shape[1] != self.samples.shape[1]:
                raise ConfigError(f"image_shape {self.image_shape} does not match width {self.samples.shape[1]}")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def dim(self) -> int:
        return int(self.samples.shape[1])

    def class_indices(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.labels == c) for c in range(self.num_classes)]


def gen_synthetic(
    classes: int, dim: int, per_class: int, spread: float, seed: int | np.random.Generator
) -> Dataset:
    """Isotropic Gaussian blobs (std ``spread``) around class means.

    Any two class means are ``4*spread + 1`` apart (or further when there are
    more classes than dimensions).
    """
    if min(classes, dim, per_class) < 1 or spread < 0:
        raise ConfigError("gen_synthetic needs positive classes, dim, per_class and spread >= 0")
    gen = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    sep = 4.0 * spread + 1.0
    if classes <= dim:
        q, _ = np.linalg.qr(gen.standard_normal((dim, classes)))
        means = q.T * (sep / math.sqrt(2.0))
    else:
        # More classes than dimensions: random sphere points, rescaled by their
        # closest pair.
        pts = gen.standard_normal((classes, dim))
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)
        d = np.linalg.norm(pts[:, None] - pts[None], axis=2) + np.eye(classes) * 1e9
        means = pts * (sep / max(d.min(), 1e-9))
    labels = np.repeat(np.arange(classes), per_class)
    noise = gen.standard_normal((classes * per_class, dim)) * spread
    return Dataset(means[labels] + noise, labels, classes)


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

def _read_idx(path: Path, expected_magic: int) -> tuple[tuple[int, ...], bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: short read at byte offset {len(raw)} (need 4-byte magic)")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x} at byte offset 0, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise FormatError(f"{path}: short read at byte offset {len(raw)} in header (need {header_end})")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    need = header_end + int(np.prod(dims))
    if len(raw) < need:
        raise FormatError(f"{path}: short read at byte offset {len(raw)}, expected {need} bytes")
    return dims, raw[header_end:need]


def load_idx(images_path: str | Path, labels_path: str | Path, num_classes: Optional[int] = None) -> Dataset:
    dims, pix = _read_idx(Path(images_path), IDX_IMAGES_MAGIC)
    (n_labels,), lab = _read_idx(Path(labels_path), IDX_LABELS_MAGIC)
    n, h, w = dims
    if n != n_labels:
        raise FormatError(f"{n} images but {n_labels} labels")
    samples = np.frombuffer(pix, dtype=np.uint8).reshape(n, h * w).astype(np.float64) / 255.0
    labels = np.frombuffer(lab, dtype=np.uint8).astype(np.int64)
    k = num_classes if num_classes is not None else int(labels.max()) + 1 if n else 1
    return Dataset(samples, labels, k, image_shape=(h, w))


def write_idx(images: np.ndarray, labels: Sequence[int], images_path, labels_path) -> None:
    """Write uint8 images ``[n,h,w]`` and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    n, h, w = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + images.tobytes())
    lab = np.asarray(labels, dtype=np.uint8)
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, lab.size) + lab.tobytes())


# ---------------------------------------------------------------------------
# partitioning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PartitionSpec:
    """``kind`` is one of ``iid``, ``weak_pathological``, ``pathological``, ``dirichlet``."""

    kind: str
    num_clients: int
    seed: int = 0
    s_percent: float = 20.0
    samples_per_client: int = 600
    dominant_classes: int = 2
    classes_per_client: int = 3
    beta: float = 0.5

    KINDS = ("iid", "weak_pathological", "pathological", "dirichlet")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ConfigError(f"unknown partition kind {self.kind!r}; expected one of {self.KINDS}")
        if self.num_clients < 1:
            raise ConfigError("num_clients must be >= 1")
        if not 0 < self.s_percent <= 100:
            raise ConfigError(f"s_percent must lie in (0, 100], got {self.s_percent}")
        if self.beta <= 0:
            raise ConfigError(f"beta must be > 0, got {self.beta}")
        if self.classes_per_client < 1 or self.dominant_classes < 1 or self.samples_per_client < 1:
            raise ConfigError("classes_per_client, dominant_classes and samples_per_client must be >= 1")


@dataclass
class Partition:
    clients: list[np.ndarray]
    train: list[np.ndarray] = field(default_factory=list)
    test: list[np.ndarray] = field(default_factory=list)

    @property
    def num_clients(self) -> int:
        return len(self.clients)

    def label_histogram(self, ds: Dataset, client: int) -> np.ndarray:
        return np.bincount(ds.labels[self.clients[client]], minlength=ds.num_classes)

    def to_dict(self) -> dict:
        return {
            str(i): {"train": self.train[i].tolist(), "test": self.test[i].tolist()}
            for i in range(self.num_clients)
        }

    def export(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps({"clients": self.to_dict()}, indent=1))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _class_pools(ds: Dataset, gen: np.random.Generator) -> list[list[int]]:
    return [list(gen.permutation(ix)) for ix in ds.class_indices()]


def _take(pools: list[list[int]], c: int, n: int) -> list[int]:
    if n > len(pools[c]):
        raise CapacityError(f"class {c} has {len(pools[c])} unused samples, {n} requested")
    out, pools[c] = pools[c][:n], pools[c][n:]
    return out


def partition_iid(ds: Dataset, spec: PartitionSpec, gen: np.random.Generator) -> list[np.ndarray]:
    if spec.num_clients > len(ds):
        raise CapacityError(f"{len(ds)} samples cannot fill {spec.num_clients} clients")
    return [np.sort(p) for p in np.array_split(gen.permutation(len(ds)), spec.num_clients)]


def partition_weak_pathological(ds: Dataset, spec: PartitionSpec, gen: np.random.Generator) -> list[np.ndarray]:
    n_cls = ds.num_classes
    pools = _class_pools(ds, gen)
    uniform_total = _round_half_up(spec.samples_per_client * spec.s_percent / 100.0)
    base, extra = divmod(uniform_total, n_cls)
    per_class = [base + (1 if c < extra else 0) for c in range(n_cls)]
    rest = spec.samples_per_client - uniform_total
    n_dom = min(spec.dominant_classes, n_cls)
    clients = []
    for _ in range(spec.num_clients):
        idx = []
        for c in range(n_cls):
            idx += _take(pools, c, per_class[c])
        if rest > 0:
            dom = [int(c) for c in gen.choice(n_cls, size=n_dom, replace=False)]
            share, spare = divmod(rest, n_dom)
            for j, c in enumerate(dom):
                idx += _take(pools, c, share + (1 if j < spare else 0))
        clients.append(np.sort(np.asarray(idx, dtype=np.int64)))
    return clients


def partition_pathological(ds: Dataset, spec: PartitionSpec, gen: np.random.Generator) -> list[np.ndarray]:
    n_cls, k = ds.num_classes, spec.classes_per_client
    if k > n_cls:
        raise ConfigError(f"classes_per_client {k} exceeds {n_cls} classes")
    order = [int(c) for c in gen.permutation(n_cls)]
    held = [[order[(j * k + m) % n_cls] for m in range(k)] for j in range(spec.num_clients)]
    holders: dict[int, list[int]] = {c: [] for c in range(n_cls)}
    for j, cls in enumerate(held):
        for c in cls:
            holders[c].append(j)
    buckets: list[list[int]] = [[] for _ in range(spec.num_clients)]
    for c, ix in enumerate(ds.class_indices()):
        if not holders[c]:
            continue
        if len(ix) < len(holders[c]):
            raise CapacityError(f"class {c} has {len(ix)} samples for {len(holders[c])} holders")
        for j, part in zip(holders[c], np.array_split(gen.permutation(ix), len(holders[c]))):
            buckets[j] += [int(i) for i in part]
    return [np.sort(np.asarray(b, dtype=np.int64)) for b in buckets]


def partition_dirichlet(ds: Dataset, spec: PartitionSpec, gen: np.random.Generator) -> list[np.ndarray]:
    n = spec.num_clients
    if n > len(ds):
        raise CapacityError(f"{len(ds)} samples cannot fill {n} clients")
    buckets: list[list[int]] = [[] for _ in range(n)]
    for ix in ds.class_indices():
        ix = gen.permutation(ix)
        p = gen.dirichlet(np.full(n, spec.beta))
        cuts = np.rint(np.cumsum(p) * len(ix)).astype(int)[:-1]
        for j, part in enumerate(np.split(ix, np.clip(cuts, 0, len(ix)))):
            buckets[j] += [int(i) for i in part]
    # Empty clients steal one sample from the currently largest client.
    for j in range(n):
        if not buckets[j]:
            donor = max(range(n), key=lambda i: (len(buckets[i]), -i))
            buckets[j].append(buckets[donor].pop())
    return [np.sort(np.asarray(b, dtype=np.int64)) for b in buckets]


_PARTITIONERS = {
    "iid": partition_iid,
    "weak_pathological": partition_weak_pathological,
    "pathological": partition_pathological,
    "dirichlet": partition_dirichlet,
}


def split_train_test(ds: Dataset, idx: np.ndarray, gen: np.random.Generator, test_fraction: float = TEST_FRACTION):
    """Per-class stratified split so train and test share the client's label mix."""
    train, test = [], []
    labels = ds.labels[idx]
    for c in np.unique(labels):
        members = gen.permutation(idx[labels == c])
        n_test = _round_half_up(len(members) * test_fraction)
        if n_test >= len(members):
            n_test = len(members) - 1
        test += [int(i) for i in members[:n_test]]
        train += [int(i) for i in members[n_test:]]
    if not test and len(train) > 1:
        test.append(train.pop(int(gen.integers(len(train)))))
    return np.sort(np.asarray(train, dtype=np.int64)), np.sort(np.asarray(test, dtype=np.int64))


def partition(ds: Dataset, spec: PartitionSpec, gen: Optional[np.random.Generator] = None) -> Partition:
    """Split ``ds`` across clients by ``spec.kind`` and then 80/20 within each client."""
    if gen is None:
        gen = np.random.default_rng(spec.seed)
    clients = _PARTITIONERS[spec.kind](ds, spec, gen)
    for j, c in enumerate(clients):
        if c.size == 0:
            raise CapacityError(f"client {j} received no samples")
    part = Partition(clients)
    for c in clients:
        tr, te = split_train_test(ds, c, gen)
        part.train.append(tr)
        part.test.append(te)
    return part


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

AUGMENTATIONS = ("crop", "flip", "rotate", "brightness", "invert")


def augment(sample: np.ndarray, image_shape: Optional[tuple[int, int]], gen: np.random.Generator,
            op: Optional[str] = None) -> np.ndarray:
    """Apply one randomly chosen transform with a random intensity.

    Vector data without an image shape is returned unchanged.
    """
    sample = np.asarray(sample, dtype=np.float64)
    if image_shape is None:
        return sample.copy()
    img = sample.reshape(image_shape)
    if op is None:
        op = AUGMENTATIONS[int(gen.integers(len(AUGMENTATIONS)))]
    if op == "crop":
        pad = int(gen.integers(1, 3))
        padded = np.pad(img, pad)
        dy, dx = (int(v) for v in gen.integers(0, 2 * pad + 1, size=2))
        out = padded[dy : dy + img.shape[0], dx : dx + img.shape[1]]
    elif op == "flip":
        out = img[:, ::-1]
    elif op == "rotate":
        out = np.rot90(img, k=int(gen.integers(1, 4)))
        if out.shape != img.shape:
            # Non-square images: rotate by 180 only.
            out = np.rot90(img, k=2)
    elif op == "brightness":
        out = img + gen.uniform(-0.2, 0.2)
    elif op == "invert":
        out = 1.0 - img
    else:
        raise ConfigError(f"unknown augmentation {op!r}")
    return np.clip(out, 0.0, 1.0).reshape(-1)


def minibatches(
    ds: Dataset,
    indices: np.ndarray,
    batch_size: int,
    gen: np.random.Generator,
    augment_flag: bool = False,
    aug_gen: Optional[np.random.Generator] = None,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """One epoch of shuffled batches.

    With ``augment_flag`` each batch holds its original rows followed by one
    augmented copy of each (same labels), so it has twice the rows.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    order = gen.permutation(np.asarray(indices, dtype=np.int64))
    aug_gen = gen if aug_gen is None else aug_gen
    for start in range(0, len(order), batch_size):
        sel = order[start : start + batch_size]
        x, y = ds.samples[sel], ds.labels[sel]
        if augment_flag:
            extra = np.stack([augment(row, ds.image_shape, aug_gen) for row in x]) if len(x) else x
            x = np.concatenate([x, extra])
            y = np.concatenate([y, y])
        yield x, y

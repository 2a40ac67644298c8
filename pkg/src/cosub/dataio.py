"""Synthetic datasets, IDX files, augmentation and duplicated batching.

Gaussian mixture: each class ``c`` owns ``modes`` centroids drawn once from
``N(0, spread^2 I)``; a sample picks one of its class's centroids uniformly
and adds ``N(0, noise^2 I)``.

Spirals: class ``c`` lies on the arm ``r = t, angle = 4t + 2 pi c / classes``
for ``t ~ U(0.05, 1)``, plus ``N(0, noise^2)`` in every coordinate.  The first
two coordinates carry the spiral; extra dims are pure noise.
"""

from __future__ import annotations

import re
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IDXError(ValueError):
    pass


class IDXMagicError(IDXError):
    pass


class IDXTruncatedError(IDXError):
    pass


class IDXCountMismatchError(IDXError):
    pass


@dataclass
class Dataset:
    samples: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if len(self.samples) == 0:
            raise ValueError("dataset is empty")
        if len(self.samples) != len(self.labels):
            raise ValueError(f"{len(self.samples)} samples but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class SyntheticSpec:
    """Generative parameters; serialized next to run outputs for provenance."""

    kind: str = "gaussian-mixture"
    n_train: int = 10_000
    n_test: int = 2_000
    dims: int = 50
    classes: int = 10
    noise: float = 1.0
    spread: float = 1.0
    modes: int = 1
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _balanced_labels(n: int, classes: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.arange(n) % classes
    return rng.permutation(labels)


def gen_synthetic(kind: str, n: int, dims: int, classes: int, noise: float, seed: int,
                  spread: float = 1.0, modes: int = 1, structure_seed: int | None = None) -> Dataset:
    """Class-balanced synthetic dataset.

    ``structure_seed`` fixes the class geometry (centroids) separately from
    sample draws, so train and test splits share one mixture.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    structure_rng = np.random.default_rng(seed if structure_seed is None else structure_seed)
    rng = np.random.default_rng([seed, 1])
    labels = _balanced_labels(n, classes, rng)
    if kind == "gaussian-mixture":
        centroids = structure_rng.normal(0.0, spread, size=(classes, modes, dims))
        which = rng.integers(0, modes, size=n)
        x = centroids[labels, which] + noise * rng.standard_normal((n, dims))
    elif kind == "spirals":
        if dims < 2:
            raise ValueError("spirals need dims >= 2")
        t = rng.uniform(0.05, 1.0, size=n)
        angle = 4.0 * t + 2.0 * np.pi * labels / classes
        x = noise * rng.standard_normal((n, dims))
        x[:, 0] += t * np.cos(angle)
        x[:, 1] += t * np.sin(angle)
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    return Dataset(x.astype(np.float32), labels.astype(np.int64), classes)


def gaussian_centroids(spec: SyntheticSpec) -> np.ndarray:
    rng = np.random.default_rng(spec.seed)
    return rng.normal(0.0, spec.spread, size=(spec.classes, spec.modes, spec.dims))


def make_splits(spec: SyntheticSpec) -> tuple[Dataset, Dataset]:
    """Train and test splits drawn from the same mixture with disjoint sample streams."""
    common = dict(kind=spec.kind, dims=spec.dims, classes=spec.classes, noise=spec.noise,
                  spread=spec.spread, modes=spec.modes, structure_seed=spec.seed)
    train = gen_synthetic(n=spec.n_train, seed=spec.seed * 2 + 1000, **common)
    test = gen_synthetic(n=spec.n_test, seed=spec.seed * 2 + 1001, **common)
    test.split = "test"
    return train, test


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------
def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.ndim != 3:
        raise ValueError("images must be (N, rows, cols)")
    n, r, c = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, r, c) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


def read_idx_images(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise IDXTruncatedError(f"{path}: header needs 16 bytes, file has {len(raw)}")
    magic, n, r, c = struct.unpack_from(">IIII", raw, 0)
    if magic != IDX_IMAGES_MAGIC:
        raise IDXMagicError(f"{path}: magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")
    need = n * r * c
    if len(raw) - 16 < need:
        raise IDXTruncatedError(f"{path}: payload has {len(raw) - 16} bytes, header implies {need}")
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=16).reshape(n, r, c)


def read_idx_labels(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise IDXTruncatedError(f"{path}: header needs 8 bytes, file has {len(raw)}")
    magic, n = struct.unpack_from(">II", raw, 0)
    if magic != IDX_LABELS_MAGIC:
        raise IDXMagicError(f"{path}: magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")
    if len(raw) - 8 < n:
        raise IDXTruncatedError(f"{path}: payload has {len(raw) - 8} bytes, header implies {n}")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=8)


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Load an IDX image/label pair; pixels are scaled to [0, 1]."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise IDXCountMismatchError(f"{len(images)} images but {len(labels)} labels")
    labels = labels.astype(np.int64)
    k = int(labels.max()) + 1 if num_classes is None else num_classes
    return Dataset(images.astype(np.float32) / 255.0, labels, max(k, 2))


# ---------------------------------------------------------------------------
# augmentation and batching
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class AugmentPolicy:
    flip: bool = False
    noise: float = 0.0

    @classmethod
    def parse(cls, text: str) -> "AugmentPolicy":
        """Accepts ``none``, ``flip``, ``noise(s)`` and ``flip+noise(s)``."""
        text = text.strip().lower()
        if text in ("", "none"):
            return cls()
        flip, noise = False, 0.0
        for part in text.split("+"):
            m = re.fullmatch(r"noise\(([0-9.eE+-]+)\)", part)
            if part == "flip":
                flip = True
            elif m:
                noise = float(m.group(1))
            else:
                raise ValueError(f"unknown augmentation {part!r}")
        return cls(flip, noise)

    def __str__(self) -> str:
        parts = (["flip"] if self.flip else []) + ([f"noise({self.noise:g})"] if self.noise else [])
        return "+".join(parts) or "none"


def flip(x: np.ndarray) -> np.ndarray:
    """Mirror along the last axis (image columns, or feature order for vectors)."""
    return x[..., ::-1]


def augment(batch: np.ndarray, policy: AugmentPolicy | str, rng: np.random.Generator) -> np.ndarray:
    if isinstance(policy, str):
        policy = AugmentPolicy.parse(policy)
    out = batch
    if policy.flip:
        coin = rng.random(len(batch)) < 0.5
        out = np.where(coin.reshape((-1,) + (1,) * (batch.ndim - 1)), flip(batch), batch)
    if policy.noise:
        out = out + rng.normal(0.0, policy.noise, size=batch.shape).astype(batch.dtype)
    return out


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray
    copy_id: np.ndarray | None = None

    @property
    def duplicated(self) -> bool:
        return self.copy_id is not None

    def __len__(self) -> int:
        return len(self.y)


def duplicate_rows(x: np.ndarray, y: np.ndarray) -> Batch:
    """Rows 2i and 2i+1 are copies of sample i; ``copy_id`` alternates 0, 1."""
    return Batch(np.repeat(x, 2, axis=0), np.repeat(y, 2), np.tile([0, 1], len(y)))


def make_cosub_batches(dataset: Dataset, batch_size: int, duplicate: bool,
                       rng: np.random.Generator, policy: AugmentPolicy | str = "none") -> Iterator[Batch]:
    """One shuffled epoch, drop-last.  Augmentation happens before duplication."""
    n = len(dataset)
    if not 1 <= batch_size <= n:
        raise ValueError(f"batch size {batch_size} must lie in [1, {n}]")
    order = rng.permutation(n)
    for start in range(0, n - batch_size + 1, batch_size):
        idx = order[start:start + batch_size]
        x = augment(dataset.samples[idx], policy, rng)
        y = dataset.labels[idx]
        yield duplicate_rows(x, y) if duplicate else Batch(x, y)

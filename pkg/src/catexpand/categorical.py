"""Categorical input space, one-hot layout and probe vectors.

The flattened layout is feature-major: feature ``i`` occupies the contiguous
slice ``offsets[i]:offsets[i] + n_i`` of a length-``D`` vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._binio import ContainerError, Reader, Writer, write_sidecar

CATD_MAGIC = b"CATD"
CATD_VERSION = 1


class InvalidSampleError(ValueError):
    """A categorical sample or probe entry does not fit its CategorySpec."""


@dataclass(frozen=True)
class CategorySpec:
    category_counts: tuple[int, ...]

    def __init__(self, category_counts: Iterable[int]):
        counts = tuple(int(c) for c in category_counts)
        if not counts:
            raise ValueError("a CategorySpec needs at least one feature")
        if any(c < 1 for c in counts):
            raise ValueError(f"category counts must be positive, got {counts}")
        object.__setattr__(self, "category_counts", counts)

    @classmethod
    def uniform(cls, feature_count: int, categories: int) -> "CategorySpec":
        return cls([categories] * feature_count)

    @property
    def feature_count(self) -> int:
        return len(self.category_counts)

    @cached_property
    def offsets(self) -> np.ndarray:
        """Start of each feature block; has ``N + 1`` entries, the last is ``D``."""
        out = np.zeros(self.feature_count + 1, dtype=np.int64)
        np.cumsum(self.category_counts, out=out[1:])
        out.setflags(write=False)
        return out

    @property
    def dim(self) -> int:
        return int(self.offsets[-1])

    @cached_property
    def entry_feature(self) -> np.ndarray:
        """Feature index of every flat entry."""
        out = np.repeat(np.arange(self.feature_count), self.category_counts)
        out.setflags(write=False)
        return out

    @cached_property
    def entry_category(self) -> np.ndarray:
        out = np.arange(self.dim) - self.offsets[self.entry_feature]
        out.setflags(write=False)
        return out

    def is_uniform(self) -> bool:
        return len(set(self.category_counts)) == 1

    def index(self, feature: int, category: int) -> int:
        if not 0 <= feature < self.feature_count:
            raise InvalidSampleError(f"feature {feature} out of range [0, {self.feature_count})")
        n = self.category_counts[feature]
        if not 0 <= category < n:
            raise InvalidSampleError(
                f"category {category} out of range [0, {n}) for feature {feature}"
            )
        return int(self.offsets[feature]) + category

    def check_samples(self, samples: np.ndarray) -> np.ndarray:
        samples = np.asarray(samples)
        if samples.ndim != 2 or samples.shape[1] != self.feature_count:
            raise InvalidSampleError(
                f"expected samples of shape (M, {self.feature_count}), got {samples.shape}"
            )
        counts = np.asarray(self.category_counts)
        bad = (samples < 0) | (samples >= counts)
        if bad.any():
            m, i = np.argwhere(bad)[0]
            raise InvalidSampleError(
                f"sample {m}: category {samples[m, i]} out of range [0, {counts[i]}) for feature {i}"
            )
        return samples.astype(np.int64, copy=False)


def encode_one_hot(sample: Sequence[int], spec: CategorySpec) -> np.ndarray:
    """One-hot encode a single categorical sample."""
    cats = spec.check_samples(np.asarray(sample).reshape(1, -1))[0]
    x = np.zeros(spec.dim)
    x[spec.offsets[:-1] + cats] = 1.0
    return x


def encode_batch(samples: np.ndarray, spec: CategorySpec, dtype=np.float64) -> np.ndarray:
    samples = spec.check_samples(samples)
    x = np.zeros((samples.shape[0], spec.dim), dtype=dtype)
    rows = np.arange(samples.shape[0])[:, None]
    x[rows, spec.offsets[:-1] + samples] = 1
    return x


def active_indices(samples: np.ndarray, spec: CategorySpec) -> np.ndarray:
    """Flat indices of the active entries, shape ``(M, N)``."""
    return spec.check_samples(samples) + spec.offsets[:-1]


def decode_one_hot(vector, spec: CategorySpec) -> list[int]:
    if not validate_one_hot(vector, spec):
        raise InvalidSampleError("vector is not a valid one-hot encoding")
    vector = np.asarray(vector)
    return [
        int(np.argmax(vector[spec.offsets[i] : spec.offsets[i + 1]]))
        for i in range(spec.feature_count)
    ]


def make_probe(spec: CategorySpec, entries: Iterable[tuple[int, int]] = ()) -> np.ndarray:
    """Binary probe with ones at the given ``(feature, category)`` entries.

    Probes are not required to be valid inputs; the empty set gives the
    all-zero vector.
    """
    x = np.zeros(spec.dim)
    for feature, category in entries:
        idx = spec.index(feature, category)
        if x[idx]:
            raise InvalidSampleError(f"duplicate probe entry ({feature}, {category})")
        x[idx] = 1.0
    return x


def validate_one_hot(vector, spec: CategorySpec) -> bool:
    vector = np.asarray(vector)
    if vector.shape != (spec.dim,):
        raise ValueError(f"vector length {vector.shape} does not match D={spec.dim}")
    if not np.all((vector == 0) | (vector == 1)):
        return False
    sums = np.add.reduceat(vector, spec.offsets[:-1])
    return bool(np.all(sums == 1))


@dataclass
class LabeledDataset:
    """Categorical samples ``(M, N)`` with integer labels and sample weights."""

    samples: np.ndarray
    labels: np.ndarray
    spec: CategorySpec
    class_count: int
    sample_weights: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.samples = self.spec.check_samples(self.samples)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        m = self.samples.shape[0]
        if self.labels.shape[0] != m:
            raise ValueError(f"{m} samples but {self.labels.shape[0]} labels")
        if self.class_count < 1:
            raise ValueError("class_count must be positive")
        if m and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")
        if self.sample_weights is None:
            self.sample_weights = np.ones(m)
        else:
            self.sample_weights = np.asarray(self.sample_weights, dtype=np.float64).reshape(-1)
            if self.sample_weights.shape[0] != m:
                raise ValueError(f"{m} samples but {self.sample_weights.shape[0]} weights")
            if not np.all(np.isfinite(self.sample_weights)) or np.any(self.sample_weights < 0):
                raise ValueError("sample weights must be finite and non-negative")

    def __len__(self) -> int:
        return self.samples.shape[0]

    def subset(self, index) -> "LabeledDataset":
        return LabeledDataset(
            self.samples[index],
            self.labels[index],
            self.spec,
            self.class_count,
            self.sample_weights[index],
            dict(self.provenance),
        )

    def one_hot(self, dtype=np.float64) -> np.ndarray:
        return encode_batch(self.samples, self.spec, dtype)


def save_dataset(data: LabeledDataset, path) -> Path:
    """Write the CATD container plus its JSON provenance sidecar."""
    if max(data.spec.category_counts) > 0xFFFF + 1:
        raise ValueError("CATD stores categories as u16")
    w = Writer()
    w.raw(CATD_MAGIC)
    w.u32(CATD_VERSION)
    w.u32(data.spec.feature_count)
    w.u32(data.class_count)
    w.u32_array(data.spec.category_counts)
    w.u32(len(data))
    w.array(data.samples, "<u2")
    w.array(data.labels, "<u4")
    w.array(data.sample_weights, "<f8")
    path = Path(path)
    path.write_bytes(w.getvalue())
    write_sidecar(path, {"format": "CATD", "version": CATD_VERSION, "provenance": data.provenance})
    return path


def load_dataset(path) -> LabeledDataset:
    r = Reader(Path(path).read_bytes(), "CATD")
    r.magic(CATD_MAGIC)
    r.version(CATD_VERSION)
    n = r.u32("feature count")
    k = r.u32("class count")
    counts = r.array(n, "<u4", "category counts")
    m = r.u32("sample count")
    samples = r.array(m * n, "<u2", "samples").reshape(m, n).astype(np.int64)
    labels = r.array(m, "<u4", "labels").astype(np.int64)
    weights = r.array(m, "<f8", "weights")
    r.finish()
    try:
        return LabeledDataset(samples, labels, CategorySpec(counts), k, weights)
    except ValueError as exc:
        raise ContainerError(f"CATD: inconsistent contents: {exc}") from exc

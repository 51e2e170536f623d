"""Batch streams over a manifest split."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
import torch

from ..data_model import DatasetManifest, PatientRecord
from ..errors import EmptyDatasetError
from .images import DEFAULT_SIZE, decode_and_preprocess


@dataclass(frozen=True)
class BatchingConfig:
    batch_size: int = 128
    shuffle_buffer: int = 10_000
    seed: int = 42
    cache: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.shuffle_buffer < 1:
            raise ValueError("shuffle_buffer must be >= 1")


def steps_per_epoch(n: int, batch_size: int) -> int:
    if n <= 0:
        raise EmptyDatasetError("cannot batch an empty dataset")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    return -(-n // batch_size)


def buffer_shuffle(n: int, buffer_size: int, rng: np.random.Generator) -> list[int]:
    """Order produced by a streaming shuffle buffer of ``buffer_size`` slots.

    The buffer is filled with the first elements; each step emits a uniformly
    chosen slot and refills it with the next unread element. A buffer at least
    as large as ``n`` yields a uniform permutation.
    """
    if buffer_size >= n:
        return rng.permutation(n).tolist()
    buf = list(range(buffer_size))
    nxt = buffer_size
    order = []
    while buf:
        k = int(rng.integers(len(buf)))
        order.append(buf[k])
        if nxt < n:
            buf[k] = nxt
            nxt += 1
        else:
            buf[k] = buf[-1]
            buf.pop()
    return order


def encode_label(label: str, num_classes: int = 2) -> int:
    """covid is the positive class (1); other labels are 0 in binary mode."""
    if num_classes == 2:
        return int(label == "covid")
    return {"normal": 0, "covid": 1, "other_pneumonia": 2}[label]


@dataclass
class Batch:
    records: list[PatientRecord]
    images: torch.Tensor  # (B, 3, H, W)
    labels: torch.Tensor  # (B,)


class BatchStream:
    """Re-iterable batch stream.

    ``epoch(k)`` yields the k-th epoch (1-based). Shuffling streams draw a
    fresh buffer-shuffled order per epoch from ``(seed, k)``; other streams
    keep manifest order.
    """

    def __init__(
        self,
        manifest: DatasetManifest,
        config: BatchingConfig = BatchingConfig(),
        shuffle: bool = False,
        target_size: tuple[int, int] = DEFAULT_SIZE,
        num_classes: int = 2,
        loader: Callable[[str, tuple[int, int]], np.ndarray] = decode_and_preprocess,
    ):
        if len(manifest) == 0:
            raise EmptyDatasetError("cannot stream an empty manifest")
        self.records = list(manifest.records)
        self.config = config
        self.shuffle = shuffle
        self.target_size = tuple(target_size)
        self.num_classes = num_classes
        self.loader = loader
        self._cache: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return steps_per_epoch(len(self.records), self.config.batch_size)

    @property
    def labels(self) -> np.ndarray:
        return np.array([encode_label(r.label, self.num_classes) for r in self.records])

    def order(self, epoch: int = 1) -> list[int]:
        n = len(self.records)
        if not self.shuffle:
            return list(range(n))
        rng = np.random.default_rng([self.config.seed, epoch])
        return buffer_shuffle(n, self.config.shuffle_buffer, rng)

    def index_batches(self, epoch: int = 1) -> Iterator[list[int]]:
        order = self.order(epoch)
        b = self.config.batch_size
        for start in range(0, len(order), b):
            yield order[start : start + b]

    def _image(self, i: int) -> np.ndarray:
        if i in self._cache:
            return self._cache[i]
        image = self.loader(self.records[i].image_ref, self.target_size)
        if self.config.cache:
            self._cache[i] = image
        return image

    def make_batch(self, indices: Sequence[int]) -> Batch:
        images = np.stack([self._image(i) for i in indices]).transpose(0, 3, 1, 2)
        labels = [encode_label(self.records[i].label, self.num_classes) for i in indices]
        return Batch(
            records=[self.records[i] for i in indices],
            images=torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32)),
            labels=torch.tensor(labels, dtype=torch.long),
        )

    def epoch(self, epoch: int = 1) -> Iterator[Batch]:
        for indices in self.index_batches(epoch):
            yield self.make_batch(indices)

    def __iter__(self) -> Iterator[Batch]:
        return self.epoch(1)

    def summary(self) -> str:
        n = len(self.records)
        sizes = [len(b) for b in self.index_batches(1)]
        return (
            f"records={n} batch_size={self.config.batch_size} steps={len(self)} "
            f"last_batch={sizes[-1]} shuffle={self.shuffle} "
            f"buffer={self.config.shuffle_buffer} seed={self.config.seed} "
            f"cache={self.config.cache}"
        )


def make_batches(
    manifest: DatasetManifest,
    config: BatchingConfig = BatchingConfig(),
    shuffle: bool = True,
    **kwargs,
) -> BatchStream:
    return BatchStream(manifest, config, shuffle=shuffle, **kwargs)

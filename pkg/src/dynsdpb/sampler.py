"""Mini-batch streams in which consecutive batches share half their samples.

An epoch permutes the dataset, cuts it into halves ``h_0 .. h_{K-1}`` of
``n/2`` ids each and emits ``B_t = [h_t | h_{t+1}]`` for ``t = 0 .. K-2``.
The first half of every batch (the *carried* half) is the second half (the
*fresh* half) of its predecessor. The final half of an epoch is not carried
across the boundary.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigError


class SamplerMode(str, Enum):
    SEQUENTIAL = "sequential"
    SHUFFLED = "shuffled"


@dataclass(frozen=True)
class Batch:
    t: int
    ids: tuple

    @property
    def size(self):
        return len(self.ids)


@dataclass(frozen=True)
class OverlapBatch(Batch):
    carried_ids: tuple = ()
    fresh_ids: tuple = ()

    @classmethod
    def from_halves(cls, t, carried, fresh):
        carried, fresh = tuple(carried), tuple(fresh)
        return cls(t=t, ids=carried + fresh, carried_ids=carried, fresh_ids=fresh)


def epoch_order(dataset_ids, mode, seed=0, epoch=0) -> list:
    """Sample order for one epoch, before it is cut into halves."""
    ids = list(dataset_ids)
    if SamplerMode(mode) is SamplerMode.SHUFFLED:
        rng = np.random.default_rng([seed, epoch])
        ids = [ids[i] for i in rng.permutation(len(ids))]
    return ids


def _rotation(n_ids, half, epoch):
    # Dropped remainder rotates through the dataset across epochs.
    usable = (n_ids // half) * half
    return (epoch * usable) % n_ids if usable < n_ids else 0


def make_epoch_stream(dataset_ids, n, mode=SamplerMode.SHUFFLED, seed=0, epoch=0, t0=0):
    """List of :class:`OverlapBatch` for one epoch.

    ``t0`` offsets the iteration stamps so a multi-epoch run keeps a global
    iteration counter.
    """
    ids = list(dataset_ids)
    if n <= 0 or n % 2:
        raise ConfigError(f"batch size must be a positive even number, got {n}")
    if len(ids) < n:
        raise ConfigError(f"dataset of {len(ids)} samples is smaller than batch size {n}")
    half = n // 2
    order = epoch_order(ids, mode, seed, epoch)
    shift = _rotation(len(order), half, epoch)
    order = order[shift:] + order[:shift]
    k = len(order) // half
    halves = [order[i * half:(i + 1) * half] for i in range(k)]
    return [OverlapBatch.from_halves(t0 + t, halves[t], halves[t + 1]) for t in range(k - 1)]


def make_plain_stream(dataset_ids, n, seed=0, epoch=0, t0=0, shuffle=True):
    """Disjoint batches of ``n`` samples covering the dataset once (last short batch kept)."""
    if n <= 0:
        raise ConfigError(f"batch size must be positive, got {n}")
    mode = SamplerMode.SHUFFLED if shuffle else SamplerMode.SEQUENTIAL
    order = epoch_order(dataset_ids, mode, seed, epoch)
    return [Batch(t0 + i, tuple(order[s:s + n])) for i, s in enumerate(range(0, len(order), n))]


def epoch_streams(dataset_ids, n, mode, seed, epochs):
    """Yields ``(epoch, batches)``; callers reset the logits cache between epochs."""
    t = 0
    for e in range(epochs):
        batches = make_epoch_stream(dataset_ids, n, mode, seed, e, t0=t)
        t += len(batches)
        yield e, batches

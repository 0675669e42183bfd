"""Label-augmented FIFO memory queue of key embeddings.

The queue stores the last K key representations together with their class
labels (UNLABELED for items from the unlabeled pool). Index 0 is always the
oldest entry, so snapshot row order equals admission order.
"""

from __future__ import annotations

import numpy as np

from .core import (
    UNLABELED,
    CapacityError,
    ConfigurationError,
    ShapeError,
    check_unit_rows,
)


class MemoryQueue:
    """Fixed-capacity FIFO of (embedding, label) pairs, oldest first."""

    def __init__(self, embeddings, labels, write_cursor=0):
        embeddings = np.asarray(embeddings, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if embeddings.ndim != 2 or labels.shape != (embeddings.shape[0],):
            raise ConfigurationError("queue needs K x d' embeddings and K labels")
        self.embeddings = embeddings
        self.labels = labels
        self.write_cursor = int(write_cursor)

    @property
    def capacity(self):
        return self.embeddings.shape[0]

    @property
    def dim(self):
        return self.embeddings.shape[1]


def init_queue(capacity, dim, seed):
    """Fresh queue of random unit vectors, all labeled UNLABELED.

    Random directions keep the contrastive denominator well-defined from the
    first step; they wash out of the queue within capacity/batch_size steps.
    """
    if capacity <= 0:
        raise ConfigurationError(f"queue capacity must be positive, got {capacity}")
    if dim <= 0:
        raise ConfigurationError(f"embedding dim must be positive, got {dim}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, 0x51EE]))
    vecs = rng.standard_normal((capacity, dim))
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    labels = np.full(capacity, UNLABELED, dtype=np.int64)
    return MemoryQueue(vecs, labels)


def enqueue_batch(q, keys, labels):
    """Admit a batch of keys, evicting the same number of oldest entries.

    ``keys`` is a (B, d') array of unit rows and ``labels`` the matching
    exposed class labels. Mutates and returns ``q``.
    """
    keys = np.asarray(keys, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if keys.ndim != 2 or keys.shape[1] != q.dim:
        raise ShapeError(f"keys must be (B, {q.dim}), got {keys.shape}")
    b = keys.shape[0]
    if b > q.capacity:
        raise CapacityError(f"batch of {b} exceeds queue capacity {q.capacity}")
    if labels.shape != (b,):
        raise ShapeError("one label per key required")
    check_unit_rows(keys, "enqueued keys", atol=1e-6)
    q.embeddings = np.concatenate([q.embeddings[b:], keys])
    q.labels = np.concatenate([q.labels[b:], labels])
    q.write_cursor += 1
    return q


def positives_of(q, label):
    """Indices of queue entries whose stored label equals ``label``.

    Returns the empty set for UNLABELED queries: the sentinel never matches,
    so unlabeled anchors get no positives from the queue.
    """
    if label == UNLABELED:
        return np.empty(0, dtype=np.int64)
    return np.flatnonzero(q.labels == label).astype(np.int64)


def snapshot(q):
    """Immutable dense view: (K x d' embedding matrix, K label vector).

    Copies, so later enqueues never alter a snapshot already taken.
    """
    return q.embeddings.copy(), q.labels.copy()

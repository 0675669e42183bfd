"""Shared domain types, vector math, and configuration.

Everything downstream (queue, losses, encoders, evaluation) works on
L2-normalized embeddings and integer class labels, with ``UNLABELED``
marking items from the unlabeled pool.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

# Sentinel label for unlabeled items. -1 at every serialization boundary:
# it can never collide with a valid class index.
UNLABELED = -1

NORM_ATOL = 1e-6


class SsclError(Exception):
    """Base class for all library errors."""


class ConfigurationError(SsclError):
    """A hyperparameter or option is outside its valid range."""


class ShapeError(SsclError):
    """Array dimensions do not line up."""


class DegenerateInputError(SsclError):
    """Input is mathematically unusable (e.g. zero vector)."""


class CapacityError(SsclError):
    """A batch does not fit the memory queue."""


class NormalizationError(SsclError):
    """An embedding that must be unit-norm is not."""


class ConsistencyError(SsclError):
    """Queue labels and loss inputs have desynchronized."""


class DataError(SsclError):
    """A dataset/manifest cannot supply what was asked of it."""


class MisuseError(SsclError):
    """An operation was called outside its intended protocol."""


class DomainError(SsclError):
    """A scalar argument is outside the function's domain."""


def l2_normalize(v):
    """Normalize a vector (or each row of a matrix) to unit Euclidean norm.

    Raises DegenerateInputError on (any) zero vector.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 1:
        n = np.linalg.norm(v)
        if n == 0.0:
            raise DegenerateInputError("cannot normalize the zero vector")
        return v / n
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateInputError("cannot normalize a zero row")
    return v / norms


def similarity(a, b):
    """Dot product of two unit vectors; equals cosine similarity on the sphere."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.dot(a, b))


def check_unit_rows(mat, what="embeddings", atol=1e-4):
    """Raise NormalizationError unless every row of ``mat`` is unit-norm.

    The tolerance is looser than the storage invariant (1e-6) so that
    finite-difference probes, which nudge single coordinates by ~1e-6,
    still pass validation.
    """
    mat = np.asarray(mat)
    norms = np.linalg.norm(mat, axis=-1)
    if not np.allclose(norms, 1.0, atol=atol, rtol=0.0):
        worst = float(np.max(np.abs(norms - 1.0)))
        raise NormalizationError(f"{what} must be unit-norm (worst deviation {worst:.3e})")


@dataclass
class LabeledExample:
    """One training item: raw input array, class label, stable identifier."""

    input: np.ndarray
    label: int
    source_id: str


@dataclass
class TrainConfig:
    """All scalar hyperparameters of a pre-training run.

    Defaults follow the full-scale CIFAR recipe; desk-scale experiments
    override them. ``t_end=None`` disables the schedule (w(t) stays 1).
    """

    temperature: float = 0.2
    momentum: float = 0.95
    queue_size: int = 4096
    batch_size: int = 256
    alpha: float = 2.0
    t_end: int | None = 200
    total_epochs: int = 1000
    base_lr: float = 0.03
    optimizer_momentum: float = 0.9
    embedding_dim: int = 128
    ghost_subbatches: int = 8
    seed: int = 0

    def validate(self):
        if self.temperature <= 0:
            raise ConfigurationError("temperature must be positive")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigurationError("momentum must lie in [0, 1)")
        if self.queue_size <= 0 or self.batch_size <= 0:
            raise ConfigurationError("queue_size and batch_size must be positive")
        if self.queue_size % self.batch_size != 0:
            raise ConfigurationError(
                f"queue_size ({self.queue_size}) must be a multiple of "
                f"batch_size ({self.batch_size})"
            )
        if self.alpha < 0:
            raise ConfigurationError("alpha must be nonnegative")
        if self.total_epochs < 0:
            raise ConfigurationError("total_epochs must be nonnegative")
        if self.t_end is not None:
            if self.t_end < 0:
                raise ConfigurationError("t_end must be nonnegative")
            if self.t_end > self.total_epochs:
                raise ConfigurationError("t_end must not exceed total_epochs")
        if self.base_lr <= 0:
            raise ConfigurationError("base_lr must be positive")
        if not (0.0 <= self.optimizer_momentum < 1.0):
            raise ConfigurationError("optimizer_momentum must lie in [0, 1)")
        if self.embedding_dim <= 0:
            raise ConfigurationError("embedding_dim must be positive")
        if self.ghost_subbatches <= 0:
            raise ConfigurationError("ghost_subbatches must be positive")
        if self.batch_size % self.ghost_subbatches != 0:
            raise ConfigurationError(
                f"batch_size ({self.batch_size}) must be divisible by "
                f"ghost_subbatches ({self.ghost_subbatches})"
            )
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d).validate()


# Full-scale presets for the image benchmarks. Desk-scale runs build
# their own configs; these document the recipe for full image datasets.
PRESETS = {
    "cifar10": TrainConfig(momentum=0.95, queue_size=4096),
    "cifar100": TrainConfig(momentum=0.95, queue_size=4096),
    "tiny-imagenet": TrainConfig(momentum=0.999, queue_size=8192),
}

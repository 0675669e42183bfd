"""Contrastive loss terms, their anchor gradients, and the coefficient schedule.

Two loss terms share one batch input:

* instance-discrimination loss: softmax cross-entropy of the anchor's own
  positive key against all K queue keys;
* in-distribution aggregation loss: for labeled anchors, the labeled queue
  keys of the same class are reassigned from negatives to positives. The
  per-anchor term is

      -(1/|P|) * log( sum_{p in P} exp(s_p/tau) / D ),
      D = exp(s_plus/tau) + sum_{k not in P} exp(s_k/tau)

  with the 1/|P| factor outside the log. Reassigned keys leave the
  denominator: once a key counts as a positive it is no longer a negative.

Both terms reduce by the arithmetic mean over all B anchors, and both are
log-sum-exp stabilized. Gradients flow into anchors only; positives and
negatives are key-side constants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    UNLABELED,
    ConfigurationError,
    ConsistencyError,
    DomainError,
    ShapeError,
    check_unit_rows,
)

# Guards the final log argument; logits are max-shifted first, so this only
# fires when every term of a sum underflows.
_LOG_FLOOR = 1e-300


@dataclass
class ContrastiveBatchInput:
    """One batch of the quantities both loss terms consume.

    anchors        (B, d') unit rows from the query encoder (gradients flow here)
    positives      (B, d') unit rows from the key encoder (constant)
    negatives      (K, d') queue snapshot (constant)
    negative_labels (K,)   stored queue labels
    anchor_labels  (B,)    exposed labels of the batch (UNLABELED for D_U items)
    temperature    softmax temperature tau > 0
    """

    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    negative_labels: np.ndarray
    anchor_labels: np.ndarray
    temperature: float

    def __post_init__(self):
        self.anchors = np.asarray(self.anchors, dtype=np.float64)
        self.positives = np.asarray(self.positives, dtype=np.float64)
        self.negatives = np.asarray(self.negatives, dtype=np.float64)
        self.negative_labels = np.asarray(self.negative_labels, dtype=np.int64)
        self.anchor_labels = np.asarray(self.anchor_labels, dtype=np.int64)

    def validate(self):
        if self.temperature <= 0:
            raise ConfigurationError("temperature must be positive")
        a, p, n = self.anchors, self.positives, self.negatives
        if a.ndim != 2 or p.shape != a.shape:
            raise ShapeError(f"anchors {a.shape} and positives {p.shape} must match")
        if n.ndim != 2 or (n.shape[0] > 0 and n.shape[1] != a.shape[1]):
            raise ShapeError(f"negatives {n.shape} incompatible with anchors {a.shape}")
        if self.negative_labels.shape != (n.shape[0],):
            raise ShapeError("one label per negative required")
        if self.anchor_labels.shape != (a.shape[0],):
            raise ShapeError("one label per anchor required")
        check_unit_rows(a, "anchors")
        check_unit_rows(p, "positives")
        if n.shape[0] > 0:
            check_unit_rows(n, "negatives")
        return self

    @property
    def batch_size(self):
        return self.anchors.shape[0]

    @property
    def num_negatives(self):
        return self.negatives.shape[0]


def _logits(inp):
    """Positive logits (B,) and queue logits (B, K), already divided by tau."""
    tau = inp.temperature
    l_pos = np.einsum("ij,ij->i", inp.anchors, inp.positives) / tau
    if inp.num_negatives:
        l_neg = inp.anchors @ inp.negatives.T / tau
    else:
        l_neg = np.zeros((inp.batch_size, 0))
    return l_pos, l_neg


def moco_loss(inp):
    """Instance-discrimination loss and its gradient w.r.t. the anchors.

    Returns (scalar batch-mean loss, (B, d') gradient). With K=0 the softmax
    has a single logit and the loss is exactly zero.
    """
    inp.validate()
    l_pos, l_neg = _logits(inp)
    b, tau = inp.batch_size, inp.temperature

    logits = np.concatenate([l_pos[:, None], l_neg], axis=1)  # (B, K+1)
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    z = e.sum(axis=1)
    per_anchor = np.log(np.maximum(z, _LOG_FLOOR)) - (logits[:, 0] - m[:, 0])
    loss = float(per_anchor.mean())

    p = e / z[:, None]  # softmax over [positive, negatives]
    grad = (p[:, 0:1] - 1.0) * inp.positives
    if inp.num_negatives:
        grad = grad + p[:, 1:] @ inp.negatives
    grad /= tau * b
    return loss, grad


def _check_positive_sets(inp, positive_index_sets):
    """Validate P(i) against stored queue labels; return boolean mask (B, K)."""
    b, k = inp.batch_size, inp.num_negatives
    if len(positive_index_sets) != b:
        raise ShapeError("one positive index set per anchor required")
    mask = np.zeros((b, k), dtype=bool)
    for i, idx in enumerate(positive_index_sets):
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size == 0:
            continue
        if idx.min() < 0 or idx.max() >= k:
            raise ConsistencyError(f"anchor {i}: positive index outside queue range")
        lab = inp.anchor_labels[i]
        if lab == UNLABELED or np.any(inp.negative_labels[idx] != lab):
            raise ConsistencyError(
                f"anchor {i}: positive set disagrees with stored queue labels"
            )
        mask[i, idx] = True
    return mask


def id_loss(inp, positive_index_sets):
    """In-distribution aggregation loss and its gradient w.r.t. the anchors.

    ``positive_index_sets`` holds, per anchor, the queue indices whose stored
    label matches the anchor's label (empty for unlabeled anchors). Anchors
    that are unlabeled or have an empty set contribute exactly zero; the
    batch mean still runs over all B anchors.
    """
    inp.validate()
    pos_mask = _check_positive_sets(inp, positive_index_sets)
    b, tau = inp.batch_size, inp.temperature
    l_pos, l_neg = _logits(inp)

    active = pos_mask.any(axis=1)  # labeled anchors with nonempty P
    loss_sum = 0.0
    grad = np.zeros_like(inp.anchors)
    for i in np.flatnonzero(active):
        pm = pos_mask[i]
        num_logits = l_neg[i, pm]
        den_logits = np.concatenate([[l_pos[i]], l_neg[i, ~pm]])
        size_p = num_logits.size

        m = max(num_logits.max(), den_logits.max())
        num_e = np.exp(num_logits - m)
        den_e = np.exp(den_logits - m)
        num_z = num_e.sum()
        den_z = den_e.sum()
        loss_sum += -(1.0 / size_p) * (
            np.log(max(num_z, _LOG_FLOOR)) - np.log(max(den_z, _LOG_FLOOR))
        )

        # d/dz of log-sum-exp is the softmax-weighted mean of the members.
        a_w = num_e / num_z
        b_w = den_e / den_z
        g = a_w @ inp.negatives[pm]
        g -= b_w[0] * inp.positives[i]
        if b_w.size > 1:
            g -= b_w[1:] @ inp.negatives[~pm]
        grad[i] = -(1.0 / size_p) * g / tau

    return loss_sum / b, grad / b


def schedule_w(t, t_end):
    """Coefficient schedule: 1 at epoch 0, linear to 0 at ``t_end``, 0 after.

    ``t_end=None`` disables the schedule (w stays 1 forever); ``t_end=0``
    means the aggregation term never fires.
    """
    if t < 0:
        raise DomainError(f"epoch index must be nonnegative, got {t}")
    if t_end is None:
        return 1.0
    if t_end < 0:
        raise DomainError(f"t_end must be nonnegative, got {t_end}")
    if t >= t_end:
        return 0.0
    return 1.0 - t / t_end


def combined_loss(inp, positive_index_sets, alpha, w):
    """Full training loss: instance term + alpha * w * aggregation term.

    When alpha*w == 0 the aggregation branch is skipped entirely, so the
    result is bit-for-bit the instance-discrimination loss.
    """
    if alpha < 0:
        raise ConfigurationError("alpha must be nonnegative")
    if not (0.0 <= w <= 1.0):
        raise ConfigurationError("schedule weight must lie in [0, 1]")
    loss, grad = moco_loss(inp)
    coeff = alpha * w
    if coeff == 0.0:
        return loss, grad
    id_l, id_g = id_loss(inp, positive_index_sets)
    return loss + coeff * id_l, grad + coeff * id_g

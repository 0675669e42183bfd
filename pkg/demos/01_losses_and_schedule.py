"""
Contrastive losses and the decaying coefficient
===============================================

Small hand-checkable geometries for the three loss functions and the
schedule that blends them. Everything prints, nothing is trained.
"""

import math

import numpy as np

from sscl import ContrastiveBatchInput, UNLABELED
from sscl import combined_loss, id_loss, moco_loss, schedule_w

# ---------------------------------------------------------------------------
# instance discrimination on a geometry you can do in your head:
# the anchor sits exactly on its positive and both negatives are orthogonal

inp = ContrastiveBatchInput(
    anchors=np.array([[1.0, 0.0]]),
    positives=np.array([[1.0, 0.0]]),
    negatives=np.array([[0.0, 1.0], [0.0, -1.0]]),
    negative_labels=np.array([UNLABELED, UNLABELED]),
    anchor_labels=np.array([0]),
    temperature=1.0,
)
loss, grad = moco_loss(inp)
print("instance loss on the orthogonal geometry")
print(f"  computed   {loss:.12f}")
print(f"  closed form {-math.log(math.e / (math.e + 2.0)):.12f}")
print(f"  anchor gradient {grad[0]}")
print()

# ---------------------------------------------------------------------------
# the aggregation loss moves same-class queue entries from the denominator
# into the numerator. One reassigned key at similarity 1 plus one true
# negative at similarity 0 gives -log(e / (e + 1)).

inp = ContrastiveBatchInput(
    anchors=np.array([[1.0, 0.0]]),
    positives=np.array([[1.0, 0.0]]),
    negatives=np.array([[1.0, 0.0], [0.0, 1.0]]),
    negative_labels=np.array([0, UNLABELED]),
    anchor_labels=np.array([0]),
    temperature=1.0,
)
sets = [np.array([0])]  # queue row 0 shares the anchor's class
i_loss, _ = id_loss(inp, sets)
print("aggregation loss with one reassigned key")
print(f"  computed   {i_loss:.12f}")
print(f"  closed form {-math.log(math.e / (math.e + 1.0)):.12f}")

# an unlabeled anchor has no positive set and contributes nothing
inp_u = ContrastiveBatchInput(
    anchors=np.array([[1.0, 0.0]]),
    positives=np.array([[1.0, 0.0]]),
    negatives=np.array([[0.0, 1.0]]),
    negative_labels=np.array([2]),
    anchor_labels=np.array([UNLABELED]),
    temperature=1.0,
)
print(f"  unlabeled anchor contributes {id_loss(inp_u, [np.empty(0, int)])[0]}")
print()

# ---------------------------------------------------------------------------
# the combined objective is instance + alpha * w(t) * aggregation.
# When alpha * w(t) == 0 the aggregation branch is skipped outright and
# the result is bit for bit the instance loss.

m_loss, m_grad = moco_loss(inp)
c_loss, c_grad = combined_loss(inp, sets, alpha=2.0, w=1.0)
print("combined objective")
print(f"  alpha=2, w=1: {c_loss:.12f} = {m_loss:.12f} + 2 * {i_loss:.12f}")
z_loss, z_grad = combined_loss(inp, sets, alpha=2.0, w=0.0)
print(f"  alpha=2, w=0 equals the instance loss exactly: "
      f"{z_loss == m_loss and np.array_equal(z_grad, m_grad)}")
print()

# ---------------------------------------------------------------------------
# w(t) decays linearly from 1 to 0 at t_end and stays there, so labels
# steer the early epochs and pure instance discrimination finishes the run

print("schedule w(t) with t_end=200 (sampled)")
for t in (0, 50, 100, 150, 199, 200, 400):
    print(f"  w({t:3d}) = {schedule_w(t, 200):.3f}")
print(f"schedule disabled (t_end=None): w(123) = {schedule_w(123, None)}")

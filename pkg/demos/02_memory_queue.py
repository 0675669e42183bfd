"""
The label-augmented memory queue
================================

The queue is a fixed-size FIFO of key embeddings, each stored with the
label it was exposed with during training (usually UNLABELED). This walk
shows admission order and eviction, then how labeled entries become the
positive sets of the aggregation loss.
"""

import numpy as np

from sscl import UNLABELED, enqueue_batch, init_queue, positives_of, snapshot

rng = np.random.default_rng(0)


def unit_rows(n, dim):
    v = rng.standard_normal((n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


# a tiny queue so the whole state fits on screen
q = init_queue(capacity=6, dim=3, seed=42)
emb, labels = snapshot(q)
print("fresh queue: random unit rows, every label UNLABELED")
print(f"  labels {labels}")
print(f"  row norms {np.linalg.norm(emb, axis=1).round(6)}")
print()

# enqueue three batches; row 0 is always the oldest surviving entry
for step, batch_labels in enumerate(([0, 0], [1, UNLABELED], [0, 1])):
    keys = unit_rows(len(batch_labels), 3)
    enqueue_batch(q, keys, np.array(batch_labels))
    _, labels = snapshot(q)
    print(f"after batch {step} with labels {batch_labels}: queue labels {labels}")
print()

# positives_of answers "which queue rows share this class", which is
# exactly the index set the aggregation loss reassigns per anchor
print(f"rows with class 0: {positives_of(q, 0)}")
print(f"rows with class 1: {positives_of(q, 1)}")
print(f"rows for an unlabeled anchor: {positives_of(q, UNLABELED)} (always empty)")
print()

# eviction is strictly oldest-first: six more singleton batches flush
# everything that was there before
for i in range(6):
    enqueue_batch(q, unit_rows(1, 3), np.array([5]))
_, labels = snapshot(q)
print(f"after six singleton batches of class 5: {labels}")

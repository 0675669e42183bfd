"""The pre-training loop: two views in, queue negatives, combined loss out.

One step runs, in order: per-item two-view augmentation; query forward on the
anchor views and key forward on the positive views; a queue snapshot for
negatives; positive-set lookup for every labeled anchor against the queue
labels; the combined loss with coefficient alpha * w(epoch); an SGD step on
the query parameters at the cosine learning rate; the momentum update of the
key parameters; and finally enqueueing the key outputs under the batch's
exposed labels. Unlabeled items enter the queue as UNLABELED; their true
classes exist only in the split's audit record and never reach this module.

All randomness is derived, never carried: epoch shuffles come from
(seed, epoch) and augmentation from (seed, source_id, epoch), so a run is
reproducible from its seed and a checkpoint needs no generator state. The
epoch counter advances after a full pass over the shuffled labeled+unlabeled
pool; a trailing partial batch is dropped rather than padded.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .core import ConsistencyError, DataError, TrainConfig, UNLABELED
from .data import augment_pair, example_stream, pretrain_policy
from .encoder import (
    backward_query,
    build_encoder_pair,
    cosine_lr,
    forward_key,
    forward_query,
    momentum_update,
    sgd_momentum_step,
)
from .evaluation import embed_examples, knn_accuracy, DEFAULT_KS
from .losses import ContrastiveBatchInput, combined_loss, id_loss, moco_loss, schedule_w
from .memory_queue import MemoryQueue, enqueue_batch, init_queue, positives_of, snapshot
from .serialize import read_container, write_container

METRIC_COLUMNS = ("epoch", "loss_total", "loss_moco", "loss_id", "w", "lr",
                  "knn5_val", "knn200_val")


@dataclass
class TrainState:
    config: TrainConfig
    architecture_id: str
    input_shape: tuple
    pair: object
    queue: MemoryQueue
    velocity: np.ndarray
    epoch: int = 0        # next epoch to run
    iteration: int = 0    # batches consumed so far
    metrics: list = field(default_factory=list)
    policy: object = None

    # per-epoch accumulators, reset by the loop
    _sums: dict = field(default_factory=dict, repr=False)


def init_train_state(config, split, architecture_id, policy=None):
    pool = list(split.labeled) + list(split.unlabeled)
    if not pool:
        raise DataError("split has no training items")
    input_shape = tuple(np.asarray(pool[0].input).shape)
    pair = build_encoder_pair(architecture_id, input_shape, config.embedding_dim,
                              config.ghost_subbatches, config.seed)
    queue = init_queue(config.queue_size, config.embedding_dim, config.seed)
    return TrainState(
        config=config,
        architecture_id=architecture_id,
        input_shape=input_shape,
        pair=pair,
        queue=queue,
        velocity=np.zeros(pair.query_params.size),
        policy=policy if policy is not None else pretrain_policy(),
    )


def _epoch_order(seed, epoch, n):
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 0x0E9, epoch]))
    return rng.permutation(n)


def pretrain_step(state, batch):
    """One optimization step on a batch of LabeledExample items."""
    cfg = state.config
    views_a, views_p, labels = [], [], []
    for e in batch:
        stream = example_stream(cfg.seed, e.source_id, state.epoch)
        xa, xp = augment_pair(e.input, state.policy, stream)
        views_a.append(xa)
        views_p.append(xp)
        labels.append(e.label)
    anchors_in = np.stack(views_a)
    positives_in = np.stack(views_p)
    anchor_labels = np.array(labels, dtype=np.int64)

    z_a, cache = forward_query(state.pair, anchors_in, train=True)
    z_p = forward_key(state.pair, positives_in, train=True)

    neg_embeddings, neg_labels = snapshot(state.queue)
    positive_sets = [
        positives_of(state.queue, int(lab)) if lab != UNLABELED
        else np.empty(0, dtype=np.int64)
        for lab in anchor_labels
    ]

    w = schedule_w(state.epoch, cfg.t_end)
    inp = ContrastiveBatchInput(
        anchors=z_a, positives=z_p,
        negatives=neg_embeddings, negative_labels=neg_labels,
        anchor_labels=anchor_labels, temperature=cfg.temperature)
    total, grad_anchors = combined_loss(inp, positive_sets, cfg.alpha, w)
    moco_part, _ = moco_loss(inp)
    id_part, _ = id_loss(inp, positive_sets)
    if not (math.isfinite(total) and math.isfinite(moco_part) and math.isfinite(id_part)):
        raise ConsistencyError(f"non-finite loss at iteration {state.iteration}")

    lr = cosine_lr(state.epoch, cfg.total_epochs, cfg.base_lr)
    grads = backward_query(state.pair, cache, grad_anchors)
    state.pair.query_params, state.velocity = sgd_momentum_step(
        state.pair.query_params, state.velocity, grads, lr,
        momentum=cfg.optimizer_momentum)
    state.pair.key_params = momentum_update(state.pair.key_params,
                                            state.pair.query_params, cfg.momentum)
    enqueue_batch(state.queue, z_p, anchor_labels)

    state.iteration += 1
    s = state._sums
    s["steps"] = s.get("steps", 0) + 1
    s["loss_total"] = s.get("loss_total", 0.0) + total
    s["loss_moco"] = s.get("loss_moco", 0.0) + moco_part
    s["loss_id"] = s.get("loss_id", 0.0) + id_part
    s["w"] = w
    s["lr"] = lr
    return state


def _knn_eval(state, split, ks=DEFAULT_KS):
    bank = embed_examples(state.pair, split.labeled)
    queries = embed_examples(state.pair, split.validation)
    out = {}
    for k in ks:
        key = f"knn{k}_val"
        if k <= bank.embeddings.shape[0]:
            out[key] = knn_accuracy(bank, queries, k)
        else:
            out[key] = None  # bank smaller than k: leave the cell blank
    return out


def _finish_epoch(state, split, eval_every):
    s = state._sums
    steps = max(s.get("steps", 0), 1)
    row = {
        "epoch": state.epoch,
        "loss_total": s.get("loss_total", 0.0) / steps,
        "loss_moco": s.get("loss_moco", 0.0) / steps,
        "loss_id": s.get("loss_id", 0.0) / steps,
        "w": s.get("w", schedule_w(state.epoch, state.config.t_end)),
        "lr": s.get("lr", cosine_lr(state.epoch, state.config.total_epochs,
                                    state.config.base_lr)),
        "knn5_val": None,
        "knn200_val": None,
    }
    last = state.epoch == state.config.total_epochs - 1
    if eval_every and ((state.epoch + 1) % eval_every == 0 or last):
        row.update(_knn_eval(state, split))
    state.metrics.append(row)
    state._sums = {}
    state.epoch += 1
    return row


def pretrain(config, split, architecture_id, policy=None, eval_every=0,
             checkpoint_path=None, save_every=0, resume_from=None):
    """Run the full pre-training loop.

    Returns (pair, metrics, state). With resume_from, training continues
    from the stored epoch and reproduces the uninterrupted run bit for bit.
    checkpoint_path (with optional save_every epochs) writes restartable
    snapshots; the final state is always written when a path is given.
    """
    if resume_from is not None:
        state = load_checkpoint(resume_from, policy=policy)
        config = state.config
    else:
        state = init_train_state(config, split, architecture_id, policy=policy)
    pool = list(split.labeled) + list(split.unlabeled)
    b = config.batch_size
    for _ in range(state.epoch, config.total_epochs):
        order = _epoch_order(config.seed, state.epoch, len(pool))
        for start in range(0, len(pool) - b + 1, b):  # partial tail dropped
            batch = [pool[i] for i in order[start : start + b]]
            pretrain_step(state, batch)
        _finish_epoch(state, split, eval_every)
        if checkpoint_path and save_every and state.epoch % save_every == 0 \
                and state.epoch < config.total_epochs:
            save_checkpoint(state, f"{checkpoint_path}.ep{state.epoch}")
    if checkpoint_path:
        save_checkpoint(state, checkpoint_path)
    return state.pair, state.metrics, state


# ---------------------------------------------------------------------------
# checkpoints


def _metrics_to_json(rows):
    return [[r[c] for c in METRIC_COLUMNS] for r in rows]


def _metrics_from_json(packed):
    return [dict(zip(METRIC_COLUMNS, row)) for row in packed]


def save_checkpoint(state, path):
    meta = {
        "kind": "pretrain-checkpoint",
        "config": state.config.to_dict(),
        "architecture_id": state.architecture_id,
        "input_shape": list(state.input_shape),
        "epoch": state.epoch,
        "iteration": state.iteration,
        "queue_cursor": state.queue.write_cursor,
        "metrics": _metrics_to_json(state.metrics),
        "policy": None if state.policy is None else {
            "name": state.policy.name,
            "crop_scale": list(state.policy.crop_scale),
            "flip_prob": state.policy.flip_prob,
            "jitter_strength": state.policy.jitter_strength,
            "grayscale_prob": state.policy.grayscale_prob,
        },
    }
    arrays = {
        "query_params": state.pair.query_params,
        "key_params": state.pair.key_params,
        "query_buffers": state.pair.query_buffers,
        "key_buffers": state.pair.key_buffers,
        "velocity": state.velocity,
        "queue_embeddings": state.queue.embeddings,
        "queue_labels": state.queue.labels,
    }
    write_container(path, meta, arrays)


def load_checkpoint(path, policy=None):
    from .data import AugmentationPolicy
    from .encoder import EncoderPair

    meta, arrays = read_container(path)
    if meta.get("kind") != "pretrain-checkpoint":
        raise DataError(f"{path}: not a pretraining checkpoint")
    config = TrainConfig.from_dict(meta["config"])
    input_shape = tuple(meta["input_shape"])
    pair = EncoderPair(
        architecture_id=meta["architecture_id"],
        input_shape=input_shape,
        embedding_dim=config.embedding_dim,
        ghost_subbatches=config.ghost_subbatches,
        query_params=arrays["query_params"],
        key_params=arrays["key_params"],
        query_buffers=arrays["query_buffers"],
        key_buffers=arrays["key_buffers"],
    )
    queue = MemoryQueue(embeddings=arrays["queue_embeddings"],
                        labels=arrays["queue_labels"],
                        write_cursor=meta["queue_cursor"])
    if policy is None and meta.get("policy"):
        p = meta["policy"]
        policy = AugmentationPolicy(name=p["name"],
                                    crop_scale=tuple(p["crop_scale"]),
                                    flip_prob=p["flip_prob"],
                                    jitter_strength=p["jitter_strength"],
                                    grayscale_prob=p["grayscale_prob"])
    return TrainState(
        config=config,
        architecture_id=meta["architecture_id"],
        input_shape=input_shape,
        pair=pair,
        queue=queue,
        velocity=arrays["velocity"],
        epoch=meta["epoch"],
        iteration=meta["iteration"],
        metrics=_metrics_from_json(meta["metrics"]),
        policy=policy if policy is not None else pretrain_policy(),
    )


# ---------------------------------------------------------------------------
# metric log


def write_metrics_csv(rows, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(METRIC_COLUMNS) + "\n")
        for r in rows:
            cells = []
            for c in METRIC_COLUMNS:
                v = r.get(c)
                if v is None:
                    cells.append("")
                elif c == "epoch":
                    cells.append(str(v))
                else:
                    cells.append(repr(float(v)))
            fh.write(",".join(cells) + "\n")


def read_metrics_csv(path):
    rows = []
    try:
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n").split(",")
            if header != list(METRIC_COLUMNS):
                raise DataError(f"{path}: unexpected metric columns {header}")
            for line in fh:
                cells = line.rstrip("\n").split(",")
                row = {}
                for c, cell in zip(METRIC_COLUMNS, cells):
                    if cell == "":
                        row[c] = None
                    elif c == "epoch":
                        row[c] = int(cell)
                    else:
                        row[c] = float(cell)
                rows.append(row)
    except OSError as exc:
        raise DataError(f"cannot read metrics {path}: {exc}") from exc
    return rows

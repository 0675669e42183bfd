"""Representation evaluation: weighted k-NN, linear probe, fine-tuning.

All three protocols read backbone features or embeddings from a trained
encoder pair. The k-NN protocol votes with weight exp(similarity / tau) over
the k most similar reference rows (tau 0.07); vote ties resolve toward the
smallest class index and neighbor ties at the k boundary toward the smallest
bank index, so classification is deterministic and seed-free. The linear
probe trains a single softmax layer on frozen backbone features; fine-tuning
trains the same classifier with the backbone unfrozen. Class cohesion
summarizes a labeled embedding set by its mean within-class and
cross-class pairwise similarities.
"""

import hashlib
from dataclasses import dataclass

import numpy as np

from .core import (
    ConfigurationError,
    ConsistencyError,
    DataError,
    DomainError,
    MisuseError,
    NormalizationError,
    ShapeError,
    UNLABELED,
    check_unit_rows,
)
from .data import augment_single, example_stream, identity_policy, inputs_matrix
from .encoder import (
    backbone_backward,
    backbone_forward,
    cosine_lr,
    forward_features,
    forward_query,
    sgd_momentum_step,
)

KNN_TAU = 0.07
DEFAULT_KS = (5, 200)


# ---------------------------------------------------------------------------
# embedding banks


@dataclass
class EmbeddingBank:
    embeddings: np.ndarray  # (N, d') unit rows
    labels: np.ndarray      # (N,) int64, UNLABELED allowed outside k-NN reference use
    source_ids: list


def make_bank(embeddings, labels, source_ids=None):
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2:
        raise ShapeError(f"bank embeddings must be 2-D, got {emb.ndim}-D")
    lab = np.asarray(labels, dtype=np.int64)
    if lab.shape != (emb.shape[0],):
        raise ShapeError(f"{emb.shape[0]} rows but {lab.shape} labels")
    if emb.shape[0]:
        check_unit_rows(emb, "bank embeddings", atol=1e-6)
    if source_ids is None:
        source_ids = [f"row-{i:06d}" for i in range(emb.shape[0])]
    elif len(source_ids) != emb.shape[0]:
        raise ShapeError("source id count does not match row count")
    return EmbeddingBank(embeddings=emb, labels=lab, source_ids=list(source_ids))


def embed_examples(pair, examples, batch_size=256):
    """Query-side embeddings of a labeled pool, eval-mode statistics."""
    if not examples:
        raise DataError("no examples to embed")
    rows = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        z, _ = forward_query(pair, inputs_matrix(chunk), train=False)
        rows.append(z)
    return make_bank(np.concatenate(rows),
                     [e.label for e in examples],
                     [e.source_id for e in examples])


def write_bank(bank, path):
    """Canonical text form: header "N d' flag", then one row per line of
    source_id, label, and d' floats at 9 significant digits."""
    n, d = bank.embeddings.shape
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{n} {d} 1\n")
        for i in range(n):
            floats = " ".join(f"{v:.9g}" for v in bank.embeddings[i])
            fh.write(f"{bank.source_ids[i]} {int(bank.labels[i])} {floats}\n")


def read_bank(path):
    try:
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().split()
            if len(header) != 3:
                raise DataError(f"{path}: bad bank header")
            n, d, flag = (int(x) for x in header)
            emb = np.zeros((n, d))
            labels = np.full(n, UNLABELED, dtype=np.int64)
            ids = []
            for i in range(n):
                parts = fh.readline().split()
                want = 2 + d if flag else 1 + d
                if len(parts) != want:
                    raise DataError(f"{path}: row {i} has {len(parts)} fields, want {want}")
                ids.append(parts[0])
                if flag:
                    labels[i] = int(parts[1])
                emb[i] = [float(v) for v in parts[flag + 1 :]]
    except OSError as exc:
        raise DataError(f"cannot read bank {path}: {exc}") from exc
    except ValueError as exc:
        raise DataError(f"unparseable bank {path}: {exc}") from exc
    return make_bank(emb, labels, ids)


# ---------------------------------------------------------------------------
# weighted k-NN


def _reference_ok(bank):
    if bank.embeddings.shape[0] == 0:
        raise ConfigurationError("empty reference bank")
    if np.any(bank.labels < 0):
        raise MisuseError("reference bank must be fully labeled for k-NN voting")


def _vote(sims, labels, k, tau, uniform):
    order = np.argsort(-sims, kind="stable")[:k]  # stable: ties keep bank order
    w = np.ones(k) if uniform else np.exp(sims[order] / tau)
    totals = np.bincount(labels[order], weights=w)
    return int(np.argmax(totals))  # argmax tie -> smallest class index


def knn_classify(bank, query, k, tau_knn=KNN_TAU, uniform=False):
    """Label of the weighted vote among the k nearest bank rows."""
    _reference_ok(bank)
    n = bank.embeddings.shape[0]
    if not 1 <= k <= n:
        raise ConfigurationError(f"k must lie in [1, {n}], got {k}")
    if tau_knn <= 0:
        raise ConfigurationError(f"tau must be positive, got {tau_knn}")
    q = np.asarray(query, dtype=np.float64)
    sims = bank.embeddings @ q
    return _vote(sims, bank.labels, k, tau_knn, uniform)


def knn_accuracy(bank, queries, k, tau_knn=KNN_TAU, uniform=False):
    """Fraction of query rows whose vote matches their own label."""
    _reference_ok(bank)
    nq = queries.embeddings.shape[0]
    if nq == 0:
        raise DomainError("no queries to classify")
    n = bank.embeddings.shape[0]
    if not 1 <= k <= n:
        raise ConfigurationError(f"k must lie in [1, {n}], got {k}")
    sims = queries.embeddings @ bank.embeddings.T
    hits = 0
    for i in range(nq):
        if _vote(sims[i], bank.labels, k, tau_knn, uniform) == queries.labels[i]:
            hits += 1
    return hits / nq


# ---------------------------------------------------------------------------
# linear probe and fine-tuning


@dataclass
class ProbeConfig:
    epochs: int = 100
    base_lr: float = 30.0  # image-scale default; desk configs pass smaller
    freeze_backbone: bool = True
    batch_size: int = 64

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be nonnegative, got {self.epochs}")
        if self.base_lr <= 0:
            raise ConfigurationError(f"base_lr must be positive, got {self.base_lr}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be positive, got {self.batch_size}")


@dataclass
class LinearClassifier:
    weights: np.ndarray  # (F, C)
    bias: np.ndarray     # (C,)

    def predict(self, features):
        logits = features @ self.weights + self.bias
        return np.argmax(logits, axis=1)  # ties -> smallest class index


def _softmax_grads(feats, labels, w, b):
    logits = feats @ w + b
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    onehot = np.zeros_like(p)
    onehot[np.arange(len(labels)), labels] = 1.0
    dlogits = (p - onehot) / len(labels)
    return feats.T @ dlogits, dlogits.sum(axis=0), dlogits


def _checksum(pair):
    h = hashlib.blake2s()
    h.update(pair.query_params.tobytes())
    h.update(pair.query_buffers.tobytes())
    return h.hexdigest()


def _epoch_batches(n, batch_size, seed, epoch):
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 0x9B0, epoch]))
    order = rng.permutation(n)
    return [order[s : s + batch_size] for s in range(0, n, batch_size)]


def _augmented_inputs(examples, policy, seed, epoch):
    if policy is None or policy.name == "none":
        return inputs_matrix(examples)
    return np.stack([
        augment_single(e.input, policy, example_stream(seed, e.source_id, epoch))
        for e in examples
    ])


def train_linear_probe(pair, examples, cfg, n_classes, seed=0, policy=None):
    """Softmax layer on frozen backbone features.

    The backbone is read-only: features come from eval-mode forward passes
    and a checksum guards against any parameter or statistics drift. Returns
    the trained classifier; the classifier starts at zero so a 0-epoch run
    predicts class 0 everywhere.
    """
    if not examples:
        raise DataError("labeled pool is empty")
    if not cfg.freeze_backbone:
        raise MisuseError("probe config must freeze the backbone")
    before = _checksum(pair)
    f = forward_features(pair, inputs_matrix(examples[:1])).shape[1]
    w = np.zeros((f, n_classes))
    b = np.zeros(n_classes)
    vel = np.zeros(f * n_classes + n_classes)
    labels = np.array([e.label for e in examples], dtype=np.int64)
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.base_lr)
        x_epoch = _augmented_inputs(examples, policy, seed, epoch)
        feats_epoch = forward_features(pair, x_epoch)
        for idx in _epoch_batches(len(examples), cfg.batch_size, seed, epoch):
            dw, db, _ = _softmax_grads(feats_epoch[idx], labels[idx], w, b)
            flat = np.concatenate([w.ravel(), b])
            grad = np.concatenate([dw.ravel(), db])
            flat, vel = sgd_momentum_step(flat, vel, grad, lr)
            w = flat[: f * n_classes].reshape(f, n_classes)
            b = flat[f * n_classes :]
    if _checksum(pair) != before:
        raise ConsistencyError("backbone changed during a frozen probe")
    return LinearClassifier(weights=w, bias=b)


def fine_tune(pair, examples, cfg, n_classes, seed=0, policy=None):
    """Backbone plus classifier trained jointly on the labeled pool.

    Works on copies: the input pair is untouched and the updated pair is
    returned next to the classifier. Normalization reads running statistics
    (parameters train, statistics stay frozen), so any labeled batch size is
    allowed.
    """
    if not examples:
        raise DataError("labeled pool is empty")
    if cfg.freeze_backbone:
        raise MisuseError("fine-tuning needs an unfrozen config")
    from dataclasses import replace

    tuned = replace(pair,
                    query_params=pair.query_params.copy(),
                    key_params=pair.key_params.copy(),
                    query_buffers=pair.query_buffers.copy(),
                    key_buffers=pair.key_buffers.copy())
    f = forward_features(tuned, inputs_matrix(examples[:1])).shape[1]
    w = np.zeros((f, n_classes))
    b = np.zeros(n_classes)
    vel_clf = np.zeros(f * n_classes + n_classes)
    vel_net = np.zeros(tuned.query_params.size)
    labels = np.array([e.label for e in examples], dtype=np.int64)
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.base_lr)
        x_epoch = _augmented_inputs(examples, policy, seed, epoch)
        for idx in _epoch_batches(len(examples), cfg.batch_size, seed, epoch):
            feats, caches = backbone_forward(tuned, x_epoch[idx], train=False)
            dw, db, dlogits = _softmax_grads(feats, labels[idx], w, b)
            dfeats = dlogits @ w.T
            net_grad = backbone_backward(tuned, caches, dfeats)
            tuned.query_params, vel_net = sgd_momentum_step(
                tuned.query_params, vel_net, net_grad, lr)
            flat = np.concatenate([w.ravel(), b])
            grad = np.concatenate([dw.ravel(), db])
            flat, vel_clf = sgd_momentum_step(flat, vel_clf, grad, lr)
            w = flat[: f * n_classes].reshape(f, n_classes)
            b = flat[f * n_classes :]
    return tuned, LinearClassifier(weights=w, bias=b)


def classifier_accuracy(pair, classifier, examples):
    """Top-1 accuracy on raw (un-augmented) inputs."""
    if not examples:
        raise DomainError("no examples to score")
    feats = forward_features(pair, inputs_matrix(examples))
    preds = classifier.predict(feats)
    labels = np.array([e.label for e in examples], dtype=np.int64)
    return float(np.mean(preds == labels))


# ---------------------------------------------------------------------------
# representation metrics


def class_cohesion(bank):
    """(mean within-class similarity, mean cross-class similarity).

    Needs at least two classes with at least two members each; cohesion of a
    singleton class is undefined.
    """
    labels = bank.labels
    if np.any(labels < 0):
        raise DomainError("cohesion needs fully labeled embeddings")
    classes, counts = np.unique(labels, return_counts=True)
    if classes.size < 2:
        raise DomainError("cohesion needs at least two classes")
    if np.any(counts < 2):
        raise DomainError("every class needs at least two members")
    s = bank.embeddings @ bank.embeddings.T
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(labels.size, dtype=bool)
    intra = float(s[same & off].mean())
    inter = float(s[~same].mean())
    return intra, inter

"""Query/key encoder pair with momentum update and ghost normalization.

Both networks share one architecture and one flat parameter layout, so the
momentum update is a single elementwise convex combination of two vectors.
Normalization layers keep their statistics in a separate flat buffer vector,
one per side: the key network accumulates running statistics through its own
forward passes and never shares batch statistics with the query side.

Architectures are registered by id. Two ship by default:

  "tiny-mlp"    two hidden layers of width 64 for flat synthetic vectors
  "small-conv"  three 3x3 conv blocks (16/32/64 channels) with 2x2 max-pool
                and global average pooling, for 3x32x32 images

Both end in a two-layer projection head (hidden width = feature width) whose
output rows are l2-normalized into embeddings. A deeper backbone, e.g. a
residual network with a 3x3 stem, can be added via register_architecture
without touching the training loop; only the layer list changes.

Ghost normalization: in train mode a batch is split into G contiguous
sub-batches and each sub-batch is normalized with its own statistics. This
emulates the cross-device statistics decoupling of shuffled batch norm on a
single device. Eval mode uses running statistics and accepts any batch size.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .core import ConfigurationError, DomainError, ShapeError, l2_normalize

_EPS = 1e-5          # variance floor inside normalization
_RUNNING_RATE = 0.1  # update rate for running mean/var


# ---------------------------------------------------------------------------
# layers
#
# Each layer exposes a parameter count and (for normalization) a buffer
# count, initializes its own slice of the flat vectors, and implements
# forward/backward on float64 arrays. Caches returned by forward are opaque
# tuples consumed by the matching backward.


class Dense:
    def __init__(self, n_in, n_out):
        self.n_in = n_in
        self.n_out = n_out
        self.param_count = n_in * n_out + n_out
        self.buffer_count = 0

    def init_params(self, rng):
        w = rng.standard_normal((self.n_in, self.n_out)) * math.sqrt(2.0 / self.n_in)
        b = np.zeros(self.n_out)
        return np.concatenate([w.ravel(), b])

    def forward(self, p, buf, x, train, update_stats):
        w = p[: self.n_in * self.n_out].reshape(self.n_in, self.n_out)
        b = p[self.n_in * self.n_out :]
        return x @ w + b, x

    def backward(self, p, cache, dy):
        x = cache
        w = p[: self.n_in * self.n_out].reshape(self.n_in, self.n_out)
        dw = x.T @ dy
        db = dy.sum(axis=0)
        dx = dy @ w.T
        return dx, np.concatenate([dw.ravel(), db])


class Relu:
    param_count = 0
    buffer_count = 0

    def init_params(self, rng):
        return np.zeros(0)

    def forward(self, p, buf, x, train, update_stats):
        return np.maximum(x, 0.0), x > 0.0

    def backward(self, p, cache, dy):
        return dy * cache, np.zeros(0)


class GhostNorm:
    """Batch normalization over G independent contiguous sub-batches.

    Works on (B, F) activations and on (B, C, H, W) feature maps; in the
    latter case statistics are per channel over the sub-batch and spatial
    axes. Buffers hold running mean then running variance.
    """

    def __init__(self, num_features, groups):
        if groups < 1:
            raise ConfigurationError("ghost sub-batch count must be >= 1")
        self.f = num_features
        self.groups = groups
        self.param_count = 2 * num_features   # gamma, beta
        self.buffer_count = 2 * num_features  # running mean, running var

    def init_params(self, rng):
        return np.concatenate([np.ones(self.f), np.zeros(self.f)])

    def init_buffers(self):
        return np.concatenate([np.zeros(self.f), np.ones(self.f)])

    def _grouped(self, x):
        # reshape into (G, B/G, ...) with the feature axis kept intact
        b = x.shape[0]
        if b % self.groups != 0:
            raise ConfigurationError(
                f"batch size {b} not divisible by {self.groups} sub-batches")
        if x.ndim == 2:
            g = x.reshape(self.groups, b // self.groups, self.f)
            axes = (1,)
            fshape = (1, 1, self.f)
        elif x.ndim == 4:
            g = x.reshape(self.groups, b // self.groups, *x.shape[1:])
            axes = (1, 3, 4)
            fshape = (1, 1, self.f, 1, 1)
        else:
            raise ShapeError(f"normalization expects 2-D or 4-D input, got {x.ndim}-D")
        return g, axes, fshape

    def _feature_view(self, x):
        return (1, self.f) if x.ndim == 2 else (1, self.f, 1, 1)

    def forward(self, p, buf, x, train, update_stats):
        gamma = p[: self.f]
        beta = p[self.f :]
        if not train:
            fv = self._feature_view(x)
            mean = buf[: self.f].reshape(fv)
            var = buf[self.f :].reshape(fv)
            inv = 1.0 / np.sqrt(var + _EPS)
            xhat = (x - mean) * inv
            y = gamma.reshape(fv) * xhat + beta.reshape(fv)
            return y, (False, xhat, inv, x.shape)
        g, axes, fshape = self._grouped(x)
        n = np.prod([g.shape[a] for a in axes])
        mu = g.mean(axis=axes, keepdims=True)
        xmu = g - mu
        var = (xmu * xmu).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + _EPS)
        xhat = xmu * inv
        y = gamma.reshape(fshape) * xhat + beta.reshape(fshape)
        if update_stats:
            # running stats track the mean over sub-batches of the
            # per-sub-batch statistics, at a fixed rate
            red = tuple(i for i in range(g.ndim) if fshape[i] == 1)
            batch_mean = mu.mean(axis=red).ravel()
            batch_var = var.mean(axis=red).ravel()
            buf[: self.f] = (1 - _RUNNING_RATE) * buf[: self.f] + _RUNNING_RATE * batch_mean
            buf[self.f :] = (1 - _RUNNING_RATE) * buf[self.f :] + _RUNNING_RATE * batch_var
        return y.reshape(x.shape), (True, xhat, inv, xmu, n, fshape, x.shape)

    def backward(self, p, cache, dy):
        gamma = p[: self.f]
        if not cache[0]:
            _, xhat, inv, shape = cache
            fv = self._feature_view(dy)
            red = tuple(i for i in range(dy.ndim) if fv[i] == 1)
            dgamma = (dy * xhat).sum(axis=red)
            dbeta = dy.sum(axis=red)
            dx = dy * gamma.reshape(fv) * inv
            return dx, np.concatenate([dgamma, dbeta])
        _, xhat, inv, xmu, n, fshape, shape = cache
        gdy = dy.reshape(xhat.shape)
        red = tuple(i for i in range(xhat.ndim) if fshape[i] == 1)
        dgamma = (gdy * xhat).sum(axis=red)
        dbeta = gdy.sum(axis=red)
        axes = tuple(i for i in range(1, xhat.ndim) if fshape[i] == 1)
        dxhat = gdy * gamma.reshape(fshape)
        dvar = (dxhat * xmu).sum(axis=axes, keepdims=True) * (-0.5) * inv ** 3
        dmu = -dxhat.sum(axis=axes, keepdims=True) * inv \
            + dvar * (-2.0 / n) * xmu.sum(axis=axes, keepdims=True)
        dx = dxhat * inv + dvar * (2.0 / n) * xmu + dmu / n
        return dx.reshape(shape), np.concatenate([dgamma, dbeta])


class Conv3x3:
    """3x3 convolution, stride 1, zero padding 1 (shape preserving)."""

    def __init__(self, c_in, c_out):
        self.c_in = c_in
        self.c_out = c_out
        self.param_count = c_out * c_in * 9 + c_out
        self.buffer_count = 0

    def init_params(self, rng):
        fan_in = self.c_in * 9
        w = rng.standard_normal((fan_in, self.c_out)) * math.sqrt(2.0 / fan_in)
        return np.concatenate([w.ravel(), np.zeros(self.c_out)])

    def _cols(self, x):
        b, c, h, w = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
        # (B, C, H, W, 3, 3) -> (B, H*W, C*9)
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(b, h * w, c * 9)

    def forward(self, p, buf, x, train, update_stats):
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ShapeError(f"conv expects (B,{self.c_in},H,W), got {x.shape}")
        b, _, h, w = x.shape
        wm = p[: self.c_in * 9 * self.c_out].reshape(self.c_in * 9, self.c_out)
        bias = p[self.c_in * 9 * self.c_out :]
        cols = self._cols(x)
        y = cols @ wm + bias
        y = y.transpose(0, 2, 1).reshape(b, self.c_out, h, w)
        return y, (cols, x.shape)

    def backward(self, p, cache, dy):
        cols, xshape = cache
        b, c, h, w = xshape
        wm = p[: self.c_in * 9 * self.c_out].reshape(self.c_in * 9, self.c_out)
        dy2 = dy.reshape(b, self.c_out, h * w).transpose(0, 2, 1)
        dwm = np.einsum("bpk,bpo->ko", cols, dy2)
        dbias = dy2.sum(axis=(0, 1))
        dcols = dy2 @ wm.T
        # scatter-add the column gradient back through the padding
        dwin = dcols.reshape(b, h, w, c, 3, 3)
        dxp = np.zeros((b, c, h + 2, w + 2))
        for ki in range(3):
            for kj in range(3):
                dxp[:, :, ki : ki + h, kj : kj + w] += dwin[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
        return dxp[:, :, 1:-1, 1:-1], np.concatenate([dwm.ravel(), dbias])


class MaxPool2x2:
    param_count = 0
    buffer_count = 0

    def init_params(self, rng):
        return np.zeros(0)

    def forward(self, p, buf, x, train, update_stats):
        b, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"2x2 pooling needs even spatial dims, got {h}x{w}")
        r = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        r = r.reshape(b, c, h // 2, w // 2, 4)
        idx = r.argmax(axis=-1)  # first maximum wins on ties
        y = np.take_along_axis(r, idx[..., None], axis=-1)[..., 0]
        return y, (idx, x.shape)

    def backward(self, p, cache, dy):
        idx, (b, c, h, w) = cache
        dr = np.zeros((b, c, h // 2, w // 2, 4))
        np.put_along_axis(dr, idx[..., None], dy[..., None], axis=-1)
        dx = dr.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return dx.reshape(b, c, h, w), np.zeros(0)


class GlobalAvgPool:
    param_count = 0
    buffer_count = 0

    def init_params(self, rng):
        return np.zeros(0)

    def forward(self, p, buf, x, train, update_stats):
        return x.mean(axis=(2, 3)), x.shape

    def backward(self, p, cache, dy):
        b, c, h, w = cache
        dx = np.broadcast_to(dy[:, :, None, None] / (h * w), (b, c, h, w))
        return dx.copy(), np.zeros(0)


# ---------------------------------------------------------------------------
# sequential container over one flat parameter vector


class Sequential:
    def __init__(self, layers, head_start):
        self.layers = layers
        self.head_start = head_start  # layers[:head_start] form the backbone
        self.param_slices = []
        self.buffer_slices = []
        p = b = 0
        for lay in layers:
            self.param_slices.append(slice(p, p + lay.param_count))
            p += lay.param_count
            self.buffer_slices.append(slice(b, b + lay.buffer_count))
            b += lay.buffer_count
        self.param_count = p
        self.buffer_count = b

    def init_params(self, rng):
        return np.concatenate([lay.init_params(rng) for lay in self.layers] or [np.zeros(0)])

    def init_buffers(self):
        parts = [lay.init_buffers() for lay in self.layers if lay.buffer_count]
        return np.concatenate(parts) if parts else np.zeros(0)

    def forward(self, params, buffers, x, train, update_stats, upto=None):
        if params.shape != (self.param_count,):
            raise ShapeError(f"expected {self.param_count} parameters, got {params.shape}")
        stop = len(self.layers) if upto is None else upto
        caches = []
        for lay, ps, bs in zip(self.layers[:stop], self.param_slices, self.buffer_slices):
            x, cache = lay.forward(params[ps], buffers[bs], x, train, update_stats)
            caches.append(cache)
        return x, caches

    def backward(self, params, caches, dy):
        grads = np.zeros(self.param_count)
        for i in range(len(caches) - 1, -1, -1):
            lay = self.layers[i]
            dy, dp = lay.backward(params[self.param_slices[i]], caches[i], dy)
            grads[self.param_slices[i]] = dp
        return dy, grads


# ---------------------------------------------------------------------------
# architecture registry


def _tiny_mlp(input_shape, embedding_dim, groups):
    if len(input_shape) != 1:
        raise ConfigurationError(f"tiny-mlp takes flat vectors, got shape {input_shape}")
    d = input_shape[0]
    f = 64
    backbone = [Dense(d, f), GhostNorm(f, groups), Relu(),
                Dense(f, f), GhostNorm(f, groups), Relu()]
    head = [Dense(f, f), Relu(), Dense(f, embedding_dim)]
    return Sequential(backbone + head, head_start=len(backbone))


def _small_conv(input_shape, embedding_dim, groups):
    if len(input_shape) != 3:
        raise ConfigurationError(f"small-conv takes (C,H,W) images, got shape {input_shape}")
    c = input_shape[0]
    backbone = [Conv3x3(c, 16), GhostNorm(16, groups), Relu(), MaxPool2x2(),
                Conv3x3(16, 32), GhostNorm(32, groups), Relu(), MaxPool2x2(),
                Conv3x3(32, 64), GhostNorm(64, groups), Relu(), MaxPool2x2(),
                GlobalAvgPool()]
    head = [Dense(64, 64), Relu(), Dense(64, embedding_dim)]
    return Sequential(backbone + head, head_start=len(backbone))


ARCHITECTURES = {
    "tiny-mlp": _tiny_mlp,
    "small-conv": _small_conv,
}

_NET_CACHE = {}


def register_architecture(architecture_id, builder):
    """Register a builder(input_shape, embedding_dim, groups) -> Sequential.

    Deeper nets plug in here. E.g. a residual image backbone would register a
    layer list with a 3x3 stem (no early max-pool, small inputs keep their
    resolution), the usual stack of residual stages, global average pooling,
    and the same two-layer projection head shape used above.
    """
    if architecture_id in ARCHITECTURES:
        raise ConfigurationError(f"architecture {architecture_id!r} already registered")
    ARCHITECTURES[architecture_id] = builder


def get_network(architecture_id, input_shape, embedding_dim, groups):
    key = (architecture_id, tuple(input_shape), embedding_dim, groups)
    if key not in _NET_CACHE:
        if architecture_id not in ARCHITECTURES:
            raise ConfigurationError(
                f"unknown architecture {architecture_id!r}; "
                f"registered: {sorted(ARCHITECTURES)}")
        _NET_CACHE[key] = ARCHITECTURES[architecture_id](tuple(input_shape), embedding_dim, groups)
    return _NET_CACHE[key]


# ---------------------------------------------------------------------------
# encoder pair


@dataclass
class EncoderPair:
    """Two networks with one layout: the query side trains by gradient, the
    key side trails it through the momentum update."""

    architecture_id: str
    input_shape: tuple
    embedding_dim: int
    ghost_subbatches: int
    query_params: np.ndarray
    key_params: np.ndarray
    query_buffers: np.ndarray
    key_buffers: np.ndarray

    def net(self):
        return get_network(self.architecture_id, self.input_shape,
                           self.embedding_dim, self.ghost_subbatches)


def build_encoder_pair(architecture_id, input_shape, embedding_dim, ghost_subbatches, seed):
    """Initialize a query/key pair with identical parameters and buffers."""
    net = get_network(architecture_id, input_shape, embedding_dim, ghost_subbatches)
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 0xE7C]))
    params = net.init_params(rng)
    buffers = net.init_buffers()
    return EncoderPair(
        architecture_id=architecture_id,
        input_shape=tuple(input_shape),
        embedding_dim=embedding_dim,
        ghost_subbatches=ghost_subbatches,
        query_params=params,
        key_params=params.copy(),
        query_buffers=buffers,
        key_buffers=buffers.copy(),
    )


def momentum_update(theta_k, theta_q, m):
    """Return m*theta_k + (1-m)*theta_q elementwise.

    Applied once per iteration after the query gradient step. Coordinates
    never mix; m=0 copies the query vector.
    """
    theta_k = np.asarray(theta_k, dtype=np.float64)
    theta_q = np.asarray(theta_q, dtype=np.float64)
    if theta_k.shape != theta_q.shape:
        raise ShapeError(
            f"parameter vectors differ in shape: {theta_k.shape} vs {theta_q.shape}")
    if not (0.0 <= m < 1.0):
        raise ConfigurationError(f"momentum coefficient must lie in [0,1), got {m}")
    # computed as theta_q + m*(theta_k - theta_q) so that theta_k == theta_q
    # is an exact fixed point and m == 0 copies theta_q bit for bit
    return theta_q + m * (theta_k - theta_q)


def ghost_split(batch, groups):
    """Split a batch into `groups` contiguous sub-batches of equal size."""
    batch = np.asarray(batch)
    if groups < 1:
        raise ConfigurationError(f"sub-batch count must be >= 1, got {groups}")
    if batch.shape[0] % groups != 0:
        raise ConfigurationError(
            f"batch size {batch.shape[0]} not divisible into {groups} sub-batches")
    return np.split(batch, groups, axis=0)


def _run_forward(net, params, buffers, x, train, update_stats):
    pre, caches = net.forward(params, buffers, x, train, update_stats)
    z = l2_normalize(pre)
    return z, pre, caches


def forward_query(pair, batch, train=True, update_stats=None):
    """Embed a batch through the query network.

    Returns (embeddings, cache); rows are unit norm. Pass the cache to
    backward_query to get the gradient with respect to the query parameters.
    Set update_stats=False to keep running statistics untouched, e.g. for
    probing the network as a pure function.
    """
    x = np.asarray(batch, dtype=np.float64)
    if update_stats is None:
        update_stats = train
    z, pre, caches = _run_forward(pair.net(), pair.query_params, pair.query_buffers,
                                  x, train, update_stats)
    return z, (caches, pre, z)


def backward_query(pair, cache, grad_embeddings):
    """Backpropagate a gradient on the embeddings to the query parameters."""
    caches, pre, z = cache
    dz = np.asarray(grad_embeddings, dtype=np.float64)
    if dz.shape != z.shape:
        raise ShapeError(f"gradient shape {dz.shape} does not match embeddings {z.shape}")
    norms = np.linalg.norm(pre, axis=1, keepdims=True)
    # through row-wise normalization: d pre = (dz - z (z . dz)) / |pre|
    dpre = (dz - z * np.sum(z * dz, axis=1, keepdims=True)) / norms
    _, grads = pair.net().backward(pair.query_params, caches, dpre)
    return grads


def forward_key(pair, batch, train=True, update_stats=None):
    """Embed a batch through the key network. Values only: no cache is
    produced and no gradient flows to any parameter."""
    x = np.asarray(batch, dtype=np.float64)
    if update_stats is None:
        update_stats = train
    z, _, _ = _run_forward(pair.net(), pair.key_params, pair.key_buffers,
                           x, train, update_stats)
    return z


def forward_features(pair, batch, side="query"):
    """Backbone features (pre-projection-head), eval-mode statistics.

    Used by the linear probe and the fine-tuning path, which read
    representations rather than contrastive embeddings.
    """
    if side not in ("query", "key"):
        raise ConfigurationError(f"side must be 'query' or 'key', got {side!r}")
    params = pair.query_params if side == "query" else pair.key_params
    buffers = pair.query_buffers if side == "query" else pair.key_buffers
    net = pair.net()
    x = np.asarray(batch, dtype=np.float64)
    feats, _ = net.forward(params, buffers, x, train=False, update_stats=False,
                           upto=net.head_start)
    return feats


def backbone_forward(pair, batch, train=False, update_stats=None):
    """Backbone pass on the query side with a cache for backbone_backward.

    Fine-tuning runs this with train=False: parameters stay trainable while
    normalization reads running statistics, so labeled-pool batch sizes are
    unconstrained by the ghost sub-batch count.
    """
    net = pair.net()
    if update_stats is None:
        update_stats = train
    x = np.asarray(batch, dtype=np.float64)
    feats, caches = net.forward(pair.query_params, pair.query_buffers, x,
                                train=train, update_stats=update_stats,
                                upto=net.head_start)
    return feats, caches


def backbone_backward(pair, caches, dfeats):
    net = pair.net()
    grads = np.zeros(net.param_count)
    dy = np.asarray(dfeats, dtype=np.float64)
    for i in range(len(caches) - 1, -1, -1):
        lay = net.layers[i]
        dy, dp = lay.backward(pair.query_params[net.param_slices[i]], caches[i], dy)
        grads[net.param_slices[i]] = dp
    return grads


# ---------------------------------------------------------------------------
# optimizer


def cosine_lr(epoch, total_epochs, base_lr):
    """Half-period cosine decay from base_lr at epoch 0 to zero at total_epochs."""
    if epoch < 0:
        raise DomainError(f"epoch must be nonnegative, got {epoch}")
    if total_epochs <= 0:
        raise ConfigurationError(f"total_epochs must be positive, got {total_epochs}")
    if epoch >= total_epochs:
        return 0.0
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


def sgd_momentum_step(params, velocity, grad, lr, momentum=0.9):
    """One heavy-ball step: v <- momentum*v + g; p <- p - lr*v.

    Pure on its inputs; returns (new_params, new_velocity) so the velocity
    can live inside checkpointable training state.
    """
    if params.shape != grad.shape or params.shape != velocity.shape:
        raise ShapeError("params, velocity, and grad must share one shape")
    v = momentum * velocity + grad
    return params - lr * v, v

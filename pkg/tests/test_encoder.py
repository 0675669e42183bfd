import numpy as np
import pytest

from sscl.core import ConfigurationError, DomainError, ShapeError
from sscl.encoder import (
    EncoderPair,
    backward_query,
    build_encoder_pair,
    cosine_lr,
    forward_features,
    forward_key,
    forward_query,
    ghost_split,
    momentum_update,
    register_architecture,
    sgd_momentum_step,
)

from oracles import finite_difference_gradient


def tiny_pair(seed=0, d=4, d_out=5, groups=2):
    return build_encoder_pair("tiny-mlp", (d,), d_out, groups, seed)


class TestMomentumUpdate:
    def test_single_convex_combination(self):
        out = momentum_update(np.array([0.8]), np.array([0.4]), 0.95)
        assert out[0] == pytest.approx(0.78, abs=1e-15)

    def test_m_zero_copies_query(self):
        k = np.array([1.0, 2.0, 3.0])
        q = np.array([-1.0, 0.5, 9.0])
        np.testing.assert_array_equal(momentum_update(k, q, 0.0), q)

    def test_fixed_point(self):
        v = np.linspace(-2, 2, 17)
        for m in (0.0, 0.3, 0.999):
            np.testing.assert_array_equal(momentum_update(v, v, m), v)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            momentum_update(np.zeros(3), np.zeros(4), 0.5)

    def test_m_out_of_range(self):
        for m in (-0.1, 1.0, 1.5):
            with pytest.raises(ConfigurationError):
                momentum_update(np.zeros(2), np.ones(2), m)

    def test_coordinates_never_mix(self):
        rng = np.random.default_rng(0)
        k = rng.standard_normal(20)
        q = rng.standard_normal(20)
        base = momentum_update(k, q, 0.7)
        for j in (0, 7, 19):
            k2 = k.copy()
            k2[j] += 1.0
            out = momentum_update(k2, q, 0.7)
            diff = np.flatnonzero(out != base)
            np.testing.assert_array_equal(diff, [j])

    @pytest.mark.parametrize("m", [0.0, 0.5, 0.95, 0.999])
    def test_ema_contraction_rate(self, m):
        rng = np.random.default_rng(1)
        q = rng.standard_normal(64)
        k = rng.standard_normal(64)
        gap0 = np.linalg.norm(k - q)
        for s in (1, 3, 10):
            cur = k.copy()
            for _ in range(s):
                cur = momentum_update(cur, q, m)
            assert np.linalg.norm(cur - q) == pytest.approx(m ** s * gap0, abs=1e-10)


class TestPairConstruction:
    def test_key_equals_query_at_init(self):
        pair = tiny_pair()
        np.testing.assert_array_equal(pair.query_params, pair.key_params)
        np.testing.assert_array_equal(pair.query_buffers, pair.key_buffers)
        assert pair.query_params is not pair.key_params

    def test_seed_determinism(self):
        a = tiny_pair(seed=7)
        b = tiny_pair(seed=7)
        c = tiny_pair(seed=8)
        np.testing.assert_array_equal(a.query_params, b.query_params)
        assert np.any(a.query_params != c.query_params)

    def test_unknown_architecture(self):
        with pytest.raises(ConfigurationError):
            build_encoder_pair("resnet-900", (4,), 8, 2, 0)

    def test_registry_rejects_duplicates(self):
        with pytest.raises(ConfigurationError):
            register_architecture("tiny-mlp", lambda *a: None)


class TestForward:
    def test_unit_rows_eval(self):
        pair = tiny_pair()
        x = np.random.default_rng(2).standard_normal((6, 4))
        z, _ = forward_query(pair, x, train=False)
        np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-6)

    def test_unit_rows_train(self):
        pair = tiny_pair(groups=2)
        x = np.random.default_rng(3).standard_normal((8, 4))
        z, _ = forward_query(pair, x, train=True, update_stats=False)
        np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-6)

    def test_repeated_inputs_identical_rows_eval(self):
        pair = tiny_pair()
        row = np.random.default_rng(4).standard_normal(4)
        x = np.tile(row, (5, 1))
        z, _ = forward_query(pair, x, train=False)
        for i in range(1, 5):
            np.testing.assert_array_equal(z[i], z[0])

    def test_query_key_symmetry_at_init(self):
        pair = tiny_pair(groups=2)
        x = np.random.default_rng(5).standard_normal((4, 4))
        zq, _ = forward_query(pair, x, train=True, update_stats=False)
        zk = forward_key(pair, x, train=True, update_stats=False)
        np.testing.assert_allclose(zq, zk, atol=1e-6)
        ze_q, _ = forward_query(pair, x, train=False)
        ze_k = forward_key(pair, x, train=False)
        np.testing.assert_allclose(ze_q, ze_k, atol=1e-6)

    def test_key_outputs_are_value_semantic(self):
        pair = tiny_pair()
        x = np.random.default_rng(6).standard_normal((4, 4))
        zk = forward_key(pair, x, train=False)
        kept = zk.copy()
        pair.query_params += 1.0  # key outputs were already materialized
        np.testing.assert_array_equal(zk, kept)

    def test_batch_indivisible_in_train_mode(self):
        pair = tiny_pair(groups=2)
        x = np.zeros((5, 4))
        with pytest.raises(ConfigurationError):
            forward_query(pair, x, train=True, update_stats=False)

    def test_eval_mode_any_batch_size(self):
        pair = tiny_pair(groups=2)
        z, _ = forward_query(pair, np.ones((3, 4)), train=False)
        assert z.shape == (3, 5)

    def test_subbatches_of_one(self):
        # B == G: every example is normalized against itself alone, so the
        # normalized activation is exactly zero and the layer emits beta
        from sscl.encoder import GhostNorm

        layer = GhostNorm(3, groups=8)
        rng = np.random.default_rng(7)
        params = np.concatenate([rng.standard_normal(3), rng.standard_normal(3)])
        buf = layer.init_buffers()
        x = rng.standard_normal((8, 3))
        y, _ = layer.forward(params, buf, x, train=True, update_stats=False)
        np.testing.assert_array_equal(y, np.tile(params[3:], (8, 1)))

        # a full forward at the boundary still yields unit rows once the
        # parameters are away from the all-zero-bias init
        pair = tiny_pair(groups=8)
        pair.query_params = pair.query_params + 0.05 * rng.standard_normal(
            pair.query_params.size)
        z, _ = forward_query(pair, rng.standard_normal((8, 4)),
                             train=True, update_stats=False)
        np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-6)

    def test_train_forward_updates_running_stats(self):
        pair = tiny_pair(groups=2)
        before = pair.query_buffers.copy()
        x = np.random.default_rng(8).standard_normal((4, 4)) * 3.0 + 1.0
        forward_query(pair, x, train=True)
        assert np.any(pair.query_buffers != before)
        # and the key side was untouched
        np.testing.assert_array_equal(pair.key_buffers, before)

    def test_eval_forward_leaves_stats_alone(self):
        pair = tiny_pair(groups=2)
        before = pair.query_buffers.copy()
        forward_query(pair, np.ones((4, 4)), train=False)
        np.testing.assert_array_equal(pair.query_buffers, before)

    def test_features_shape_and_purity(self):
        pair = tiny_pair()
        before = pair.query_buffers.copy()
        x = np.random.default_rng(9).standard_normal((3, 4))
        f = forward_features(pair, x)
        assert f.shape == (3, 64)
        np.testing.assert_array_equal(pair.query_buffers, before)
        with pytest.raises(ConfigurationError):
            forward_features(pair, x, side="middle")


class TestGhostSplit:
    def test_256_into_8(self):
        parts = ghost_split(np.arange(256 * 2).reshape(256, 2), 8)
        assert len(parts) == 8
        assert all(p.shape == (32, 2) for p in parts)
        np.testing.assert_array_equal(np.concatenate(parts),
                                      np.arange(256 * 2).reshape(256, 2))

    def test_single_group_is_identity(self):
        x = np.arange(12).reshape(6, 2)
        (p,) = ghost_split(x, 1)
        np.testing.assert_array_equal(p, x)

    def test_indivisible(self):
        with pytest.raises(ConfigurationError):
            ghost_split(np.zeros((7, 2)), 2)

    def test_nonpositive_groups(self):
        with pytest.raises(ConfigurationError):
            ghost_split(np.zeros((4, 2)), 0)


def param_gradient_via_fd(pair, x, direction, train, coords):
    """Finite-difference d/d theta_q of sum(z * direction) on chosen coords."""
    base = pair.query_params

    def f(p):
        trial = EncoderPair(pair.architecture_id, pair.input_shape, pair.embedding_dim,
                            pair.ghost_subbatches, p, pair.key_params,
                            pair.query_buffers.copy(), pair.key_buffers.copy())
        z, _ = forward_query(trial, x, train=train, update_stats=False)
        return float(np.sum(z * direction))

    step = 1e-6
    out = np.zeros(coords.size)
    for n, j in enumerate(coords):
        p_hi = base.copy()
        p_hi[j] += step
        p_lo = base.copy()
        p_lo[j] -= step
        out[n] = (f(p_hi) - f(p_lo)) / (2 * step)
    return out


class TestBackward:
    @pytest.mark.parametrize("train", [False, True])
    def test_tiny_mlp_parameter_gradients(self, train):
        rng = np.random.default_rng(10)
        pair = tiny_pair(seed=3)
        x = rng.standard_normal((4, 4))
        direction = rng.standard_normal((4, 5))
        z, cache = forward_query(pair, x, train=train, update_stats=False)
        grads = backward_query(pair, cache, direction)
        assert grads.shape == pair.query_params.shape

        n = pair.query_params.size
        coords = np.unique(np.concatenate([
            rng.integers(0, n, size=200),
            np.array([0, n // 2, n - 1]),
        ]))
        fd = param_gradient_via_fd(pair, x, direction, train, coords)
        np.testing.assert_allclose(grads[coords], fd, rtol=1e-4, atol=1e-7)

    def test_small_conv_parameter_gradients(self):
        rng = np.random.default_rng(11)
        pair = build_encoder_pair("small-conv", (3, 8, 8), 5, 2, seed=4)
        x = rng.standard_normal((4, 3, 8, 8))
        direction = rng.standard_normal((4, 5))
        z, cache = forward_query(pair, x, train=True, update_stats=False)
        np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-6)
        grads = backward_query(pair, cache, direction)

        n = pair.query_params.size
        coords = np.unique(rng.integers(0, n, size=120))
        fd = param_gradient_via_fd(pair, x, direction, True, coords)
        np.testing.assert_allclose(grads[coords], fd, rtol=1e-4, atol=1e-7)

    def test_stop_gradient_through_key(self):
        # the loss is genuinely sensitive to theta_k, but no analytic
        # gradient for theta_k exists anywhere in the API
        rng = np.random.default_rng(12)
        pair = tiny_pair(seed=5)
        pair.key_params = pair.key_params + 0.01 * rng.standard_normal(pair.key_params.size)
        x = rng.standard_normal((4, 4))
        direction = rng.standard_normal((4, 5))

        def key_side(p):
            trial = EncoderPair(pair.architecture_id, pair.input_shape, pair.embedding_dim,
                                pair.ghost_subbatches, pair.query_params, p,
                                pair.query_buffers.copy(), pair.key_buffers.copy())
            z = forward_key(trial, x, train=False)
            return float(np.sum(z * direction))

        j = 3
        step = 1e-6
        hi = pair.key_params.copy()
        hi[j] += step
        lo = pair.key_params.copy()
        lo[j] -= step
        sensitivity = (key_side(hi) - key_side(lo)) / (2 * step)
        assert abs(sensitivity) > 1e-8  # values do depend on theta_k

        out = forward_key(pair, x, train=False)
        assert isinstance(out, np.ndarray)  # embeddings only, no cache object

    def test_backward_shape_mismatch(self):
        pair = tiny_pair()
        x = np.ones((4, 4))
        _, cache = forward_query(pair, x, train=False)
        with pytest.raises(ShapeError):
            backward_query(pair, cache, np.zeros((4, 6)))


class TestOptimizer:
    def test_cosine_endpoints(self):
        assert cosine_lr(0, 100, 0.03) == pytest.approx(0.03)
        assert cosine_lr(100, 100, 0.03) == 0.0
        assert cosine_lr(50, 100, 0.03) == pytest.approx(0.015)

    def test_cosine_monotone_decreasing(self):
        vals = [cosine_lr(t, 40, 1.0) for t in range(41)]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_cosine_domain(self):
        with pytest.raises(DomainError):
            cosine_lr(-1, 10, 0.1)
        with pytest.raises(ConfigurationError):
            cosine_lr(0, 0, 0.1)

    def test_sgd_momentum_two_steps(self):
        p = np.array([1.0])
        v = np.zeros(1)
        g = np.array([2.0])
        p, v = sgd_momentum_step(p, v, g, lr=0.1, momentum=0.9)
        assert v[0] == 2.0 and p[0] == pytest.approx(0.8)
        p, v = sgd_momentum_step(p, v, g, lr=0.1, momentum=0.9)
        assert v[0] == pytest.approx(3.8)  # 0.9*2 + 2
        assert p[0] == pytest.approx(0.8 - 0.38)

    def test_sgd_shape_check(self):
        with pytest.raises(ShapeError):
            sgd_momentum_step(np.zeros(3), np.zeros(3), np.zeros(2), 0.1)

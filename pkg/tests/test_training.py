import dataclasses
import filecmp
import math

import numpy as np
import pytest

from sscl.core import TrainConfig, UNLABELED
from sscl.data import build_mismatch_split, make_gaussian_manifest, pretrain_policy
from sscl.encoder import EncoderPair, forward_key, forward_query
from sscl.evaluation import embed_examples, knn_accuracy
from sscl.losses import ContrastiveBatchInput, combined_loss, schedule_w
from sscl.memory_queue import snapshot
from sscl.training import (
    init_train_state,
    load_checkpoint,
    pretrain,
    pretrain_step,
    read_metrics_csv,
    save_checkpoint,
    write_metrics_csv,
)


def small_split(seed=0, separation=3.0):
    man, store = make_gaussian_manifest(4, 260, 20, dim=8, separation=separation,
                                        seed=seed)
    return build_mismatch_split(man, (0, 1), (2, 3), 0.5, labeled_per_class=20,
                                val_per_class=20, unlabeled_class_slots=2, seed=seed,
                                loader=store.__getitem__)


def small_config(**overrides):
    base = dict(temperature=0.2, momentum=0.95, queue_size=64, batch_size=16,
                alpha=2.0, t_end=3, total_epochs=6, base_lr=0.05,
                embedding_dim=8, ghost_subbatches=4, seed=0)
    base.update(overrides)
    return TrainConfig(**base).validate()


def vector_policy():
    return pretrain_policy(crop_scale=(0.7, 1.0), flip_prob=0.5,
                           jitter_strength=0.3, grayscale_prob=0.0)


class TestPretrainStep:
    def batch_loss(self, state, batch):
        """Combined loss of a batch as a pure function of the query params.

        Positive embeddings come from the key side and the negatives from the
        queue as both stood when the closure was built; only the anchor branch
        varies with the argument, mirroring what the optimizer step minimizes.
        """
        from sscl.data import augment_pair, example_stream

        cfg = state.config
        views_a, views_p, labels = [], [], []
        for e in batch:
            stream = example_stream(cfg.seed, e.source_id, state.epoch)
            xa, xp = augment_pair(e.input, state.policy, stream)
            views_a.append(xa)
            views_p.append(xp)
            labels.append(e.label)
        anchors_in = np.stack(views_a)
        labels = np.array(labels, dtype=np.int64)
        neg_emb, neg_lab = snapshot(state.queue)
        sets = [np.flatnonzero(neg_lab == l) if l != UNLABELED
                else np.empty(0, dtype=np.int64) for l in labels]
        w = schedule_w(state.epoch, cfg.t_end)

        pair = state.pair
        probe = EncoderPair(pair.architecture_id, pair.input_shape,
                            pair.embedding_dim, pair.ghost_subbatches,
                            pair.query_params.copy(), pair.key_params.copy(),
                            pair.query_buffers.copy(), pair.key_buffers.copy())
        z_p = forward_key(probe, np.stack(views_p), train=True)

        def f(params):
            trial = EncoderPair(pair.architecture_id, pair.input_shape,
                                pair.embedding_dim, pair.ghost_subbatches,
                                params, pair.key_params,
                                pair.query_buffers.copy(), pair.key_buffers.copy())
            z_a, _ = forward_query(trial, anchors_in, train=True, update_stats=False)
            inp = ContrastiveBatchInput(z_a, z_p, neg_emb, neg_lab, labels,
                                        cfg.temperature)
            return combined_loss(inp, sets, cfg.alpha, w)[0]

        return f

    def test_single_step_descends(self):
        split = small_split()
        cfg = small_config(base_lr=1e-3, momentum=0.0)
        state = init_train_state(cfg, split, "tiny-mlp", policy=vector_policy())
        batch = (split.labeled + split.unlabeled)[: cfg.batch_size]
        f = self.batch_loss(state, batch)
        before = f(state.pair.query_params.copy())
        pretrain_step(state, batch)
        after = f(state.pair.query_params.copy())
        assert after < before

    def test_alpha_zero_matches_expired_schedule_bitwise(self):
        split = small_split()
        pol = vector_policy()
        run_a = pretrain(small_config(alpha=0.0, t_end=None, total_epochs=3),
                         split, "tiny-mlp", policy=pol)
        run_b = pretrain(small_config(alpha=2.0, t_end=0, total_epochs=3),
                         split, "tiny-mlp", policy=pol)
        np.testing.assert_array_equal(run_a[0].query_params, run_b[0].query_params)
        np.testing.assert_array_equal(run_a[0].key_params, run_b[0].key_params)

    def test_iteration_counter(self):
        split = small_split()
        cfg = small_config(total_epochs=2, t_end=2)
        _, _, state = pretrain(cfg, split, "tiny-mlp", policy=vector_policy())
        per_epoch = len(split.labeled + split.unlabeled) // cfg.batch_size
        assert state.iteration == 2 * per_epoch
        assert state.epoch == 2


class TestPretrainLoop:
    def test_zero_epochs_returns_init(self):
        split = small_split()
        cfg = small_config(total_epochs=0, t_end=0)
        pair, metrics, state = pretrain(cfg, split, "tiny-mlp", policy=vector_policy())
        fresh = init_train_state(cfg, split, "tiny-mlp")
        np.testing.assert_array_equal(pair.query_params, fresh.pair.query_params)
        assert metrics == []

    def test_bitwise_determinism(self, tmp_path):
        split = small_split()
        pol = vector_policy()
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        a, _, _ = pretrain(small_config(), split, "tiny-mlp", policy=pol,
                           checkpoint_path=p1)
        b, _, _ = pretrain(small_config(), split, "tiny-mlp", policy=pol,
                           checkpoint_path=p2)
        np.testing.assert_array_equal(a.query_params, b.query_params)
        np.testing.assert_array_equal(a.key_params, b.key_params)
        assert filecmp.cmp(p1, p2, shallow=False)  # identical checkpoint bytes

    def test_resume_reproduces_uninterrupted_run(self, tmp_path):
        split = small_split()
        pol = vector_policy()
        straight = tmp_path / "straight.ckpt"
        pair_a, metrics_a, _ = pretrain(small_config(), split, "tiny-mlp", policy=pol,
                                        checkpoint_path=straight, save_every=3)
        resumed = tmp_path / "resumed.ckpt"
        pair_b, metrics_b, _ = pretrain(None, split, "tiny-mlp", policy=pol,
                                        checkpoint_path=resumed,
                                        resume_from=f"{straight}.ep3")
        np.testing.assert_array_equal(pair_a.query_params, pair_b.query_params)
        np.testing.assert_array_equal(pair_a.key_params, pair_b.key_params)
        assert metrics_a == metrics_b
        assert filecmp.cmp(straight, resumed, shallow=False)

    def test_schedule_expiry_continues_as_baseline(self, tmp_path):
        # a run whose schedule ended is, from that epoch on, exactly an
        # alpha=0 run started from the expiry checkpoint
        split = small_split()
        pol = vector_policy()
        ck = tmp_path / "sched.ckpt"
        pair_a, metrics_a, _ = pretrain(small_config(t_end=3, total_epochs=6),
                                        split, "tiny-mlp", policy=pol,
                                        checkpoint_path=ck, save_every=3)
        state = load_checkpoint(f"{ck}.ep3", policy=pol)
        state.config = dataclasses.replace(state.config, alpha=0.0, t_end=None)
        flipped = tmp_path / "flipped.ckpt"
        save_checkpoint(state, flipped)
        pair_b, _, _ = pretrain(None, split, "tiny-mlp", policy=pol,
                                resume_from=flipped)
        np.testing.assert_array_equal(pair_a.query_params, pair_b.query_params)
        for row in metrics_a[3:]:
            assert row["w"] == 0.0

    def test_metric_log_columns(self):
        split = small_split()
        cfg = small_config(total_epochs=4, t_end=2)
        _, metrics, _ = pretrain(cfg, split, "tiny-mlp", policy=vector_policy(),
                                 eval_every=2)
        assert len(metrics) == 4
        for t, row in enumerate(metrics):
            assert row["epoch"] == t
            assert row["w"] == schedule_w(t, 2)
            assert math.isfinite(row["loss_total"])
            assert math.isfinite(row["loss_moco"])
            assert math.isfinite(row["loss_id"])
            assert row["lr"] == pytest.approx(
                cfg.base_lr * 0.5 * (1 + math.cos(math.pi * t / 4)))
        # eval every 2 epochs plus the final epoch
        assert metrics[0]["knn5_val"] is None
        assert metrics[1]["knn5_val"] is not None
        assert metrics[3]["knn5_val"] is not None
        # desk bank is smaller than 200, so the 200-NN cell stays blank
        assert all(row["knn200_val"] is None for row in metrics)

    def test_queue_sees_only_exposed_labels(self):
        split = small_split()
        _, _, state = pretrain(small_config(total_epochs=2, t_end=2), split,
                               "tiny-mlp", policy=vector_policy())
        seen = set(int(v) for v in state.queue.labels)
        allowed = set(split.id_classes) | {UNLABELED}
        assert seen <= allowed
        # out-of-distribution classes never surface even though the audit
        # record knows them
        assert not (seen & set(split.ood_classes))

    def test_training_improves_knn_over_init(self):
        split = small_split()
        cfg = small_config(t_end=12, total_epochs=25)
        pol = vector_policy()
        state0 = init_train_state(cfg, split, "tiny-mlp", policy=pol)
        base = knn_accuracy(embed_examples(state0.pair, split.labeled),
                            embed_examples(state0.pair, split.validation), 5)
        pair, _, _ = pretrain(cfg, split, "tiny-mlp", policy=pol)
        trained = knn_accuracy(embed_examples(pair, split.labeled),
                               embed_examples(pair, split.validation), 5)
        assert trained >= base + 0.05


class TestCheckpointRoundTrip:
    def test_state_survives_save_load(self, tmp_path):
        split = small_split()
        _, _, state = pretrain(small_config(total_epochs=2, t_end=2), split,
                               "tiny-mlp", policy=vector_policy())
        p = tmp_path / "state.ckpt"
        save_checkpoint(state, p)
        back = load_checkpoint(p)
        np.testing.assert_array_equal(back.pair.query_params, state.pair.query_params)
        np.testing.assert_array_equal(back.pair.key_buffers, state.pair.key_buffers)
        np.testing.assert_array_equal(back.velocity, state.velocity)
        np.testing.assert_array_equal(back.queue.embeddings, state.queue.embeddings)
        np.testing.assert_array_equal(back.queue.labels, state.queue.labels)
        assert back.epoch == state.epoch
        assert back.iteration == state.iteration
        assert back.metrics == state.metrics
        assert back.config == state.config
        assert back.policy == state.policy


class TestMetricsCsv:
    def test_round_trip_with_blank_cells(self, tmp_path):
        rows = [
            {"epoch": 0, "loss_total": 3.25, "loss_moco": 3.0, "loss_id": 0.125,
             "w": 1.0, "lr": 0.05, "knn5_val": None, "knn200_val": None},
            {"epoch": 1, "loss_total": 2.5, "loss_moco": 2.25, "loss_id": 0.125,
             "w": 0.5, "lr": 0.025, "knn5_val": 0.8125, "knn200_val": None},
        ]
        p = tmp_path / "metrics.csv"
        write_metrics_csv(rows, p)
        assert read_metrics_csv(p) == rows

    def test_header_line(self, tmp_path):
        p = tmp_path / "m.csv"
        write_metrics_csv([], p)
        assert p.read_text().startswith(
            "epoch,loss_total,loss_moco,loss_id,w,lr,knn5_val,knn200_val\n")

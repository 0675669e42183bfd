import dataclasses
import json
import os
import re

import numpy as np
import pytest

from sscl.cli import main as cli_main
from sscl.core import ConfigurationError, UNLABELED
from sscl.evaluation import read_bank, write_bank
from sscl.harness import (
    OUTPUT_ROOT_ENV,
    apply_overrides,
    experiment_from_mapping,
    export_embeddings,
    format_mean_std,
    load_experiment,
    load_split,
    parse_cell,
    read_config_file,
    resolve_output,
)
from sscl.serialize import read_container, write_container
from sscl.training import load_checkpoint, read_metrics_csv, write_metrics_csv

MEAN_STD_RE = re.compile(r"\d+\.\d{2} \(\d+\.\d{2,3}\)")

CONFIG_TEMPLATE = """\
# desk-scale synthetic experiment
name = desk
output = {out}
seeds = 0 1
architecture = tiny-mlp

data.kind = gaussian
data.classes = 4
data.train_per_class = 60
data.test_per_class = 10
data.dim = 8
data.separation = 3.0
data.seed = 0

split.id_classes = 0 1
split.ood_classes = 2 3
split.mismatch_ratio = 0.5
split.labeled_per_class = 10
split.val_per_class = 10
split.slots = 2
split.seed = 0

train.temperature = 0.2
train.momentum = 0.9
train.queue_size = 32
train.batch_size = 8
train.alpha = 2.0
train.t_end = 2
train.total_epochs = 3
train.base_lr = 0.05
train.embedding_dim = 8
train.ghost_subbatches = 4

eval.ks = 5 200
eval.every = 2
eval.probe = true
eval.finetune = true

augment.crop_min = 0.7
augment.crop_max = 1.0
augment.flip_prob = 0.5
augment.jitter_strength = 0.3
augment.grayscale_prob = 0.0

probe.epochs = 5
probe.base_lr = 0.02
probe.batch_size = 16

finetune.epochs = 2
finetune.base_lr = 0.01
finetune.batch_size = 16

sweep.alphas = 0.5 2
sweep.t_ends = none 2
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One full pipeline run shared by the assertion tests below."""
    root = tmp_path_factory.mktemp("exp")
    out = root / "run"
    cfg = root / "exp.cfg"
    cfg.write_text(CONFIG_TEMPLATE.format(out=out))
    for command in ("prepare-data", "pretrain", "eval-knn", "eval-linear",
                    "finetune"):
        assert cli_main([command, str(cfg)]) == 0, command
    return root, str(cfg), out


class TestConfigParsing:
    def test_comments_and_blanks(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("# header\n\nname = demo  # trailing\nseeds = 3\n")
        assert read_config_file(p) == {"name": "demo", "seeds": "3"}

    def test_missing_equals_rejected(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("name demo\n")
        with pytest.raises(ConfigurationError):
            read_config_file(p)

    def test_overrides_win(self):
        merged = apply_overrides({"train.alpha": "2.0", "name": "a"},
                                 ["--train.alpha=0.25"])
        assert merged["train.alpha"] == "0.25"
        assert merged["name"] == "a"

    def test_bad_override_token(self):
        with pytest.raises(ConfigurationError):
            apply_overrides({}, ["train.alpha=1"])
        with pytest.raises(ConfigurationError):
            apply_overrides({}, ["--no-value"])

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigurationError):
            experiment_from_mapping({"nam = typo": "x"})
        with pytest.raises(ConfigurationError):
            experiment_from_mapping({"train.warmup": "5"})

    def test_empty_seeds_rejected(self):
        with pytest.raises(ConfigurationError):
            experiment_from_mapping({"seeds": ""})
        with pytest.raises(ConfigurationError):
            experiment_from_mapping({"seeds": "1 1"})

    def test_t_end_none_spelling(self):
        spec = experiment_from_mapping({"train.t_end": "none"})
        assert spec.train.t_end is None

    def test_defaults(self):
        spec = experiment_from_mapping({})
        assert spec.seeds == (0, 1, 2, 3, 4)  # five-seed reporting default
        assert spec.eval_ks == (5, 200)
        assert spec.architecture_id == "tiny-mlp"

    def test_output_root_env(self, monkeypatch, tmp_path):
        monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
        assert resolve_output("runs/x") == str(tmp_path / "runs" / "x")
        assert resolve_output("/abs/x") == "/abs/x"

    def test_file_plus_override_end_to_end(self, workspace):
        _, cfg, _ = workspace
        spec = load_experiment(cfg, ["--train.alpha=0.25", "--seeds=7"])
        assert spec.train.alpha == 0.25
        assert spec.seeds == (7,)


class TestMeanStdFormat:
    def test_worked_example(self):
        assert format_mean_std([0.80, 0.81, 0.79, 0.80, 0.80]) == "0.80 (0.007)"

    def test_wider_spread_uses_two_decimals(self):
        assert format_mean_std([0.5, 0.7]) == "0.60 (0.14)"

    def test_single_value(self):
        assert format_mean_std([0.8125]) == "0.81 (0.000)"

    def test_regex_property(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            vals = rng.uniform(0, 1, size=rng.integers(1, 8))
            assert MEAN_STD_RE.fullmatch(format_mean_std(vals))


class TestPipelineArtifacts:
    def test_descriptor_written_and_stable(self, workspace, tmp_path):
        root, cfg, out = workspace
        first = (out / "split.json").read_bytes()
        redo = tmp_path / "redo"
        assert cli_main(["prepare-data", cfg, f"--output={redo}"]) == 0
        assert (redo / "split.json").read_bytes() == first

    def test_checkpoints_and_metrics(self, workspace):
        _, _, out = workspace
        for seed in (0, 1):
            state = load_checkpoint(out / f"seed{seed}" / "checkpoint.ckpt")
            assert state.epoch == 3
            assert state.config.seed == seed
            rows = read_metrics_csv(out / f"seed{seed}" / "metrics.csv")
            assert [r["epoch"] for r in rows] == [0, 1, 2]
            # eval.every = 2: epoch 1 hits the cadence, epoch 2 is final
            assert rows[0]["knn5_val"] is None
            assert rows[1]["knn5_val"] is not None
            assert rows[2]["knn5_val"] is not None

    def test_knn_table(self, workspace):
        _, _, out = workspace
        lines = (out / "knn.csv").read_text().splitlines()
        assert lines[0] == "seed,k,pool,accuracy"
        rows = [l.split(",") for l in lines[1:]]
        assert len(rows) == 8  # 2 seeds x 2 ks x 2 pools
        for seed, k, pool, acc in rows:
            if int(k) == 200:  # bank of 20 rows cannot answer k=200
                assert acc == ""
            else:
                assert 0.0 <= float(acc) <= 1.0

    def test_classifier_tables(self, workspace):
        _, _, out = workspace
        for stem in ("linear", "finetune"):
            lines = (out / f"{stem}.csv").read_text().splitlines()
            assert lines[0] == "seed,pool,accuracy"
            rows = [l.split(",") for l in lines[1:]]
            assert len(rows) == 4  # 2 seeds x 2 pools
            assert all(0.0 <= float(r[2]) <= 1.0 for r in rows)

    def test_zero_epoch_pretrain_gives_valid_checkpoint(self, workspace, tmp_path):
        root, cfg, out = workspace
        zero = tmp_path / "zero"
        code = cli_main(["pretrain", cfg, f"--output={zero}",
                         f"--split.path={out / 'split.json'}",
                         "--train.total_epochs=0", "--train.t_end=none",
                         "--seeds=0"])
        assert code == 0
        state = load_checkpoint(zero / "seed0" / "checkpoint.ckpt")
        assert state.epoch == 0
        assert state.metrics == []

    def test_round_trip_all_artifact_kinds(self, workspace, tmp_path):
        _, cfg, out = workspace
        # split descriptor: parse and re-serialize elsewhere, byte-identical
        spec = load_experiment(cfg)
        from sscl.data import split_descriptor
        text = (out / "split.json").read_text()
        assert split_descriptor(load_split(spec)) == text
        # metric log
        rows = read_metrics_csv(out / "seed0" / "metrics.csv")
        write_metrics_csv(rows, tmp_path / "m.csv")
        assert (tmp_path / "m.csv").read_bytes() == \
            (out / "seed0" / "metrics.csv").read_bytes()
        # checkpoint container
        meta, arrays = read_container(out / "seed0" / "checkpoint.ckpt")
        write_container(tmp_path / "c.ckpt", meta, arrays)
        assert (tmp_path / "c.ckpt").read_bytes() == \
            (out / "seed0" / "checkpoint.ckpt").read_bytes()
        # embedding bank
        export_embeddings(str(out / "seed0" / "checkpoint.ckpt"),
                          load_split(spec), "labeled", str(tmp_path / "b1.txt"))
        write_bank(read_bank(tmp_path / "b1.txt"), tmp_path / "b2.txt")
        assert (tmp_path / "b1.txt").read_bytes() == (tmp_path / "b2.txt").read_bytes()


class TestExport:
    def test_unlabeled_pool_carries_audit_labels(self, workspace, tmp_path):
        _, cfg, out = workspace
        bank_path = tmp_path / "unlabeled.txt"
        assert cli_main(["export-embeddings", cfg, "--pool=unlabeled",
                         f"--out={bank_path}"]) == 0
        bank = read_bank(bank_path)
        assert bank.embeddings.shape == (80, 8)  # 2 slot classes x 40 leftovers
        assert not np.any(bank.labels == UNLABELED)
        # slots: last in-distribution class plus first out-of-distribution class
        assert set(bank.labels.tolist()) == {1, 2}
        norms = np.linalg.norm(bank.embeddings, axis=1)
        assert np.all(np.abs(norms - 1.0) <= 1e-6)

    def test_empty_pool_header_only(self, workspace, tmp_path):
        _, cfg, out = workspace
        spec = load_experiment(cfg)
        split = dataclasses.replace(load_split(spec), test=[])
        path = tmp_path / "empty.txt"
        export_embeddings(str(out / "seed0" / "checkpoint.ckpt"), split,
                          "test", str(path))
        assert path.read_text() == "0 8 1\n"

    def test_unknown_pool_is_usage_error(self, workspace, tmp_path):
        _, cfg, _ = workspace
        code = cli_main(["export-embeddings", cfg, "--pool=everything",
                         f"--out={tmp_path / 'x.txt'}"])
        assert code == 1


class TestSweep:
    def expected_cells(self):
        return [(0.5, None), (0.5, 2), (2.0, None), (2.0, 2), (0.0, None)]

    def test_full_sweep_writes_matrix(self, workspace):
        _, cfg, out = workspace
        assert cli_main(["sweep", cfg]) == 0
        lines = (out / "sweep" / "matrix.csv").read_text().splitlines()
        assert lines[0] == "alpha,t_end=none,t_end=2"
        assert len(lines) == 4  # 2 alpha rows + baseline
        base = lines[3].split(",")
        assert base[0] == "0"
        assert base[1] == base[2]  # no schedule to expire: one value, repeated
        for line in lines[1:]:
            cells = line.split(",")[1:]
            assert all(0.0 <= float(c) <= 1.0 for c in cells)

    def test_cached_cells_make_rerun_identical(self, workspace):
        _, cfg, out = workspace
        matrix = out / "sweep" / "matrix.csv"
        before = matrix.read_bytes()
        assert cli_main(["sweep", cfg]) == 0
        assert matrix.read_bytes() == before

    def test_cellwise_run_in_reverse_order_matches(self, workspace, tmp_path):
        _, cfg, out = workspace
        other = tmp_path / "cellwise"
        args = [f"--output={other}", f"--split.path={out / 'split.json'}"]
        for alpha, t_end in reversed(self.expected_cells()):
            tag = f"{alpha:g}:{'none' if t_end is None else t_end}"
            assert cli_main(["sweep", cfg, f"--cell={tag}"] + args) == 0
        assert (other / "sweep" / "matrix.csv").read_bytes() == \
            (out / "sweep" / "matrix.csv").read_bytes()

    def test_cell_outside_grid_rejected(self, workspace):
        _, cfg, _ = workspace
        spec = load_experiment(cfg)
        with pytest.raises(ConfigurationError):
            parse_cell(spec, "1.5:none")
        with pytest.raises(ConfigurationError):
            parse_cell(spec, "not-a-cell")
        assert parse_cell(spec, "2:2") == (2.0, 2)


class TestReport:
    def test_report_text_and_plots(self, workspace, capsys):
        _, cfg, out = workspace
        assert cli_main(["report", cfg, "--plots"]) == 0
        text = (out / "report.txt").read_text()
        lines = text.splitlines()
        assert lines[0] == "experiment: desk"
        assert lines[1] == "seeds: 2"
        body = lines[2:]
        # knn5 on two pools, linear on two pools, finetune on two pools;
        # the k=200 rows were blank and must not appear
        assert sorted(l.split(":")[0] for l in body) == sorted([
            "knn5 validation", "knn5 test",
            "linear validation", "linear test",
            "finetune validation", "finetune test"])
        for line in body:
            assert MEAN_STD_RE.fullmatch(line.split(": ")[1])
        assert (out / "loss_curve.png").exists()
        assert (out / "knn_curve.png").exists()
        assert "report.txt" in capsys.readouterr().out


class TestCliErrors:
    def test_missing_config(self):
        assert cli_main(["pretrain", "/nonexistent/exp.cfg"]) == 1

    def test_missing_descriptor(self, workspace, tmp_path):
        _, cfg, _ = workspace
        assert cli_main(["eval-knn", cfg,
                         f"--output={tmp_path / 'fresh'}"]) == 1

    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit) as exc:
            cli_main(["frobnicate", "x.cfg"])
        assert exc.value.code != 0

    def test_diagnostic_on_stderr(self, capsys):
        cli_main(["pretrain", "/nonexistent/exp.cfg"])
        assert "error:" in capsys.readouterr().err

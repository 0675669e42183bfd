"""Experiment orchestration: config files, seed fans, sweeps, reports, export.

A run is described by a flat text config (``key = value``, dotted sections)
plus optional ``--key=value`` command-line overrides, flags winning. Every
artifact a command writes (manifest, split descriptor, checkpoint, metric log,
embedding bank) uses a format owned by an inner module, and each derives all
randomness from the config's seeds, so reruns reproduce files byte for byte
and sweep cells stay independent no matter the execution order.

Directory layout under the experiment output directory:

    manifest.tsv, split.json          written by prepare-data
    seed<k>/checkpoint.ckpt           written by pretrain (one per seed)
    seed<k>/metrics.csv
    knn.csv, linear.csv, finetune.csv per-seed evaluation tables
    sweep/a<alpha>_t<t_end>/...       one directory per sweep cell
    sweep/matrix.csv                  alpha x t_end grid of mean accuracies
    report.txt, *.png                 written by report
"""

import dataclasses
import json
import math
import os

import numpy as np

from .core import (
    ConfigurationError,
    DataError,
    DomainError,
    MisuseError,
    TrainConfig,
    UNLABELED,
)
from .data import (
    Manifest,
    build_cross_dataset_split,
    build_mismatch_split,
    make_gaussian_manifest,
    pretrain_policy,
    split_descriptor,
    split_from_descriptor,
)
from .evaluation import (
    DEFAULT_KS,
    EmbeddingBank,
    ProbeConfig,
    classifier_accuracy,
    embed_examples,
    fine_tune,
    knn_accuracy,
    make_bank,
    train_linear_probe,
    write_bank,
)
from .training import load_checkpoint, pretrain, read_metrics_csv, write_metrics_csv

OUTPUT_ROOT_ENV = "SSCL_OUTPUT_ROOT"

POOLS = ("labeled", "unlabeled", "validation", "test")


# ---------------------------------------------------------------------------
# config files


def read_config_file(path):
    """Flat ``key = value`` text, ``#`` comments, dotted section keys."""
    mapping = {}
    try:
        with open(path, encoding="utf-8") as fh:
            for ln, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigurationError(f"{path}:{ln}: expected key = value")
                key, value = line.split("=", 1)
                key = key.strip()
                if not key:
                    raise ConfigurationError(f"{path}:{ln}: empty key")
                mapping[key] = value.strip()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return mapping


def apply_overrides(mapping, overrides):
    """Fold ``--key=value`` tokens into a config mapping; flags win."""
    out = dict(mapping)
    for tok in overrides:
        if not tok.startswith("--") or "=" not in tok:
            raise ConfigurationError(
                f"override {tok!r} does not have the form --key=value")
        key, value = tok[2:].split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigurationError(f"override {tok!r} has an empty key")
        out[key] = value.strip()
    return out


def _parse_bool(key, text):
    low = text.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ConfigurationError(f"{key}: expected a boolean, got {text!r}")


def _parse_ints(key, text):
    try:
        return tuple(int(tok) for tok in text.split())
    except ValueError as exc:
        raise ConfigurationError(f"{key}: expected integers, got {text!r}") from exc


def _parse_floats(key, text):
    try:
        return tuple(float(tok) for tok in text.split())
    except ValueError as exc:
        raise ConfigurationError(f"{key}: expected numbers, got {text!r}") from exc


def _parse_t_end(key, text):
    if text.lower() == "none":
        return None
    try:
        return int(text)
    except ValueError as exc:
        raise ConfigurationError(f"{key}: expected an integer or none, got {text!r}") from exc


def _train_config(mapping):
    kwargs = {}
    # field kind follows the default value; t_end alone admits "none"
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    for key, text in mapping.items():
        if not key.startswith("train."):
            continue
        name = key[len("train."):]
        if name not in fields:
            raise ConfigurationError(f"unknown training key {key!r}")
        try:
            if name == "t_end":
                kwargs[name] = _parse_t_end(key, text)
            elif isinstance(fields[name].default, int):
                kwargs[name] = int(text)
            else:
                kwargs[name] = float(text)
        except ValueError as exc:
            raise ConfigurationError(f"{key}: bad value {text!r}") from exc
    return TrainConfig(**kwargs).validate()


def _probe_config(mapping, prefix, freeze):
    cfg = ProbeConfig(freeze_backbone=freeze)
    for name, parse in (("epochs", int), ("base_lr", float), ("batch_size", int)):
        text = mapping.get(f"{prefix}.{name}")
        if text is not None:
            cfg = dataclasses.replace(cfg, **{name: parse(text)})
    return cfg


def _augment_policy(mapping):
    kwargs = {}
    if "augment.crop_min" in mapping or "augment.crop_max" in mapping:
        kwargs["crop_scale"] = (float(mapping.get("augment.crop_min", 0.2)),
                                float(mapping.get("augment.crop_max", 1.0)))
    for key, name in (("augment.flip_prob", "flip_prob"),
                      ("augment.jitter_strength", "jitter_strength"),
                      ("augment.grayscale_prob", "grayscale_prob")):
        if key in mapping:
            kwargs[name] = float(mapping[key])
    return pretrain_policy(**kwargs)


_KNOWN_TOP = ("name", "architecture", "seeds", "output")
_KNOWN_PREFIXES = ("train.", "data.", "split.", "eval.", "augment.",
                   "probe.", "finetune.", "sweep.")


@dataclasses.dataclass
class ExperimentSpec:
    """Everything one experiment needs: data recipe, split reference, model
    and training configuration, evaluation plan, seed list, output directory."""

    name: str
    output_dir: str
    split_path: str
    train: TrainConfig
    architecture_id: str = "tiny-mlp"
    eval_ks: tuple = DEFAULT_KS
    run_probe: bool = False
    run_finetune: bool = False
    eval_every: int = 0
    seeds: tuple = (0, 1, 2, 3, 4)
    policy: object = None
    probe: ProbeConfig = None
    finetune: ProbeConfig = None
    data: dict = dataclasses.field(default_factory=dict)
    split_params: dict = dataclasses.field(default_factory=dict)
    sweep_alphas: tuple = (0.25, 0.5, 1.0, 2.0, 3.0)
    sweep_t_ends: tuple = (None, 100, 200, 300)

    def validate(self):
        if not self.seeds:
            raise ConfigurationError("seeds list must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigurationError("seeds list has duplicates")
        if not self.eval_ks or any(k < 1 for k in self.eval_ks):
            raise ConfigurationError("eval.ks must be positive integers")
        if self.eval_every < 0:
            raise ConfigurationError("eval.every must be nonnegative")
        return self


def resolve_output(path):
    """Relative output directories live under $SSCL_OUTPUT_ROOT (default .)."""
    root = os.environ.get(OUTPUT_ROOT_ENV, ".")
    return path if os.path.isabs(path) else os.path.join(root, path)


def experiment_from_mapping(mapping):
    for key in mapping:
        if key not in _KNOWN_TOP and not key.startswith(_KNOWN_PREFIXES):
            raise ConfigurationError(f"unknown config key {key!r}")
    name = mapping.get("name", "experiment")
    output_dir = resolve_output(mapping.get("output", name))
    split_path = mapping.get("split.path", "split.json")
    if not os.path.isabs(split_path):
        split_path = os.path.join(output_dir, split_path)
    spec = ExperimentSpec(
        name=name,
        output_dir=output_dir,
        split_path=split_path,
        train=_train_config(mapping),
        architecture_id=mapping.get("architecture", "tiny-mlp"),
        eval_ks=_parse_ints("eval.ks", mapping.get("eval.ks", "5 200")),
        run_probe=_parse_bool("eval.probe", mapping.get("eval.probe", "false")),
        run_finetune=_parse_bool("eval.finetune", mapping.get("eval.finetune", "false")),
        eval_every=int(mapping.get("eval.every", "0")),
        seeds=_parse_ints("seeds", mapping.get("seeds", "0 1 2 3 4")),
        policy=_augment_policy(mapping),
        probe=_probe_config(mapping, "probe", freeze=True),
        finetune=_probe_config(mapping, "finetune", freeze=False),
        data={k[len("data."):]: v for k, v in mapping.items() if k.startswith("data.")},
        split_params={k[len("split."):]: v for k, v in mapping.items()
                      if k.startswith("split.") and k != "split.path"},
    )
    if "sweep.alphas" in mapping:
        spec.sweep_alphas = _parse_floats("sweep.alphas", mapping["sweep.alphas"])
    if "sweep.t_ends" in mapping:
        spec.sweep_t_ends = tuple(_parse_t_end("sweep.t_ends", tok)
                                  for tok in mapping["sweep.t_ends"].split())
    return spec.validate()


def load_experiment(config_path, overrides=()):
    return experiment_from_mapping(apply_overrides(read_config_file(config_path),
                                                   overrides))


# ---------------------------------------------------------------------------
# data plumbing


def _npy_loader(root):
    def load(source_id):
        try:
            return np.load(os.path.join(root, source_id + ".npy"))
        except OSError as exc:
            raise DataError(f"cannot load input {source_id!r}: {exc}") from exc
    return load


def materialize_data(spec):
    """(manifest, loader) for the experiment's data recipe.

    gaussian: clusters regenerated in memory from the recipe seed, so the rest
    of the pipeline never touches the filesystem for inputs.
    manifest: a TSV on disk with one .npy input file per record under data.root.
    cross: two such TSVs; records are concatenated so one descriptor covers both.
    """
    d = spec.data
    kind = d.get("kind", "gaussian")
    if kind == "gaussian":
        manifest, store = make_gaussian_manifest(
            n_classes=int(d.get("classes", "4")),
            train_per_class=int(d.get("train_per_class", "100")),
            test_per_class=int(d.get("test_per_class", "20")),
            dim=int(d.get("dim", "8")),
            separation=float(d.get("separation", "3.0")),
            seed=int(d.get("seed", "0")),
            prefix=d.get("prefix", "synth"))
        return manifest, store.__getitem__
    if kind == "manifest":
        if "manifest" not in d:
            raise ConfigurationError("data.manifest is required when data.kind = manifest")
        return Manifest.from_tsv(d["manifest"]), _npy_loader(d.get("root", "."))
    if kind == "cross":
        for need in ("labeled_manifest", "unlabeled_manifest"):
            if need not in d:
                raise ConfigurationError(f"data.{need} is required when data.kind = cross")
        lab = Manifest.from_tsv(d["labeled_manifest"])
        unl = Manifest.from_tsv(d["unlabeled_manifest"])
        lab_root = d.get("labeled_root", ".")
        unl_root = d.get("unlabeled_root", ".")
        lab_paths = {r[0] for r in lab.records}
        lab_load, unl_load = _npy_loader(lab_root), _npy_loader(unl_root)

        def load(source_id):
            return (lab_load if source_id in lab_paths else unl_load)(source_id)

        return Manifest(lab.records + unl.records), load, lab, unl
    raise ConfigurationError(f"unknown data.kind {kind!r}")


def build_split(spec, manifest, loader, extra=None):
    """Carve a fresh split per the split.* recipe (prepare-data path)."""
    p = spec.split_params
    if spec.data.get("kind") == "cross":
        lab, unl = extra
        return build_cross_dataset_split(
            lab, unl,
            declared_mismatch_ratio=float(p.get("declared_ratio", "0.0")),
            labeled_per_class=int(p["labeled_per_class"]),
            val_per_class=int(p["val_per_class"]),
            seed=int(p.get("seed", "0")),
            labeled_loader=loader, unlabeled_loader=loader)
    for need in ("id_classes", "ood_classes", "mismatch_ratio",
                 "labeled_per_class", "val_per_class", "slots"):
        if need not in p:
            raise ConfigurationError(f"split.{need} is required")
    return build_mismatch_split(
        manifest,
        id_classes=_parse_ints("split.id_classes", p["id_classes"]),
        ood_classes=_parse_ints("split.ood_classes", p["ood_classes"]),
        mismatch_ratio=float(p["mismatch_ratio"]),
        labeled_per_class=int(p["labeled_per_class"]),
        val_per_class=int(p["val_per_class"]),
        unlabeled_class_slots=int(p["slots"]),
        seed=int(p.get("seed", "0")),
        loader=loader)


def load_split(spec):
    """Rebuild the split from its descriptor file (all post-prepare commands)."""
    parts = materialize_data(spec)
    manifest, loader = parts[0], parts[1]
    try:
        with open(spec.split_path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise DataError(
            f"cannot read split descriptor {spec.split_path}; "
            f"run prepare-data first ({exc})") from exc
    return split_from_descriptor(text, manifest, loader=loader)


def seed_dir(spec, seed):
    return os.path.join(spec.output_dir, f"seed{seed}")


def checkpoint_path(spec, seed):
    return os.path.join(seed_dir(spec, seed), "checkpoint.ckpt")


# ---------------------------------------------------------------------------
# subcommand bodies


def cmd_prepare_data(spec):
    os.makedirs(spec.output_dir, exist_ok=True)
    parts = materialize_data(spec)
    manifest, loader = parts[0], parts[1]
    split = build_split(spec, manifest, loader,
                        extra=parts[2:] if len(parts) > 2 else None)
    manifest.to_tsv(os.path.join(spec.output_dir, "manifest.tsv"))
    with open(spec.split_path, "w", encoding="utf-8") as fh:
        fh.write(split_descriptor(split))
    return spec.split_path, split


def cmd_pretrain(spec):
    split = load_split(spec)
    paths = []
    for seed in spec.seeds:
        run_dir = seed_dir(spec, seed)
        os.makedirs(run_dir, exist_ok=True)
        cfg = dataclasses.replace(spec.train, seed=seed).validate()
        ckpt = checkpoint_path(spec, seed)
        _, metrics, _ = pretrain(cfg, split, spec.architecture_id,
                                 policy=spec.policy, eval_every=spec.eval_every,
                                 checkpoint_path=ckpt)
        write_metrics_csv(metrics, os.path.join(run_dir, "metrics.csv"))
        paths.append(ckpt)
    return paths


def _write_rows(path, header, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join("" if v is None else
                              (repr(v) if isinstance(v, float) else str(v))
                              for v in row) + "\n")


def read_rows(path):
    """(header, rows) of a small comma-separated table; no quoting rules."""
    try:
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n").split(",")
            rows = [line.rstrip("\n").split(",") for line in fh if line.strip()]
    except OSError as exc:
        raise DataError(f"cannot read table {path}: {exc}") from exc
    return header, rows


def _load_pair(spec, seed):
    state = load_checkpoint(checkpoint_path(spec, seed))
    return state.pair


def cmd_eval_knn(spec):
    split = load_split(spec)
    rows = []
    for seed in spec.seeds:
        pair = _load_pair(spec, seed)
        bank = embed_examples(pair, split.labeled)
        pools = {"validation": embed_examples(pair, split.validation),
                 "test": embed_examples(pair, split.test)}
        for k in spec.eval_ks:
            for pool_name, queries in pools.items():
                acc = (knn_accuracy(bank, queries, k)
                       if k <= bank.embeddings.shape[0] else None)
                rows.append((seed, k, pool_name, acc))
    out = os.path.join(spec.output_dir, "knn.csv")
    _write_rows(out, ("seed", "k", "pool", "accuracy"), rows)
    return out, rows


def indexed_examples(examples, id_classes):
    """Copies with labels remapped to contiguous 0..C-1 classifier indices."""
    index = {c: i for i, c in enumerate(sorted(id_classes))}
    out = []
    for e in examples:
        if e.label not in index:
            raise DataError(f"label {e.label} outside the in-distribution set")
        out.append(dataclasses.replace(e, label=index[e.label]))
    return out


def _classifier_rows(spec, split, train_fn):
    n_classes = len(split.id_classes)
    train_pool = indexed_examples(split.labeled, split.id_classes)
    eval_pools = {
        "validation": indexed_examples(split.validation, split.id_classes),
        "test": indexed_examples(split.test, split.id_classes),
    }
    rows = []
    for seed in spec.seeds:
        pair = _load_pair(spec, seed)
        scored_pair, clf = train_fn(pair, train_pool, n_classes, seed)
        for pool_name, pool in eval_pools.items():
            rows.append((seed, pool_name,
                         classifier_accuracy(scored_pair, clf, pool)))
    return rows


def cmd_eval_linear(spec):
    split = load_split(spec)

    def train(pair, pool, n_classes, seed):
        clf = train_linear_probe(pair, pool, spec.probe, n_classes, seed=seed)
        return pair, clf

    rows = _classifier_rows(spec, split, train)
    out = os.path.join(spec.output_dir, "linear.csv")
    _write_rows(out, ("seed", "pool", "accuracy"), rows)
    return out, rows


def cmd_finetune(spec):
    split = load_split(spec)

    def train(pair, pool, n_classes, seed):
        return fine_tune(pair, pool, spec.finetune, n_classes, seed=seed)

    rows = _classifier_rows(spec, split, train)
    out = os.path.join(spec.output_dir, "finetune.csv")
    _write_rows(out, ("seed", "pool", "accuracy"), rows)
    return out, rows


def export_embeddings(ckpt_path, split, pool, out_path):
    """Write one pool's embeddings as a bank file with audit labels.

    Unlabeled rows carry their true class from the split's audit record (the
    point of the export is offline analysis), so the file must never feed back
    into training.
    """
    if pool not in POOLS:
        raise MisuseError(f"unknown pool {pool!r}; choose one of {', '.join(POOLS)}")
    state = load_checkpoint(ckpt_path)
    examples = getattr(split, pool)
    if not examples:
        bank = EmbeddingBank(np.zeros((0, state.config.embedding_dim)),
                             np.zeros(0, dtype=np.int64), [])
        write_bank(bank, out_path)
        return out_path
    bank = embed_examples(state.pair, examples)
    labels = np.array([split.audit_label(e.source_id) if e.label == UNLABELED
                       else e.label for e in examples], dtype=np.int64)
    write_bank(make_bank(bank.embeddings, labels, bank.source_ids), out_path)
    return out_path


# ---------------------------------------------------------------------------
# sweeps


def _cell_tag(alpha, t_end):
    return f"a{alpha:g}_t{'none' if t_end is None else t_end}"


def sweep_cells(spec):
    """Grid cells plus the always-present no-aggregation baseline (alpha 0)."""
    cells = [(alpha, t_end) for alpha in spec.sweep_alphas
             for t_end in spec.sweep_t_ends]
    return cells + [(0.0, None)]


def run_sweep_cell(spec, alpha, t_end, split=None):
    """Train and score one (alpha, t_end) cell across every seed.

    Each cell derives everything from the shared split descriptor plus its own
    coordinates, writes only under its own directory, and caches its result,
    so cells can run in any order or in separate processes.
    """
    cell_dir = os.path.join(spec.output_dir, "sweep", _cell_tag(alpha, t_end))
    result_path = os.path.join(cell_dir, "result.json")
    if os.path.exists(result_path):
        with open(result_path, encoding="utf-8") as fh:
            return json.load(fh)
    if split is None:
        split = load_split(spec)
    os.makedirs(cell_dir, exist_ok=True)
    k = spec.eval_ks[0]
    per_seed = {}
    for seed in spec.seeds:
        cfg = dataclasses.replace(spec.train, alpha=alpha, t_end=t_end,
                                  seed=seed).validate()
        pair, _, _ = pretrain(cfg, split, spec.architecture_id, policy=spec.policy,
                              checkpoint_path=os.path.join(cell_dir, f"seed{seed}.ckpt"))
        bank = embed_examples(pair, split.labeled)
        queries = embed_examples(pair, split.validation)
        per_seed[str(seed)] = knn_accuracy(bank, queries, min(k, bank.embeddings.shape[0]))
    result = {"alpha": alpha, "t_end": t_end, "metric": f"knn{k}_val",
              "per_seed": per_seed,
              "mean": sum(per_seed.values()) / len(per_seed)}
    with open(result_path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(result, sort_keys=True, separators=(",", ":")))
    return result


def write_sweep_matrix(spec):
    """Alpha rows by t_end columns of mean accuracy, baseline row last.

    The alpha-0 baseline has no schedule to expire, so its single result is
    repeated across the row to keep the matrix rectangular.
    """
    header = ["alpha"] + ["t_end=" + ("none" if t is None else str(t))
                          for t in spec.sweep_t_ends]
    lines = [",".join(header)]
    for alpha in spec.sweep_alphas:
        cells = [run_sweep_cell(spec, alpha, t_end)["mean"]
                 for t_end in spec.sweep_t_ends]
        lines.append(",".join([f"{alpha:g}"] + [repr(c) for c in cells]))
    base = run_sweep_cell(spec, 0.0, None)["mean"]
    lines.append(",".join(["0"] + [repr(base)] * len(spec.sweep_t_ends)))
    out = os.path.join(spec.output_dir, "sweep", "matrix.csv")
    with open(out, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return out


def parse_cell(spec, text):
    """--cell ALPHA:T_END, matched against the declared grid."""
    try:
        alpha_text, t_text = text.split(":", 1)
        alpha = float(alpha_text)
        t_end = None if t_text.lower() == "none" else int(t_text)
    except ValueError as exc:
        raise ConfigurationError(f"cell {text!r} is not ALPHA:T_END") from exc
    if (alpha, t_end) not in sweep_cells(spec):
        raise ConfigurationError(f"cell {text!r} is not in the sweep grid")
    return alpha, t_end


def cmd_sweep(spec, only_cells=None):
    split = load_split(spec)
    if only_cells:
        for alpha, t_end in only_cells:
            run_sweep_cell(spec, alpha, t_end, split=split)
        done = all(os.path.exists(os.path.join(
            spec.output_dir, "sweep", _cell_tag(a, t), "result.json"))
            for a, t in sweep_cells(spec))
        return write_sweep_matrix(spec) if done else None
    for alpha, t_end in sweep_cells(spec):
        run_sweep_cell(spec, alpha, t_end, split=split)
    return write_sweep_matrix(spec)


# ---------------------------------------------------------------------------
# reporting


def format_mean_std(values):
    """Mean to two decimals, sample stddev in parentheses.

    The stddev keeps three decimals when it would otherwise vanish at two,
    e.g. five runs at {0.80, 0.81, 0.79, 0.80, 0.80} give "0.80 (0.007)".
    """
    vals = [float(v) for v in values]
    if not vals:
        raise DomainError("no values to aggregate")
    mean = sum(vals) / len(vals)
    if len(vals) > 1:
        std = math.sqrt(sum((v - mean) ** 2 for v in vals) / (len(vals) - 1))
    else:
        std = 0.0
    std_text = f"{std:.3f}" if std < 0.01 else f"{std:.2f}"
    return f"{mean:.2f} ({std_text})"


def _aggregate_table(path, key_cols, value_col):
    """{key tuple: [per-seed values]} from one evaluation CSV, blanks skipped."""
    header, rows = read_rows(path)
    idx = {name: header.index(name) for name in key_cols + (value_col,)}
    grouped = {}
    for row in rows:
        text = row[idx[value_col]]
        if not text:
            continue
        key = tuple(row[idx[c]] for c in key_cols)
        grouped.setdefault(key, []).append(float(text))
    return grouped


def cmd_report(spec, plots=False):
    lines = [f"experiment: {spec.name}", f"seeds: {len(spec.seeds)}"]
    knn_path = os.path.join(spec.output_dir, "knn.csv")
    if os.path.exists(knn_path):
        for (k, pool), vals in sorted(_aggregate_table(
                knn_path, ("k", "pool"), "accuracy").items(),
                key=lambda kv: (int(kv[0][0]), kv[0][1])):
            lines.append(f"knn{k} {pool}: {format_mean_std(vals)}")
    for stem in ("linear", "finetune"):
        path = os.path.join(spec.output_dir, f"{stem}.csv")
        if os.path.exists(path):
            for (pool,), vals in sorted(_aggregate_table(
                    path, ("pool",), "accuracy").items()):
                lines.append(f"{stem} {pool}: {format_mean_std(vals)}")
    text = "\n".join(lines) + "\n"
    out = os.path.join(spec.output_dir, "report.txt")
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(text)
    written = [out]
    if plots:
        written.extend(write_plots(spec))
    return out, text, written


def write_plots(spec):
    """Static loss and accuracy curves from the per-seed metric logs."""
    try:
        import matplotlib
    except ImportError as exc:
        raise ConfigurationError(
            "plot output needs matplotlib (pip install sscl[plots])") from exc
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    per_seed = {}
    for seed in spec.seeds:
        path = os.path.join(seed_dir(spec, seed), "metrics.csv")
        if os.path.exists(path):
            per_seed[seed] = read_metrics_csv(path)
    if not per_seed:
        raise DataError("no metrics.csv files to plot; run pretrain first")

    written = []
    fig, ax = plt.subplots(figsize=(6, 4))
    for seed, rows in per_seed.items():
        ax.plot([r["epoch"] for r in rows], [r["loss_total"] for r in rows],
                label=f"seed {seed}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    ax.legend()
    loss_png = os.path.join(spec.output_dir, "loss_curve.png")
    fig.savefig(loss_png, dpi=120, bbox_inches="tight")
    plt.close(fig)
    written.append(loss_png)

    k = spec.eval_ks[0]
    fig, ax = plt.subplots(figsize=(6, 4))
    any_points = False
    for seed, rows in per_seed.items():
        pts = [(r["epoch"], r[f"knn{k}_val"]) for r in rows
               if r.get(f"knn{k}_val") is not None]
        if pts:
            any_points = True
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o",
                    label=f"seed {seed}")
    if any_points:
        ax.set_xlabel("epoch")
        ax.set_ylabel(f"{k}-NN validation accuracy")
        ax.legend()
        knn_png = os.path.join(spec.output_dir, "knn_curve.png")
        fig.savefig(knn_png, dpi=120, bbox_inches="tight")
        written.append(knn_png)
    plt.close(fig)
    return written

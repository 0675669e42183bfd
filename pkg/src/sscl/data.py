"""Dataset manifests, mismatch-split construction, and augmentation.

A manifest is a plain text index, one record per line:

    path<TAB>class_index<TAB>split_tag

so the split builders never touch pixels; an optional loader callable maps
paths to arrays when a split should carry materialized inputs.

The single-dataset mismatch builder works in class slots. The unlabeled pool
occupies U slots; a mismatch ratio r assigns r*U slots to out-of-distribution
classes taken from the FRONT of the OOD ordering and (1-r)*U slots to
in-distribution classes taken from the END of the ID ordering. Every class is
carved the same way (labeled quota, then validation quota, then remainder),
and only the remainder of a slot class enters the unlabeled pool. True labels
of unlabeled items ride along for audit but the exposed label is always
UNLABELED; nothing in the training path reads the audit value.

Augmentation draws every stochastic parameter for both views up front from
one per-example generator, so the draw count per view is fixed and the pair
is reproducible from (seed, source_id, epoch) alone regardless of which ops
end up active.
"""

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    ConfigurationError,
    DataError,
    LabeledExample,
    MisuseError,
    UNLABELED,
)


# ---------------------------------------------------------------------------
# manifests


@dataclass
class Manifest:
    """Ordered list of (path, class_index, split_tag) records."""

    records: list

    @classmethod
    def from_tsv(cls, path):
        records = []
        try:
            with open(path, encoding="utf-8") as fh:
                for ln, line in enumerate(fh, 1):
                    line = line.rstrip("\n")
                    if not line:
                        continue
                    parts = line.split("\t")
                    if len(parts) != 3:
                        raise DataError(f"{path}:{ln}: expected 3 tab-separated fields")
                    records.append((parts[0], int(parts[1]), parts[2]))
        except OSError as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc
        return cls(records)

    def to_tsv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(f"{rec[0]}\t{rec[1]}\t{rec[2]}\n")

    def classes(self):
        return sorted({c for _, c, _ in self.records})

    def records_for(self, class_index, split_tag):
        return [r for r in self.records if r[1] == class_index and r[2] == split_tag]


def make_gaussian_manifest(n_classes, train_per_class, test_per_class, dim,
                           separation, seed, prefix="synth"):
    """Isotropic unit-variance Gaussian clusters around random directions.

    Returns (manifest, store) where store maps path -> float64 vector. Class
    centers sit at `separation` times random unit vectors, so inter-class
    distance is controlled by one number.
    """
    if n_classes < 1 or train_per_class < 1 or dim < 1:
        raise ConfigurationError("n_classes, train_per_class, and dim must be positive")
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 0x6A05]))
    centers = rng.standard_normal((n_classes, dim))
    centers *= separation / np.linalg.norm(centers, axis=1, keepdims=True)
    records = []
    store = {}
    for c in range(n_classes):
        for tag, count in (("train", train_per_class), ("test", test_per_class)):
            draws = centers[c] + rng.standard_normal((count, dim))
            for i in range(count):
                path = f"{prefix}/{c:02d}/{tag}/{i:05d}"
                records.append((path, c, tag))
                store[path] = draws[i]
    return Manifest(records), store


# ---------------------------------------------------------------------------
# splits


@dataclass
class DatasetSplit:
    labeled: list
    unlabeled: list
    validation: list
    test: list
    id_classes: tuple
    ood_classes: tuple
    mismatch_ratio: float
    audit: dict = field(default_factory=dict, repr=False)

    def audit_label(self, source_id):
        """True class of an unlabeled item. Evaluation and reporting only;
        the training path sees UNLABELED and never calls this."""
        return self.audit[source_id]


def _carve_class(manifest, class_index, labeled_n, val_n, seed):
    recs = manifest.records_for(class_index, "train")
    if len(recs) < labeled_n + val_n:
        raise DataError(
            f"class {class_index}: {len(recs)} train samples, "
            f"need at least {labeled_n + val_n}")
    rng = np.random.default_rng(
        np.random.SeedSequence([seed & 0xFFFFFFFF, 0xDA7A, class_index]))
    order = rng.permutation(len(recs))
    lab = [recs[i] for i in order[:labeled_n]]
    val = [recs[i] for i in order[labeled_n : labeled_n + val_n]]
    rest = [recs[i] for i in order[labeled_n + val_n :]]
    return lab, val, rest


def _materialize(records, label, loader):
    out = []
    for path, _, _ in records:
        x = loader(path) if loader is not None else path
        out.append(LabeledExample(input=x, label=label, source_id=path))
    return out


def build_mismatch_split(manifest, id_classes, ood_classes, mismatch_ratio,
                         labeled_per_class, val_per_class, unlabeled_class_slots,
                         seed, loader=None):
    """Construct a class-slot mismatch split.

    id_classes and ood_classes are ORDERED; the order decides which classes
    fill the unlabeled slots: the last (1-r)*U in-distribution classes and
    the first r*U out-of-distribution classes.
    """
    id_classes = tuple(id_classes)
    ood_classes = tuple(ood_classes)
    if set(id_classes) & set(ood_classes):
        raise ConfigurationError("id and ood class sets overlap")
    if not 0.0 <= mismatch_ratio <= 1.0:
        raise ConfigurationError(f"mismatch ratio must lie in [0,1], got {mismatch_ratio}")
    u = unlabeled_class_slots
    if u < 1:
        raise ConfigurationError("unlabeled_class_slots must be positive")
    ood_slots_f = mismatch_ratio * u
    ood_slots = round(ood_slots_f)
    if abs(ood_slots_f - ood_slots) > 1e-9:
        raise ConfigurationError(
            f"mismatch ratio {mismatch_ratio} times {u} slots is not an integer")
    id_slots = u - ood_slots
    if id_slots > len(id_classes):
        raise ConfigurationError(
            f"need {id_slots} in-distribution slot classes, have {len(id_classes)}")
    if ood_slots > len(ood_classes):
        raise ConfigurationError(
            f"need {ood_slots} out-of-distribution slot classes, have {len(ood_classes)}")

    slot_classes = list(id_classes[len(id_classes) - id_slots :]) + list(ood_classes[:ood_slots])

    labeled, validation, test, unlabeled = [], [], [], []
    audit = {}
    for c in id_classes:
        lab, val, rest = _carve_class(manifest, c, labeled_per_class, val_per_class, seed)
        labeled.extend(_materialize(lab, c, loader))
        validation.extend(_materialize(val, c, loader))
        test.extend(_materialize(manifest.records_for(c, "test"), c, loader))
        if c in slot_classes:
            if not rest:
                raise DataError(f"class {c} has no samples left for the unlabeled pool")
            unlabeled.extend(_materialize(rest, UNLABELED, loader))
            audit.update({p: c for p, _, _ in rest})
    for c in ood_classes:
        if c not in slot_classes:
            continue
        _, _, rest = _carve_class(manifest, c, labeled_per_class, val_per_class, seed)
        if not rest:
            raise DataError(f"class {c} has no samples left for the unlabeled pool")
        unlabeled.extend(_materialize(rest, UNLABELED, loader))
        audit.update({p: c for p, _, _ in rest})

    return DatasetSplit(labeled=labeled, unlabeled=unlabeled, validation=validation,
                        test=test, id_classes=id_classes, ood_classes=ood_classes,
                        mismatch_ratio=ood_slots / u, audit=audit)


def build_cross_dataset_split(labeled_manifest, unlabeled_manifest,
                              declared_mismatch_ratio, labeled_per_class,
                              val_per_class, seed, labeled_loader=None,
                              unlabeled_loader=None):
    """Cross-dataset mode: one manifest supplies the labeled/validation/test
    pools, the other's entire train portion becomes the unlabeled pool.

    No slot arithmetic applies; the mismatch ratio is recorded as declared
    because class correspondence across datasets is not computable from the
    manifests. Audit labels of unlabeled items live in the unlabeled
    manifest's own class namespace.
    """
    if not 0.0 <= declared_mismatch_ratio <= 1.0:
        raise ConfigurationError(
            f"declared mismatch ratio must lie in [0,1], got {declared_mismatch_ratio}")
    id_classes = tuple(labeled_manifest.classes())
    labeled, validation, test = [], [], []
    for c in id_classes:
        lab, val, _ = _carve_class(labeled_manifest, c, labeled_per_class,
                                   val_per_class, seed)
        labeled.extend(_materialize(lab, c, labeled_loader))
        validation.extend(_materialize(val, c, labeled_loader))
        test.extend(_materialize(labeled_manifest.records_for(c, "test"), c, labeled_loader))
    train_recs = [r for r in unlabeled_manifest.records if r[2] == "train"]
    if not train_recs:
        raise DataError("unlabeled manifest has no train records")
    unlabeled = _materialize(train_recs, UNLABELED, unlabeled_loader)
    audit = {p: c for p, c, _ in train_recs}
    return DatasetSplit(labeled=labeled, unlabeled=unlabeled, validation=validation,
                        test=test, id_classes=id_classes,
                        ood_classes=tuple(unlabeled_manifest.classes()),
                        mismatch_ratio=declared_mismatch_ratio, audit=audit)


# ---------------------------------------------------------------------------
# split descriptors (re-materialization contract)


def split_descriptor(split):
    """Canonical JSON text from which the split can be rebuilt bit-exactly."""
    doc = {
        "id_classes": list(split.id_classes),
        "ood_classes": list(split.ood_classes),
        "mismatch_ratio": split.mismatch_ratio,
        "labeled": [e.source_id for e in split.labeled],
        "unlabeled": [e.source_id for e in split.unlabeled],
        "validation": [e.source_id for e in split.validation],
        "test": [e.source_id for e in split.test],
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def split_from_descriptor(descriptor_text, manifest, loader=None):
    try:
        doc = json.loads(descriptor_text)
    except json.JSONDecodeError as exc:
        raise DataError(f"unreadable split descriptor: {exc}") from exc
    by_path = {p: (p, c, t) for p, c, t in manifest.records}

    def fetch(ids, exposed=None):
        out = []
        for sid in ids:
            if sid not in by_path:
                raise DataError(f"descriptor references unknown source id {sid!r}")
            _, c, _ = by_path[sid]
            label = exposed if exposed is not None else c
            x = loader(sid) if loader is not None else sid
            out.append(LabeledExample(input=x, label=label, source_id=sid))
        return out

    audit = {sid: by_path[sid][1] for sid in doc["unlabeled"] if sid in by_path}
    return DatasetSplit(
        labeled=fetch(doc["labeled"]),
        unlabeled=fetch(doc["unlabeled"], exposed=UNLABELED),
        validation=fetch(doc["validation"]),
        test=fetch(doc["test"]),
        id_classes=tuple(doc["id_classes"]),
        ood_classes=tuple(doc["ood_classes"]),
        mismatch_ratio=doc["mismatch_ratio"],
        audit=audit,
    )


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentationPolicy:
    """Named parameter set for the input pipelines.

    contrastive-pretrain: crop + flip + jitter + grayscale (two-view)
    probe-finetune:       crop + flip only
    none:                 identity
    """

    name: str
    crop_scale: tuple = (0.2, 1.0)
    flip_prob: float = 0.5
    jitter_strength: float = 0.4
    grayscale_prob: float = 0.2

    def __post_init__(self):
        if self.name not in ("contrastive-pretrain", "probe-finetune", "none"):
            raise ConfigurationError(f"unknown policy name {self.name!r}")
        lo, hi = self.crop_scale
        if not (0.0 < lo <= hi <= 1.0):
            raise ConfigurationError(f"bad crop scale range {self.crop_scale}")
        if self.name == "probe-finetune" and (self.jitter_strength or self.grayscale_prob):
            raise ConfigurationError(
                "probe-finetune policy carries only crop and flip")
        if self.name == "none" and (self.crop_scale != (1.0, 1.0) or self.flip_prob
                                    or self.jitter_strength or self.grayscale_prob):
            raise ConfigurationError("the identity policy must have identity parameters")


def pretrain_policy(**overrides):
    return AugmentationPolicy(name="contrastive-pretrain", **overrides)


def probe_policy(crop_scale=(0.8, 1.0), flip_prob=0.5):
    return AugmentationPolicy(name="probe-finetune", crop_scale=crop_scale,
                              flip_prob=flip_prob, jitter_strength=0.0,
                              grayscale_prob=0.0)


def identity_policy():
    return AugmentationPolicy(name="none", crop_scale=(1.0, 1.0), flip_prob=0.0,
                              jitter_strength=0.0, grayscale_prob=0.0)


def example_stream(seed, source_id, epoch):
    """Per-example generator for one epoch. Worker-count independent: the
    stream depends only on (seed, source_id, epoch)."""
    tag = int.from_bytes(hashlib.blake2s(str(source_id).encode(), digest_size=4).digest(),
                         "big")
    return np.random.default_rng(
        np.random.SeedSequence([seed & 0xFFFFFFFF, 0xA06, tag, epoch]))


def _bilinear_resize(img, out_h, out_w):
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[None, :, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return top * (1 - fy) + bot * fy


def _draw_view_params(policy, rng, is_image, dim):
    # every parameter is drawn unconditionally so stream positions are fixed
    p = {
        "scale": rng.uniform(policy.crop_scale[0], policy.crop_scale[1]),
        "log_aspect": rng.uniform(math.log(3 / 4), math.log(4 / 3)),
        "u_y": rng.uniform(),
        "u_x": rng.uniform(),
        "flip": rng.uniform() < policy.flip_prob,
        "jitter": rng.uniform(1 - policy.jitter_strength, 1 + policy.jitter_strength,
                              size=3),
        "gray": rng.uniform() < policy.grayscale_prob,
    }
    if not is_image:
        p["mask_perm"] = rng.permutation(dim)
        p["noise"] = rng.standard_normal(dim)
    return p


def _apply_image(x, policy, p):
    c, h, w = x.shape
    out = x
    if policy.crop_scale != (1.0, 1.0):
        area = p["scale"] * h * w
        aspect = math.exp(p["log_aspect"])
        ch = min(h, max(1, round(math.sqrt(area / aspect))))
        cw = min(w, max(1, round(math.sqrt(area * aspect))))
        y0 = int(p["u_y"] * (h - ch + 1))
        x0 = int(p["u_x"] * (w - cw + 1))
        out = _bilinear_resize(out[:, y0 : y0 + ch, x0 : x0 + cw], h, w)
    if p["flip"]:
        out = out[:, :, ::-1]
    bf, cf, sf = p["jitter"]
    if bf != 1.0:
        out = out * bf
    if cf != 1.0:
        m = out.mean()
        out = (out - m) * cf + m
    if sf != 1.0 and c == 3:
        g = 0.299 * out[0] + 0.587 * out[1] + 0.114 * out[2]
        out = (out - g) * sf + g
    if p["gray"] and c == 3:
        g = 0.299 * out[0] + 0.587 * out[1] + 0.114 * out[2]
        out = np.stack([g, g, g])
    return np.ascontiguousarray(out)


def _apply_vector(x, policy, p):
    d = x.shape[0]
    out = x
    if policy.crop_scale != (1.0, 1.0):
        # coordinate subsampling stands in for cropping: keep a random
        # fraction of coordinates, rescale to preserve magnitude
        keep = max(1, math.ceil(p["scale"] * d))
        mask = np.zeros(d)
        mask[p["mask_perm"][:keep]] = 1.0
        out = out * mask * (d / keep)
    if p["flip"]:
        out = out[::-1]
    bf = p["jitter"][0]
    if bf != 1.0:
        out = out * bf
    if policy.jitter_strength:
        out = out + 0.1 * policy.jitter_strength * p["noise"]
    # grayscale has no flat-vector analogue; the drawn coin is ignored
    return np.ascontiguousarray(out)


def augment_pair(x, policy, rng_stream):
    """Two independent stochastic views of one input.

    Defined only for the contrastive-pretrain policy; single-view pipelines
    go through augment_single. Both views draw from the given stream at fixed
    positions, so recreating the stream recreates the pair.
    """
    if policy.name != "contrastive-pretrain":
        raise MisuseError(
            f"two-view augmentation is a pretraining operation, got policy {policy.name!r}")
    x = np.asarray(x, dtype=np.float64)
    views = []
    for _ in range(2):
        if x.ndim == 3:
            p = _draw_view_params(policy, rng_stream, True, 0)
            views.append(_apply_image(x, policy, p))
        elif x.ndim == 1:
            p = _draw_view_params(policy, rng_stream, False, x.shape[0])
            views.append(_apply_vector(x, policy, p))
        else:
            raise MisuseError(f"augmentation expects 1-D vectors or (C,H,W) images, got {x.ndim}-D")
    return views[0], views[1]


def augment_single(x, policy, rng_stream):
    """One stochastic view under a single-view policy (or the identity)."""
    if policy.name == "none":
        return np.asarray(x, dtype=np.float64)
    if policy.name != "probe-finetune":
        raise MisuseError("single-view augmentation expects probe-finetune or none")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        p = _draw_view_params(policy, rng_stream, True, 0)
        return _apply_image(x, policy, p)
    if x.ndim == 1:
        p = _draw_view_params(policy, rng_stream, False, x.shape[0])
        return _apply_vector(x, policy, p)
    raise MisuseError(f"augmentation expects 1-D vectors or (C,H,W) images, got {x.ndim}-D")


def resize_inputs(arrays_by_id, target_size):
    """Bilinearly resize every (C,H,W) image in a store to target_size.

    target_size is an int (square) or (H, W). Images already at the target
    pass through unchanged (same object).
    """
    if isinstance(target_size, int):
        target = (target_size, target_size)
    else:
        target = tuple(target_size)
    out = {}
    for sid, arr in arrays_by_id.items():
        a = np.asarray(arr)
        if a.ndim != 3:
            raise MisuseError(
                f"{sid}: resize needs (C,H,W) images, got {a.ndim}-D input")
        out[sid] = arr if a.shape[1:] == target else _bilinear_resize(
            a.astype(np.float64), target[0], target[1])
    return out


def inputs_matrix(examples):
    """Stack example inputs into one float64 array (B, ...)."""
    if not examples:
        raise DataError("no examples to stack")
    return np.stack([np.asarray(e.input, dtype=np.float64) for e in examples])

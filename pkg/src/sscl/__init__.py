"""Semi-supervised contrastive learning with a label-augmented memory queue.

The package trains a momentum-encoder pair by instance discrimination and
adds a scheduled aggregation term that pulls same-class queue entries
toward labeled anchors. Everything runs on NumPy in float64 and every
training run is bitwise reproducible, including resume from checkpoints.

Module layout:

- ``core``: shared types, errors, the training configuration
- ``losses``: instance loss, aggregation loss, coefficient schedule
- ``memory_queue``: fixed-size FIFO of keys with their exposed labels
- ``encoder``: small NumPy networks with hand-written backprop
- ``data``: manifests, mismatch splits, augmentation policies
- ``evaluation``: embedding banks, weighted k-NN, probes, fine-tuning
- ``training``: the pre-training loop, checkpoints, metric logs
- ``serialize``: the array container used by checkpoints and banks
- ``harness``: experiment configs, artifact layout, sweeps, reports
- ``cli``: the ``sscl`` command built on the harness
"""

from .core import (
    CapacityError,
    ConfigurationError,
    ConsistencyError,
    DataError,
    DegenerateInputError,
    DomainError,
    LabeledExample,
    MisuseError,
    NormalizationError,
    ShapeError,
    SsclError,
    TrainConfig,
    UNLABELED,
    check_unit_rows,
    l2_normalize,
    similarity,
)
from .losses import (
    ContrastiveBatchInput,
    combined_loss,
    id_loss,
    moco_loss,
    schedule_w,
)
from .memory_queue import (
    MemoryQueue,
    enqueue_batch,
    init_queue,
    positives_of,
    snapshot,
)
from .encoder import (
    EncoderPair,
    build_encoder_pair,
    cosine_lr,
    forward_features,
    forward_key,
    forward_query,
    momentum_update,
    register_architecture,
    sgd_momentum_step,
)
from .data import (
    AugmentationPolicy,
    DatasetSplit,
    Manifest,
    augment_pair,
    build_cross_dataset_split,
    build_mismatch_split,
    identity_policy,
    make_gaussian_manifest,
    pretrain_policy,
    probe_policy,
    split_descriptor,
    split_from_descriptor,
)
from .evaluation import (
    DEFAULT_KS,
    EmbeddingBank,
    KNN_TAU,
    LinearClassifier,
    ProbeConfig,
    class_cohesion,
    classifier_accuracy,
    embed_examples,
    fine_tune,
    knn_accuracy,
    knn_classify,
    make_bank,
    read_bank,
    train_linear_probe,
    write_bank,
)
from .training import (
    METRIC_COLUMNS,
    TrainState,
    init_train_state,
    load_checkpoint,
    pretrain,
    pretrain_step,
    read_metrics_csv,
    save_checkpoint,
    write_metrics_csv,
)
from .serialize import read_container, write_container
from .harness import ExperimentSpec, export_embeddings, load_experiment

__version__ = "0.1.0"

__all__ = [
    "AugmentationPolicy",
    "CapacityError",
    "ConfigurationError",
    "ConsistencyError",
    "ContrastiveBatchInput",
    "DEFAULT_KS",
    "DataError",
    "DatasetSplit",
    "DegenerateInputError",
    "DomainError",
    "EmbeddingBank",
    "EncoderPair",
    "ExperimentSpec",
    "KNN_TAU",
    "LabeledExample",
    "LinearClassifier",
    "METRIC_COLUMNS",
    "Manifest",
    "MemoryQueue",
    "MisuseError",
    "NormalizationError",
    "ProbeConfig",
    "ShapeError",
    "SsclError",
    "TrainConfig",
    "TrainState",
    "UNLABELED",
    "augment_pair",
    "build_cross_dataset_split",
    "build_encoder_pair",
    "build_mismatch_split",
    "check_unit_rows",
    "class_cohesion",
    "classifier_accuracy",
    "combined_loss",
    "cosine_lr",
    "embed_examples",
    "enqueue_batch",
    "export_embeddings",
    "fine_tune",
    "forward_features",
    "forward_key",
    "forward_query",
    "id_loss",
    "identity_policy",
    "init_queue",
    "init_train_state",
    "knn_accuracy",
    "knn_classify",
    "l2_normalize",
    "load_checkpoint",
    "load_experiment",
    "make_bank",
    "make_gaussian_manifest",
    "moco_loss",
    "momentum_update",
    "positives_of",
    "pretrain",
    "pretrain_policy",
    "pretrain_step",
    "probe_policy",
    "read_bank",
    "read_container",
    "read_metrics_csv",
    "register_architecture",
    "save_checkpoint",
    "schedule_w",
    "sgd_momentum_step",
    "similarity",
    "snapshot",
    "split_descriptor",
    "split_from_descriptor",
    "train_linear_probe",
    "write_bank",
    "write_container",
    "write_metrics_csv",
]

"""Continual test-time adaptation with a frozen source anchor.

The package wires together a small reverse-mode autodiff engine, a
batch-norm MLP whose affine parameters form the adaptation partition,
the anchoring/alignment objective, baseline policies, a synthetic
corruption-stream generator, and a protocol harness with a CLI.
"""

from .adapters import SourceBundle, TTAClassifier, build_source_bundle, train_source_model
from .autodiff import Tensor, backward, zero_grads
from .config import RunConfig, load_config_file, make_config
from .harness import RunReport, emit_report, run_protocol, run_sweep
from .losses import (
    ViewBatch,
    augment,
    build_view_batch,
    contrastive_loss,
    cross_entropy,
    entropy_loss,
    pseudo_label,
    sata_loss,
    source_anchor_loss,
    target_alignment_loss,
)
from .nn import BatchNorm, Linear, Model
from .optim import Adam, SGD, make_optimizer
from .prototypes import PrototypeBank, assign_prototype_view, compute_prototypes
from .stream import (
    CORRUPTION_BASES,
    CORRUPTION_KINDS,
    SourceData,
    SourceTask,
    StreamSchedule,
    build_schedule,
    corrupt,
    export_stream,
    generate_source,
    iter_stream,
)

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "BatchNorm",
    "CORRUPTION_BASES",
    "CORRUPTION_KINDS",
    "Linear",
    "Model",
    "PrototypeBank",
    "RunConfig",
    "RunReport",
    "SGD",
    "SourceBundle",
    "SourceData",
    "SourceTask",
    "StreamSchedule",
    "TTAClassifier",
    "Tensor",
    "ViewBatch",
    "assign_prototype_view",
    "augment",
    "backward",
    "build_schedule",
    "build_source_bundle",
    "build_view_batch",
    "compute_prototypes",
    "contrastive_loss",
    "corrupt",
    "cross_entropy",
    "emit_report",
    "entropy_loss",
    "export_stream",
    "generate_source",
    "iter_stream",
    "load_config_file",
    "make_config",
    "make_optimizer",
    "pseudo_label",
    "run_protocol",
    "run_sweep",
    "sata_loss",
    "source_anchor_loss",
    "target_alignment_loss",
    "train_source_model",
    "zero_grads",
]

"""Quadratic-interaction classification heads on a minimal autodiff engine.

The central head fuses a per-class linear score with a per-class
quadratic interaction score ``z^T M_k z`` (``M_k`` symmetric by
construction), capturing second-order feature co-occurrence without ever
materializing the ``C^2``-dimensional outer-product descriptor that
explicit bilinear pooling requires.
"""

__version__ = "0.1.0"

from .backbones import BackboneSpec, build_backbone
from .data import (Dataset, DatasetSpec, LabeledBatch, SplitDataset, batches,
                   gen_cooc_tabular, gen_texture_pair_image, generate,
                   load_qten_dataset, save_dataset)
from .errors import (ConfigError, DataError, DimensionError, DivergenceError,
                     FormatError, QuicError, ResourceError, UsageError)
from .estimator import QuICClassifier
from .heads import (BCNNOracleHead, FCHead, GAPHead, HeadKind, QuICHead, SEHead,
                    batch_outer_vec, build_head, quadratic_form, se_forward,
                    symmetrize)
from .layers import (BatchNormState, batch_norm_1d, conv2d, global_avg_pool,
                     linear, max_pool2d)
from .tensor import (Tensor, backward, l2_normalize_rows, matmul, no_grad,
                     softmax_cross_entropy)
from .training import (Checkpoint, EvalReport, Model, SGD, TrainConfig,
                       TrainResult, build_model, evaluate, lr_at_epoch,
                       model_from_checkpoint, sgd_step, train)

__all__ = [
    "__version__",
    "BackboneSpec", "build_backbone",
    "Dataset", "DatasetSpec", "LabeledBatch", "SplitDataset", "batches",
    "gen_cooc_tabular", "gen_texture_pair_image", "generate",
    "load_qten_dataset", "save_dataset",
    "ConfigError", "DataError", "DimensionError", "DivergenceError",
    "FormatError", "QuicError", "ResourceError", "UsageError",
    "QuICClassifier",
    "BCNNOracleHead", "FCHead", "GAPHead", "HeadKind", "QuICHead", "SEHead",
    "batch_outer_vec", "build_head", "quadratic_form", "se_forward", "symmetrize",
    "BatchNormState", "batch_norm_1d", "conv2d", "global_avg_pool", "linear",
    "max_pool2d",
    "Tensor", "backward", "l2_normalize_rows", "matmul", "no_grad",
    "softmax_cross_entropy",
    "Checkpoint", "EvalReport", "Model", "SGD", "TrainConfig", "TrainResult",
    "build_model", "evaluate", "lr_at_epoch", "model_from_checkpoint",
    "sgd_step", "train",
]

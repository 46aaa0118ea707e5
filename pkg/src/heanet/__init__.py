"""Edge-aware point cloud learning with attention-scored downsampling.

Subpackages are plain modules over numpy:

* ``ndtensor`` -- small reverse-mode autodiff engine and gradient checker
* ``pcio`` -- OFF/XYZ/HEAP0001 I/O, normalization, synthetic shapes
* ``neighbors`` -- knn, random distant points, the local/global embedding
* ``downsample`` -- global/local/fused attention samplers and baselines
* ``attention`` -- the transformer decoder block
* ``model`` -- classification and segmentation networks
* ``train`` / ``metrics`` -- losses, AdamW, schedule, loops, Acc and mIoU
* ``benchmark`` / ``sampling`` -- sampler comparison and one-call sampling
* ``estimators`` -- scikit-learn style wrappers
* ``cli`` -- the ``heanet`` command
"""

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, preset
from .downsample import (
    SampleSelection,
    correlation_matrix,
    fps,
    global_downsample,
    global_local_downsample,
    local_downsample,
    random_sample,
    voxel_sample,
)
from .estimators import EdgeAwareSampler, HEANetClassifier, HEANetSegmenter
from .exceptions import (
    ArgumentError,
    ConfigError,
    DataError,
    DimensionError,
    FormatError,
    GatherIndexError,
    HEAError,
    SizeError,
)
from .metrics import accuracy, cat_miou, ins_miou
from .model import ModelSpec, forward, init_weights, predict
from .ndtensor import Tensor, grad_check, no_grad
from .neighbors import NeighborIndex, embed, knn, random_distant
from .pcio import Dataset, PointCloud, make_synthetic, make_synthetic_dataset, read_cloud, write_cloud
from .sampling import sample
from .train import TrainConfig, cosine_lr, evaluate, fit
from .weights import Weights, load_weights, save_weights

__version__ = "0.1.0"

__all__ = [
    "ArgumentError", "ConfigError", "DataError", "Dataset", "DimensionError", "EdgeAwareSampler", "FormatError",
    "GatherIndexError", "HEAError", "HEANetClassifier", "HEANetSegmenter", "ModelSpec", "NeighborIndex",
    "PointCloud", "RunConfig", "SampleSelection", "SizeError", "Tensor", "TrainConfig", "Weights", "accuracy",
    "cat_miou", "correlation_matrix", "cosine_lr", "embed", "evaluate", "fit", "forward", "fps", "global_downsample",
    "global_local_downsample", "grad_check", "init_weights", "ins_miou", "knn", "load_checkpoint", "load_weights",
    "local_downsample", "make_synthetic", "make_synthetic_dataset", "no_grad", "predict", "preset",
    "random_distant", "random_sample", "read_cloud", "sample", "save_checkpoint", "save_weights", "voxel_sample",
    "write_cloud",
]

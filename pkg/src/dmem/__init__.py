"""dmem: dense U-nets with deformable convolutions, fused by majority vote.

A CPU-only, float64, from-scratch segmentation toolkit: a small reverse-mode
tensor core, deformable 2D convolution, dense-block encoder/decoder networks
in three variants, a three-path voting ensemble, synthetic data generation,
and overlap metrics, all wired into one batch CLI.
"""

from .blocks import Conv2dLayer, DenseBlock, DenseBlockConfig, DenseLayer, TransitionDown, TransitionUp
from .data import (
    GeometryError,
    LabelError,
    Sample,
    SynthSpec,
    encode_labels,
    generate_synthetic,
    load_dataset,
    normalize,
    resize_bilinear,
    resize_nearest,
    save_dataset,
)
from .deform import (
    DeformConv2dLayer,
    OffsetPredictor,
    bilinear_sample,
    deformable_conv2d,
    kernel_grid,
)
from .ensemble import (
    Adam,
    EnsembleBundle,
    Hyperparams,
    SGD,
    TrainResult,
    fuse_nuclei,
    majority_vote,
    predict,
    train_ensemble,
    train_path,
    validation_zsi,
)
from .metrics import (
    MetricsReport,
    MetricsRow,
    aggregate,
    format_mean_std,
    fscore,
    precision,
    recall,
    report_tsv,
    score_pair,
    summary_table,
    zsi,
)
from .network import (
    DEFORM_CONTRACT,
    DEFORM_EXPAND,
    PLAIN,
    VARIANTS,
    ArchConfig,
    Model,
    build_network,
    init_parameters,
    load_model,
)
from .tensor import (
    GraphTape,
    NumericalError,
    Op,
    ShapeError,
    Tensor,
    backward,
    concat_channels,
    conv2d,
    cross_entropy_loss,
    grad_check,
    max_pool2d,
    relu,
    softmax_channels,
    split_channels,
    transposed_conv2d,
)

__version__ = "0.1.0"

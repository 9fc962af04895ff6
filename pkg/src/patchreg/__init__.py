"""Patch-wise adversarial regularization on float64 numpy.

A small convnet stack with exact hand-written VJPs, a side classifier that
grades every spatial location of an intermediate feature map, and a gradient
reversal coupling that trains the backbone to erase patch-level evidence
while still solving the main task.
"""

from .exceptions import (
    ConfigError,
    FormatError,
    InputError,
    NumericError,
    PatchregError,
    ShapeError,
)
from .ops import (
    ConvSpec,
    affine,
    affine_vjp,
    conv2d,
    conv2d_vjp,
    maxpool2d,
    maxpool2d_vjp,
    relu,
    relu_vjp,
    softmax_cross_entropy,
)
from .network import (
    LayerGraph,
    NetworkParams,
    backward,
    build_backbone,
    finite_diff_check,
    forward,
    forward_taps,
    grad_reverse,
    grad_reverse_vjp,
    init_params,
)
from .regularizer import (
    MultiLevelSpec,
    SideClassifierSpec,
    init_multi_side_params,
    init_side_params,
    multi_level_objective,
    par_finite_diff_check,
    par_objective,
    patch_loss,
    side_accuracy,
    side_logits,
)
from .perturb import (
    attach_pattern,
    attach_uniform,
    dft2,
    fourier_filter,
    greyscale,
    idft2,
    make_pattern_kernels,
    negative_color,
    radial_mask,
    random_mask,
)
from .data import LabeledDataset, batches, load_mnist_idx, save_mnist_idx, split
from .training import Schedule, evaluate, sgd_step, train
from .experiment import (
    ExperimentConfig,
    bench,
    build_config,
    parse_config_file,
    report,
    run_experiment,
    sweep_lambda,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "FormatError", "InputError", "NumericError", "PatchregError",
    "ShapeError",
    "ConvSpec", "affine", "affine_vjp", "conv2d", "conv2d_vjp", "maxpool2d",
    "maxpool2d_vjp", "relu", "relu_vjp", "softmax_cross_entropy",
    "LayerGraph", "NetworkParams", "backward", "build_backbone",
    "finite_diff_check", "forward", "forward_taps", "grad_reverse",
    "grad_reverse_vjp", "init_params",
    "MultiLevelSpec", "SideClassifierSpec", "init_multi_side_params",
    "init_side_params", "multi_level_objective", "par_finite_diff_check",
    "par_objective", "patch_loss", "side_accuracy", "side_logits",
    "attach_pattern", "attach_uniform", "dft2", "fourier_filter", "greyscale",
    "idft2", "make_pattern_kernels", "negative_color", "radial_mask",
    "random_mask",
    "LabeledDataset", "batches", "load_mnist_idx", "save_mnist_idx", "split",
    "Schedule", "evaluate", "sgd_step", "train",
    "ExperimentConfig", "bench", "build_config", "parse_config_file", "report",
    "run_experiment", "sweep_lambda",
    "__version__",
]

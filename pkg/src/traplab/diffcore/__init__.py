"""Minimal reverse-mode autodiff: tensors, layers, optimizers, checkpoints."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, grad_check
from .layers import (
    CLASSIFIER_ARCHS,
    AvgPool2d,
    Conv2d,
    FeatureClassifier,
    Flatten,
    LeakyRelu,
    Linear,
    Module,
    Relu,
    Sequential,
    Tanh,
    build_classifier,
    build_discriminator,
)
from .optim import SGD, Adam, Optimizer, make_optimizer
from .tensor import (
    DiffError,
    NonFiniteError,
    Tensor,
    avg_pool2d,
    bilinear_gather,
    bilinear_sample,
    binary_cross_entropy_with_logits,
    concat,
    conv2d,
    cosine_similarity,
    gather_rows,
    leaky_relu,
    log_sigmoid,
    matmul,
    max_margin,
    max_pool2d,
    relu,
    set_finite_checks,
    sigmoid,
    softmax_cross_entropy,
    tanh,
)

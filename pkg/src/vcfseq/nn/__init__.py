"""Minimal numpy deep-learning kernel: layers, loss, Adam, gradient checking."""

from .gradcheck import grad_check
from .init import he_uniform
from .layers import (
    conv3d,
    conv3d_backward,
    dense,
    dense_backward,
    lstm_sequence,
    lstm_sequence_backward,
    maxpool3d,
    maxpool3d_backward,
    relu,
    relu_backward,
    sigmoid,
    sigmoid_backward,
)
from .losses import EPS, bce_loss, bce_loss_grad
from .optim import AdamState, NonFiniteGradientError, adam_step

__all__ = [
    "AdamState",
    "EPS",
    "NonFiniteGradientError",
    "adam_step",
    "bce_loss",
    "bce_loss_grad",
    "conv3d",
    "conv3d_backward",
    "dense",
    "dense_backward",
    "grad_check",
    "he_uniform",
    "lstm_sequence",
    "lstm_sequence_backward",
    "maxpool3d",
    "maxpool3d_backward",
    "relu",
    "relu_backward",
    "sigmoid",
    "sigmoid_backward",
]

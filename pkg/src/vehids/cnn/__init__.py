"""Compact convolutional classifier engine."""

from .gradcheck import gradient_check
from .layers import Conv2D, Dense, Dropout, Flatten, MaxPool2D, ReLU
from .model import (
    CnnConfig,
    CnnModel,
    build_cnn,
    decode_model,
    encode_model,
    extract_dense_features,
    images_to_tensor,
    predict_label,
    predict_proba,
    softmax,
    with_config,
)
from .training import Adam, EarlyStopper, TrainReport, cross_entropy, fine_tune, train

__all__ = [
    "Adam",
    "CnnConfig",
    "CnnModel",
    "Conv2D",
    "Dense",
    "Dropout",
    "EarlyStopper",
    "Flatten",
    "MaxPool2D",
    "ReLU",
    "TrainReport",
    "build_cnn",
    "cross_entropy",
    "decode_model",
    "encode_model",
    "extract_dense_features",
    "fine_tune",
    "gradient_check",
    "images_to_tensor",
    "predict_label",
    "predict_proba",
    "softmax",
    "train",
    "with_config",
]

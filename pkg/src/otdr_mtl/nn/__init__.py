"""Numpy LSTM multitask model: forward pass, gradients, training, serialization."""
from .complexity import WeightCount, count_weights, lstm_weight_formula, task_weight_formula
from .io import load_model, save_model
from .model import (
    DEFAULT_LOSS_WEIGHTS,
    TASKS,
    ArchSpec,
    LstmParams,
    ModelParams,
    backprop_gradients,
    init_params,
    loss_and_gradients,
    lstm_cell_forward,
    lstm_sequence_forward,
    model_forward,
    multitask_loss,
    predict,
)
from .train import LearningCurves, TrainConfig, train_model

__all__ = [
    "DEFAULT_LOSS_WEIGHTS", "TASKS", "ArchSpec", "LearningCurves", "LstmParams", "ModelParams",
    "TrainConfig", "WeightCount", "backprop_gradients", "count_weights", "init_params",
    "load_model", "loss_and_gradients", "lstm_cell_forward", "lstm_sequence_forward",
    "lstm_weight_formula", "model_forward", "multitask_loss", "predict", "save_model",
    "task_weight_formula", "train_model",
]

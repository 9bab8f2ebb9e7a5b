"""Kalman-filter weight modifier for neural networks trained under concept drift."""
from .kalman import KalmanState, init_kalman, kalman_gain, kalman_predict, kalman_update, measurement_noise
from .nn import Batch, evaluate, forward, init_params, loss_and_grad, sgd_step

__version__ = "0.1.0"

__all__ = [
    "Batch", "KalmanState", "evaluate", "forward", "init_kalman", "init_params",
    "kalman_gain", "kalman_predict", "kalman_update", "loss_and_grad",
    "measurement_noise", "sgd_step",
]

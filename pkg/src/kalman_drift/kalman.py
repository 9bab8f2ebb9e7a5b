"""Diagonal Kalman filter over network parameters.

Every parameter is filtered independently. The state transition and the
observation matrix are both the identity and process noise is zero, so the
predict step leaves the state untouched. The measurement is the network after
one SGD step, and its noise is the squared (or absolute) gradient of that
network on the batch it was just trained on.

Checkpoint format (``save_state`` / ``load_state``): an uncompressed NumPy
``.npz`` archive with three arrays, ``estimate`` (float64, length n),
``covariance`` (float64, length n) and ``floor`` (float64 scalar).
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn

DEFAULT_FLOOR = 1e-12
NOISE_TRANSFORMS = ("square", "abs")


@dataclass(frozen=True)
class KalmanState:
    estimate: np.ndarray
    covariance: np.ndarray
    floor: float = DEFAULT_FLOOR

    def __post_init__(self):
        if self.estimate.shape != self.covariance.shape:
            raise ValueError(
                f"estimate {self.estimate.shape} and covariance "
                f"{self.covariance.shape} differ in shape"
            )
        if not self.floor > 0:
            raise ValueError(f"floor must be positive, got {self.floor}")

    def copy(self) -> KalmanState:
        return KalmanState(self.estimate.copy(), self.covariance.copy(), self.floor)


def gradient_variance(grad: np.ndarray, floor: float, transform: str = "square") -> np.ndarray:
    """Turn a signed gradient into a nonnegative per-parameter variance."""
    if not floor > 0:
        raise ValueError(f"floor must be positive, got {floor}")
    if not np.all(np.isfinite(grad)):
        raise ValueError("gradient contains non-finite entries")
    if transform == "square":
        var = np.square(grad)
    elif transform == "abs":
        var = np.abs(grad)
    else:
        raise ValueError(f"noise transform must be one of {NOISE_TRANSFORMS}, got {transform!r}")
    return np.maximum(var, floor)


def init_kalman(
    pretrained: np.ndarray,
    pretrain_grad: np.ndarray,
    floor: float = DEFAULT_FLOOR,
    transform: str = "square",
) -> KalmanState:
    """Start the filter at the pre-trained model.

    ``pretrain_grad`` should be the mean gradient of the pre-trained model over
    the whole pre-training set; its floored square becomes the initial
    covariance.
    """
    if pretrained.shape != pretrain_grad.shape:
        raise ValueError("pretrained params and gradient differ in shape")
    cov = gradient_variance(pretrain_grad, floor, transform)
    return KalmanState(np.array(pretrained, dtype=np.float64), cov, floor)


def measurement_noise(
    params: np.ndarray,
    batch: nn.Batch,
    arch,
    floor: float = DEFAULT_FLOOR,
    transform: str = "square",
) -> np.ndarray:
    """Noise of the post-SGD model ``params`` as a measurement on ``batch``."""
    _, grad = nn.loss_and_grad(params, batch, arch)
    return gradient_variance(grad, floor, transform)


def kalman_predict(state: KalmanState) -> KalmanState:
    # static dynamics, no process noise: the prediction is the previous state
    return state


def kalman_gain(p_pred: np.ndarray, noise: np.ndarray) -> np.ndarray:
    if p_pred.shape != noise.shape:
        raise ValueError(f"shape mismatch: P {p_pred.shape}, R {noise.shape}")
    denom = p_pred + noise
    if np.any(denom <= 0):
        raise ValueError("P + R must be positive everywhere; floor P and R first")
    return p_pred / denom


def kalman_update(state: KalmanState, measurement: np.ndarray, noise: np.ndarray) -> KalmanState:
    """Fuse ``measurement`` into the state.

    ``x <- x + K (z - x)``, ``P <- max((1 - K) P, floor)``. Flooring P keeps the
    gain away from zero so the filter never stops listening.
    """
    x = state.estimate
    if measurement.shape != x.shape:
        raise ValueError("measurement and estimate differ in shape")
    gain = kalman_gain(state.covariance, noise)
    # clip: rounding may overshoot z by an ulp when K is ~1
    estimate = np.clip(x + gain * (measurement - x),
                       np.minimum(x, measurement), np.maximum(x, measurement))
    covariance = np.maximum((1.0 - gain) * state.covariance, state.floor)
    return KalmanState(estimate, covariance, state.floor)


def save_state(state: KalmanState, path) -> Path:
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, estimate=state.estimate, covariance=state.covariance,
                 floor=np.float64(state.floor))
    return path


def load_state(path) -> KalmanState:
    with np.load(path) as data:
        return KalmanState(
            np.array(data["estimate"], dtype=np.float64),
            np.array(data["covariance"], dtype=np.float64),
            float(data["floor"]),
        )

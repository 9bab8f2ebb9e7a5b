"""Dense ReLU network on a flat parameter vector.

All parameters of the network live in one 1-D float64 array. Layer ``i``
contributes a ``(fan_in, fan_out)`` weight matrix (row-major) followed by a
``fan_out`` bias vector, in layer order. Hidden layers are affine + ReLU, the
output layer is affine only and its logits feed a softmax cross-entropy loss.

Read as a linear state model, one SGD step is ``m_k = A m_{k-1} + B u_k`` with
``A = I``, ``B = -lr`` and ``u_k`` the batch gradient; there is no process or
measurement noise.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

Architecture = tuple[int, ...]

DEFAULT_ARCHITECTURE: Architecture = (784, 256, 10)

# rows of a dataset evaluated per forward pass in `evaluate`
EVAL_CHUNK = 4096


@dataclass(frozen=True)
class Batch:
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.images.ndim != 2:
            raise ValueError(f"images must be 2-D, got shape {self.images.shape}")
        if len(self.labels) != self.images.shape[0]:
            raise ValueError(
                f"{self.images.shape[0]} images but {len(self.labels)} labels"
            )
        if len(self.labels) < 1:
            raise ValueError("a batch needs at least one sample")


def check_architecture(arch: Sequence[int]) -> Architecture:
    arch = tuple(int(n) for n in arch)
    if len(arch) < 2:
        raise ValueError(f"architecture needs an input and an output layer, got {arch}")
    if any(n <= 0 for n in arch):
        raise ValueError(f"layer sizes must be positive, got {arch}")
    return arch


def num_params(arch: Sequence[int]) -> int:
    arch = check_architecture(arch)
    return sum(a * b + b for a, b in zip(arch[:-1], arch[1:]))


def unflatten(params: np.ndarray, arch: Sequence[int]) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat vector into per-layer ``(W, b)`` views (no copies)."""
    arch = check_architecture(arch)
    if params.ndim != 1 or params.size != num_params(arch):
        raise ValueError(
            f"parameter vector of length {params.size} does not fit architecture {arch}"
        )
    layers = []
    offset = 0
    for fan_in, fan_out in zip(arch[:-1], arch[1:]):
        w = params[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = params[offset:offset + fan_out]
        offset += fan_out
        layers.append((w, b))
    return layers


def flatten(layers: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    return np.concatenate([np.concatenate([w.ravel(), b.ravel()]) for w, b in layers])


def init_params(arch: Sequence[int], seed: int) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    arch = check_architecture(arch)
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(arch[:-1], arch[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        layers.append((w, np.zeros(fan_out)))
    return flatten(layers)


def _as_input(images: np.ndarray, arch: Architecture) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != arch[0]:
        raise ValueError(f"images of shape {x.shape} do not match input width {arch[0]}")
    return x


def forward(params: np.ndarray, images: np.ndarray, arch: Sequence[int]) -> np.ndarray:
    """Logits of shape ``(batch, arch[-1])``."""
    arch = check_architecture(arch)
    layers = unflatten(params, arch)
    h = _as_input(images, arch)
    for w, b in layers[:-1]:
        h = np.maximum(h @ w + b, 0.0)
    w, b = layers[-1]
    return h @ w + b


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss_and_grad(params: np.ndarray, batch: Batch, arch: Sequence[int]) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over the batch and its exact gradient.

    The gradient comes back in the same flat layout as ``params``.
    """
    arch = check_architecture(arch)
    layers = unflatten(params, arch)
    x = _as_input(batch.images, arch)
    labels = np.asarray(batch.labels, dtype=np.int64)
    n = x.shape[0]
    if labels.min() < 0 or labels.max() >= arch[-1]:
        raise ValueError(f"labels must lie in [0, {arch[-1]})")

    activations = [x]
    for w, b in layers[:-1]:
        activations.append(np.maximum(activations[-1] @ w + b, 0.0))
    w_out, b_out = layers[-1]
    logp = log_softmax(activations[-1] @ w_out + b_out)
    rows = np.arange(n)
    loss = float(-logp[rows, labels].mean())

    # d(mean CE)/d(logits) = (softmax - onehot) / n
    delta = np.exp(logp)
    delta[rows, labels] -= 1.0
    delta /= n

    grads: list[tuple[np.ndarray, np.ndarray]] = []
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        a = activations[i]
        grads.append((a.T @ delta, delta.sum(axis=0)))
        if i > 0:
            delta = (delta @ w.T) * (a > 0.0)
    grads.reverse()
    return loss, flatten(grads)


def sgd_step(params: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if params.shape != grad.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grad {grad.shape}")
    return params - lr * grad


def predict(params: np.ndarray, images: np.ndarray, arch: Sequence[int]) -> np.ndarray:
    """Class predictions; ties go to the lowest class index (``np.argmax``)."""
    out = np.empty(len(images), dtype=np.int64)
    for start in range(0, len(images), EVAL_CHUNK):
        stop = start + EVAL_CHUNK
        out[start:stop] = forward(params, images[start:stop], arch).argmax(axis=1)
    return out


def evaluate(params: np.ndarray, dataset, arch: Sequence[int]) -> float:
    """Accuracy on anything with ``images`` and ``labels``, as a fraction in [0, 1]."""
    labels = dataset.labels
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = int(np.count_nonzero(predict(params, dataset.images, arch) == labels))
    return correct / len(labels)

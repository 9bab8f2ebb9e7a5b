"""Small property checks that run in seconds, without MNIST.

Each check returns ``(passed, detail)``. The reference routines here are
written independently of the vectorised code they check.
"""
from __future__ import annotations

import math
import time
from typing import Callable

import numpy as np

from . import kalman, nn
from .data import NUM_CLASSES, Dataset, Transform, apply_transform, pixel_permutation


def reference_loss(params: np.ndarray, images: np.ndarray, labels: np.ndarray, arch) -> float:
    """Mean cross-entropy with explicit loops over units; slow but obvious."""
    total = 0.0
    for x, y in zip(images, labels):
        h = [float(v) for v in x]
        offset = 0
        for layer, (fan_in, fan_out) in enumerate(zip(arch[:-1], arch[1:])):
            w = params[offset:offset + fan_in * fan_out]
            b = params[offset + fan_in * fan_out:offset + fan_in * fan_out + fan_out]
            offset += fan_in * fan_out + fan_out
            out = []
            for j in range(fan_out):
                s = b[j]
                for i in range(fan_in):
                    s += h[i] * w[i * fan_out + j]
                out.append(s if layer == len(arch) - 2 else max(s, 0.0))
            h = out
        top = max(h)
        total += top + math.log(sum(math.exp(v - top) for v in h)) - h[y]
    return total / len(labels)


def central_differences(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    grad = np.empty_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        grad[i] = (f(xp) - f(xm)) / (2 * h)
    return grad


def gradient_relative_error(analytic: np.ndarray, numeric: np.ndarray, threshold: float = 1e-8) -> float:
    mask = np.abs(analytic) > threshold
    if not mask.any():
        return 0.0
    err = np.abs(analytic[mask] - numeric[mask]) / np.maximum(np.abs(analytic[mask]), np.abs(numeric[mask]))
    return float(err.max())


def check_gradients(trials: int = 20, arch=(6, 8, 4), seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for trial in range(trials):
        params = nn.init_params(arch, int(rng.integers(2**31)))
        # nonzero biases so ReLU kinks are not all at the origin
        params = params + rng.normal(0, 0.1, params.shape)
        n = int(rng.integers(1, 9))
        images = rng.random((n, arch[0]))
        labels = rng.integers(0, arch[-1], n)
        _, grad = nn.loss_and_grad(params, nn.Batch(images, labels), arch)
        numeric = central_differences(lambda p: reference_loss(p, images, labels, arch), params)
        worst = max(worst, gradient_relative_error(grad, numeric))
    return worst < 1e-4, f"max relative error {worst:.2e} over {trials} nets"


def scalar_kalman(x: float, p: float, z: float, r: float, floor: float) -> tuple[float, float, float]:
    k = p / (p + r)
    x_new = x + k * (z - x)
    if x_new < min(x, z):
        x_new = min(x, z)
    if x_new > max(x, z):
        x_new = max(x, z)
    p_new = (1.0 - k) * p
    if p_new < floor:
        p_new = floor
    return k, x_new, p_new


def ulp_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.spacing(np.maximum(np.abs(a), np.abs(b)))


def check_scalar_kalman(n: int = 1000, seed: int = 1, floor: float = 1e-12) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    p = np.maximum(10.0 ** rng.uniform(-12, 2, n), floor)
    r = np.maximum(10.0 ** rng.uniform(-12, 2, n), floor)
    x = rng.normal(0, 1, n)
    z = rng.normal(0, 1, n)
    state = kalman.KalmanState(x, p, floor)
    gain = kalman.kalman_gain(p, r)
    new = kalman.kalman_update(state, z, r)
    ref = np.array([scalar_kalman(*t, floor) for t in zip(x, p, z, r)])
    ulps = max(ulp_distance(gain, ref[:, 0]).max(), ulp_distance(new.estimate, ref[:, 1]).max(),
               ulp_distance(new.covariance, ref[:, 2]).max())
    in_unit = bool(np.all((gain >= 0) & (gain <= 1)))
    lo, hi = np.minimum(x, z), np.maximum(x, z)
    between = bool(np.all((new.estimate >= lo) & (new.estimate <= hi)))
    ok = ulps <= 1 and in_unit and between
    return ok, f"max {ulps:.0f} ulp, gains in [0,1]: {in_unit}, estimates bracketed: {between}"


def check_permutation(seeds=range(5)) -> tuple[bool, str]:
    rng = np.random.default_rng(2)
    images = rng.random((3, 784)).astype(np.float32)
    labels = np.arange(NUM_CLASSES)
    data = Dataset(images, rng.integers(0, NUM_CLASSES, 3))
    for seed in seeds:
        perm = pixel_permutation(seed)
        if not np.array_equal(np.sort(perm), np.arange(784)):
            return False, f"seed {seed}: not a bijection"
        permuted = apply_transform(data, Transform("permute_pixels", seed=seed))
        if not np.array_equal(permuted.images[:, np.argsort(perm)], data.images):
            return False, f"seed {seed}: inverse permutation does not restore images"
    for k in range(1, NUM_CLASSES):
        ds = Dataset(np.zeros((NUM_CLASSES, 1), np.float32), labels)
        back = apply_transform(apply_transform(ds, Transform("shift_labels", offset=k)),
                               Transform("shift_labels", offset=NUM_CLASSES - k))
        if not np.array_equal(back.labels, labels):
            return False, f"shift_labels({k}) not undone by shift_labels({NUM_CLASSES - k})"
    return True, "permutations bijective and invertible; label shifts invertible"


def check_gain_bounds(n: int = 100_000, seed: int = 3) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    scale = 10.0 ** rng.uniform(-300, 300, (2, n))
    p = rng.random(n) * scale[0]
    r = rng.random(n) * scale[1]
    # at least one side floored, as the trainer guarantees
    r = np.maximum(r, 1e-300)
    gain = kalman.kalman_gain(p, r)
    ok = bool(np.all(np.isfinite(gain) & (gain >= 0) & (gain <= 1)))
    return ok, f"{n} random (P, R) pairs over 600 decades"


CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {
    "gradient-check": check_gradients,
    "scalar-kalman-oracle": check_scalar_kalman,
    "permutation-bijection": check_permutation,
    "gain-bounds-fuzz": check_gain_bounds,
}


def run_all(echo=print) -> list[str]:
    """Run every check, report one line each, return the names that failed."""
    failed = []
    for name, check in CHECKS.items():
        start = time.perf_counter()
        try:
            ok, detail = check()
        except Exception as exc:  # a crash is a failed property, not a crashed selftest
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        echo(f"{'PASS' if ok else 'FAIL'}  {name:<22} {detail} ({time.perf_counter() - start:.1f}s)")
        if not ok:
            failed.append(name)
    return failed

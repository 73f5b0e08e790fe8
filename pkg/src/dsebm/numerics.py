"""Dense float64 array helpers shared by every energy model.

Arrays are plain ``numpy.ndarray`` objects of dtype float64. The 2-D
convolution primitives are cross-correlations; a true convolution is
``conv_valid(x, flip(w))``.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64
DEFAULT_FD_STEP = 1e-5


class NumericalError(ArithmeticError):
    """A computation produced NaN or Inf."""


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    arr = np.asarray(x, dtype=DTYPE)
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{name} contains non-finite values")
    return arr


def check_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite values in {what}")
    return x


def softplus(x):
    """log(1 + exp(x)) without overflow for large ``x``."""
    x = np.asarray(x, dtype=DTYPE)
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return out if out.ndim else float(out)


def sigmoid(x):
    """Logistic function; the derivative of :func:`softplus`."""
    x = np.asarray(x, dtype=DTYPE)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out if out.ndim else float(out)


def flip(a: np.ndarray) -> np.ndarray:
    """Reverse a 2-D array along both axes (180 degree rotation)."""
    a = np.asarray(a, dtype=DTYPE)
    if a.ndim != 2:
        raise ValueError(f"flip expects a 2-D array, got shape {a.shape}")
    return a[::-1, ::-1].copy()


def conv_valid(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Cross-correlate where ``kernel`` lies fully inside ``image``.

    ``out[p, q] = sum_ij image[p + i, q + j] * kernel[i, j]``; the output side is
    ``d - dw + 1``.
    """
    image = np.asarray(image, dtype=DTYPE)
    kernel = np.asarray(kernel, dtype=DTYPE)
    if image.ndim != 2 or kernel.ndim != 2:
        raise ValueError("conv_valid expects 2-D image and kernel")
    if kernel.shape[0] > image.shape[0] or kernel.shape[1] > image.shape[1]:
        raise ValueError(f"kernel {kernel.shape} larger than image {image.shape}")
    windows = sliding_window_view(image, kernel.shape)
    return np.einsum("pqij,ij->pq", windows, kernel)


def conv_full(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Cross-correlate at every offset where ``kernel`` touches ``image``.

    Zero-pads by ``dw - 1`` on each side, so the output side is ``d + dw - 1``.
    ``conv_full(y, flip(w))`` is the adjoint of ``conv_valid(., w)``.
    """
    image = np.asarray(image, dtype=DTYPE)
    kernel = np.asarray(kernel, dtype=DTYPE)
    if image.ndim != 2 or kernel.ndim != 2:
        raise ValueError("conv_full expects 2-D image and kernel")
    ph, pw = kernel.shape[0] - 1, kernel.shape[1] - 1
    padded = np.pad(image, ((ph, ph), (pw, pw)))
    return conv_valid(padded, kernel)


def finite_diff_grad(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    h: float = DEFAULT_FD_STEP,
) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time.

    The default step suits inputs of unit scale.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=DTYPE)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"function is non-finite near coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_error(a, b, floor: float = 1e-12) -> float:
    """Norm-wise relative error ``||a - b|| / max(||a||, ||b||)``."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


class RngStream:
    """Seeded random stream with platform-independent draws.

    Uniforms come from PCG64; Gaussians use the Box-Muller transform on those
    uniforms rather than numpy's ziggurat sampler.
    """

    algorithm = "pcg64+box-muller"

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._path = (self.seed,)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return low + (high - low) * self._gen.random(size)

    def normal(self, loc=0.0, scale=1.0, size=None) -> np.ndarray:
        shape = () if size is None else tuple(np.atleast_1d(size))
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        u1 = 1.0 - self._gen.random(m)  # (0, 1], keeps log finite
        u2 = self._gen.random(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
        out = loc + scale * z.reshape(shape)
        return out if shape else float(out)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def spawn(self, key: int) -> "RngStream":
        """Independent child stream derived from this stream's seed and ``key``."""
        child = RngStream.__new__(RngStream)
        child.seed = self.seed
        child._path = self._path + (int(key),)
        ss = np.random.SeedSequence(list(child._path))
        child._gen = np.random.Generator(np.random.PCG64(ss))
        return child

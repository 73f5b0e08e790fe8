"""Fully connected deep energy model.

Energy::

    E(x) = 0.5 * ||x - b'||^2 - sum_j h_L[j],   h_l = softplus(W_l^T h_{l-1} + b_l)

The input gradient is computed by a backward sweep starting from an all-ones
vector at the top layer, ``u_{l-1} = W_l (sigmoid(z_l) * u_l)``, and the
reconstruction is ``f(x) = x - grad_x E = u_0 + b'``.

All functions accept a single sample of shape ``(d,)`` or a batch ``(n, d)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import DTYPE, RngStream, check_finite, sigmoid, softplus

ARCH = "dense"


@dataclass
class DenseEnergyParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    b_prime: np.ndarray
    arch: str = field(default=ARCH, init=False)

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=DTYPE) for w in self.weights]
        self.biases = [np.asarray(b, dtype=DTYPE) for b in self.biases]
        self.b_prime = np.asarray(self.b_prime, dtype=DTYPE)
        self.validate()

    def validate(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        rows = self.b_prime.shape[0]
        for l, (w, b) in enumerate(zip(self.weights, self.biases), start=1):
            if w.ndim != 2 or w.shape[0] != rows:
                raise ValueError(f"layer {l}: weight shape {w.shape} does not chain from {rows}")
            if b.shape != (w.shape[1],):
                raise ValueError(f"layer {l}: bias shape {b.shape} != ({w.shape[1]},)")
            rows = w.shape[1]

    @property
    def input_dim(self) -> int:
        return self.b_prime.shape[0]

    @property
    def sizes(self) -> list[int]:
        return [self.input_dim] + [w.shape[1] for w in self.weights]

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for l, (w, b) in enumerate(zip(self.weights, self.biases), start=1):
            out[f"W{l}"] = w
            out[f"b{l}"] = b
        out["b_prime"] = self.b_prime
        return out

    def descriptor(self) -> dict:
        return {"sizes": self.sizes}

    @classmethod
    def from_tensors(cls, descriptor: dict, tensors: dict[str, np.ndarray]) -> "DenseEnergyParams":
        n = len(descriptor["sizes"]) - 1
        return cls(
            [tensors[f"W{l}"] for l in range(1, n + 1)],
            [tensors[f"b{l}"] for l in range(1, n + 1)],
            tensors["b_prime"],
        )

    def zeros_like(self) -> "DenseEnergyParams":
        return DenseEnergyParams(
            [np.zeros_like(w) for w in self.weights],
            [np.zeros_like(b) for b in self.biases],
            np.zeros_like(self.b_prime),
        )

    # uniform model interface used by training/detection
    def energy(self, x):
        return dense_forward(self, x)[0]

    def score(self, x):
        return dense_score(self, x)

    def reconstruct(self, x):
        return dense_reconstruct(self, x)

    def loss_grad(self, x_clean, x_noisy):
        return dense_param_grad(self, x_clean, x_noisy)


def init_dense(sizes: list[int], rng: RngStream, b_prime=None) -> DenseEnergyParams:
    """Glorot-uniform weights, zero biases, ``b'`` at ``b_prime`` (default zero)."""
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, (fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    bp = np.zeros(sizes[0]) if b_prime is None else np.array(b_prime, dtype=DTYPE)
    return DenseEnergyParams(weights, biases, bp)


def _as_batch(params: DenseEnergyParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=DTYPE)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    if x2.ndim != 2 or x2.shape[1] != params.input_dim:
        raise ValueError(f"input shape {x.shape} does not match dimension {params.input_dim}")
    return x2, single


def _forward(params, x2):
    hs, zs = [x2], []
    for w, b in zip(params.weights, params.biases):
        z = hs[-1] @ w + b
        zs.append(z)
        hs.append(softplus(z))
    return hs, zs


def _backward(params, zs, n):
    """Score sweep; returns ``us`` (u_0..u_L) and the gates ``sigmoid(z_l)``."""
    gates = [sigmoid(z) for z in zs]
    us = [None] * (len(zs) + 1)
    us[-1] = np.ones((n, params.weights[-1].shape[1]))
    for l in range(len(zs), 0, -1):
        us[l - 1] = (gates[l - 1] * us[l]) @ params.weights[l - 1].T
    return us, gates


def dense_forward(params: DenseEnergyParams, x):
    """Energy and the list of activations ``[h_0, ..., h_L]``."""
    x2, single = _as_batch(params, x)
    hs, _ = _forward(params, x2)
    diff = x2 - params.b_prime
    energy = 0.5 * np.sum(diff * diff, axis=1) - np.sum(hs[-1], axis=1)
    check_finite(energy, "dense energy")
    if single:
        return float(energy[0]), [h[0] for h in hs]
    return energy, hs


def dense_score(params: DenseEnergyParams, x) -> np.ndarray:
    """Input gradient of the energy, ``grad_x E``."""
    x2, single = _as_batch(params, x)
    _, zs = _forward(params, x2)
    us, _ = _backward(params, zs, x2.shape[0])
    score = check_finite((x2 - params.b_prime) - us[0], "dense score")
    return score[0] if single else score


def dense_reconstruct(params: DenseEnergyParams, x) -> np.ndarray:
    """``f(x) = x - grad_x E``, evaluated as ``u_0 + b'``."""
    x2, single = _as_batch(params, x)
    _, zs = _forward(params, x2)
    us, _ = _backward(params, zs, x2.shape[0])
    f = check_finite(us[0] + params.b_prime, "dense reconstruction")
    return f[0] if single else f


def dense_param_grad(params: DenseEnergyParams, x_clean, x_noisy):
    """Loss ``0.5 * sum ||x_clean - f(x_noisy)||^2`` and its parameter gradient.

    Reverse-mode differentiation through both the forward pass and the score
    sweep. Batches are summed.
    """
    xc, _ = _as_batch(params, x_clean)
    xn, _ = _as_batch(params, x_noisy)
    if xc.shape != xn.shape:
        raise ValueError("clean and noisy batches differ in shape")
    n = xn.shape[0]
    L = len(params.weights)
    hs, zs = _forward(params, xn)
    us, gates = _backward(params, zs, n)

    resid = us[0] + params.b_prime - xc
    loss = 0.5 * float(np.sum(resid * resid))
    grads = params.zeros_like()
    grads.b_prime[:] = resid.sum(axis=0)

    # adjoint of the score sweep, bottom to top
    u_bar = resid
    z_bar = [None] * L
    for l in range(1, L + 1):
        w = params.weights[l - 1]
        s = gates[l - 1]
        a = s * us[l]
        grads.weights[l - 1] += u_bar.T @ a
        a_bar = u_bar @ w
        z_bar[l - 1] = a_bar * us[l] * s * (1.0 - s)
        u_bar = a_bar * s

    # adjoint of the forward pass, top to bottom; h_L does not enter f
    h_bar = np.zeros_like(hs[-1])
    for l in range(L, 0, -1):
        s = gates[l - 1]
        zt = z_bar[l - 1] + h_bar * s
        grads.biases[l - 1] += zt.sum(axis=0)
        grads.weights[l - 1] += hs[l - 1].T @ zt
        h_bar = zt @ params.weights[l - 1].T

    for g in grads.tensors().values():
        check_finite(g, "dense parameter gradient")
    return loss, grads

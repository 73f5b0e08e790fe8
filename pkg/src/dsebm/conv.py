"""Convolutional energy model built from conv, max-pool and dense layers.

Energy::

    E(x) = 0.5 * ||x - b'||^2 - sum(h_L)

where ``h_L`` is the output of the layer stack. A conv layer computes
``h_j = softplus(sum_k conv_valid(h_prev_k, flip(W_jk)) + b_j)``; its score
sweep step is ``u_prev_k = sum_j conv_full(sigmoid(z_j) * u_j, W_jk)``. A max
pool routes the incoming gradient to the recorded argmax of each window and
zero elsewhere.

Images are ``(channels, height, width)``; batches add a leading axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .numerics import DTYPE, RngStream, check_finite, sigmoid, softplus

ARCH = "conv"


def _windows(x: np.ndarray, k: int) -> np.ndarray:
    return sliding_window_view(x, (k, k), axis=(2, 3))


def _pad(x: np.ndarray, k: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))


@dataclass
class ConvLayer:
    W: np.ndarray  # (filters, channels, k, k)
    b: np.ndarray  # (filters,)
    kind: str = field(default="conv", init=False)

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=DTYPE)
        self.b = np.asarray(self.b, dtype=DTYPE)
        if self.W.ndim != 4 or self.W.shape[2] != self.W.shape[3]:
            raise ValueError(f"conv filters must be (K_out, K_in, k, k), got {self.W.shape}")
        if self.b.shape != (self.W.shape[0],):
            raise ValueError("conv bias must have one entry per filter")

    @property
    def size(self) -> int:
        return self.W.shape[2]

    def params(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "b": self.b}

    def descriptor(self) -> dict:
        f, c, k, _ = self.W.shape
        return {"type": "conv", "filters": f, "channels": c, "size": k}

    def output_shape(self, shape):
        if len(shape) != 3:
            raise ValueError(f"conv layer needs an image input, got shape {shape}")
        c, h, w = shape
        k = self.size
        if c != self.W.shape[1]:
            raise ValueError(f"conv layer expects {self.W.shape[1]} channels, got {c}")
        if k > h or k > w:
            raise ValueError(f"filter size {k} exceeds input {h}x{w}")
        return (self.W.shape[0], h - k + 1, w - k + 1)

    def linear(self, x):
        """Bias-free forward map: valid cross-correlation with flipped filters."""
        return np.einsum("ncpqij,fcij->nfpq", _windows(x, self.size), self.W[:, :, ::-1, ::-1])

    def linear_t(self, y):
        """Adjoint of :meth:`linear`: full cross-correlation with the filters."""
        return np.einsum("nfhwij,fcij->nchw", _windows(_pad(y, self.size), self.size), self.W)

    def forward(self, x):
        z = self.linear(x) + self.b[None, :, None, None]
        s = sigmoid(z)
        return softplus(z), (x, s)

    def grad_linear(self, x, y_bar, g):
        # d<y_bar, linear(x)>/dW
        gf = np.einsum("nfpq,ncpqij->fcij", y_bar, _windows(x, self.size))
        g["W"] += gf[:, :, ::-1, ::-1]
        g["b"] += y_bar.sum(axis=(0, 2, 3))

    def grad_linear_t(self, y, x_bar, g):
        # d<x_bar, linear_t(y)>/dW
        g["W"] += np.einsum("nchw,nfhwij->fcij", x_bar, _windows(_pad(y, self.size), self.size))


@dataclass
class DenseLayer:
    W: np.ndarray  # (inputs, outputs)
    b: np.ndarray
    kind: str = field(default="dense", init=False)

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=DTYPE)
        self.b = np.asarray(self.b, dtype=DTYPE)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[1],):
            raise ValueError("dense layer needs W (in, out) and b (out,)")

    def params(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "b": self.b}

    def descriptor(self) -> dict:
        return {"type": "dense", "inputs": self.W.shape[0], "outputs": self.W.shape[1]}

    def output_shape(self, shape):
        if int(np.prod(shape)) != self.W.shape[0]:
            raise ValueError(f"dense layer expects {self.W.shape[0]} inputs, got shape {shape}")
        return (self.W.shape[1],)

    def linear(self, x):
        return x.reshape(x.shape[0], -1) @ self.W

    def linear_t(self, y):
        return y @ self.W.T  # caller restores the input shape

    def forward(self, x):
        z = self.linear(x) + self.b
        s = sigmoid(z)
        return softplus(z), (x, s)

    def grad_linear(self, x, y_bar, g):
        g["W"] += x.reshape(x.shape[0], -1).T @ y_bar
        g["b"] += y_bar.sum(axis=0)

    def grad_linear_t(self, y, x_bar, g):
        g["W"] += x_bar.reshape(x_bar.shape[0], -1).T @ y


@dataclass
class MaxPoolLayer:
    size: int
    kind: str = field(default="pool", init=False)

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def descriptor(self) -> dict:
        return {"type": "pool", "size": self.size}

    def output_shape(self, shape):
        if len(shape) != 3:
            raise ValueError(f"pool layer needs an image input, got shape {shape}")
        c, h, w = shape
        p = self.size
        if h % p or w % p:
            raise ValueError(f"pool window {p} does not divide input {h}x{w}")
        return (c, h // p, w // p)

    def _blocks(self, x):
        n, c, h, w = x.shape
        p = self.size
        blocks = x.reshape(n, c, h // p, p, w // p, p).transpose(0, 1, 2, 4, 3, 5)
        return blocks.reshape(n, c, h // p, w // p, p * p)

    def forward(self, x):
        blocks = self._blocks(x)
        idx = np.argmax(blocks, axis=-1)[..., None]  # first max in row-major order
        return np.take_along_axis(blocks, idx, axis=-1)[..., 0], (x.shape, idx)

    def route(self, u, cache):
        """Place each entry of ``u`` at its window's argmax; zeros elsewhere."""
        shape, idx = cache
        n, c, h, w = shape
        p = self.size
        out = np.zeros((n, c, h // p, w // p, p * p))
        np.put_along_axis(out, idx, u[..., None], axis=-1)
        out = out.reshape(n, c, h // p, w // p, p, p).transpose(0, 1, 2, 4, 3, 5)
        return out.reshape(shape)

    def gather(self, v, cache):
        """Adjoint of :meth:`route`."""
        _, idx = cache
        return np.take_along_axis(self._blocks(v), idx, axis=-1)[..., 0]


def maxpool_forward(size: int, h_prev: np.ndarray):
    """Pool one ``(channels, H, W)`` map; returns values and ``(row, col)`` argmax maps."""
    h_prev = np.asarray(h_prev, dtype=DTYPE)
    layer = MaxPoolLayer(size)
    layer.output_shape(h_prev.shape)
    out, (_, idx) = layer.forward(h_prev[None])
    idx = idx[0, ..., 0]
    c, hp, wp = out.shape[1:]
    rows = np.arange(hp)[:, None] * size + idx // size
    cols = np.arange(wp)[None, :] * size + idx % size
    return out[0], (rows, cols)


def conv_layer_forward(layer: ConvLayer, h_prev: np.ndarray) -> np.ndarray:
    """Apply one conv layer to a single ``(channels, H, W)`` input."""
    h_prev = np.asarray(h_prev, dtype=DTYPE)
    layer.output_shape(h_prev.shape)
    return layer.forward(h_prev[None])[0][0]


@dataclass
class ConvEnergyParams:
    layers: list
    b_prime: np.ndarray
    arch: str = field(default=ARCH, init=False)

    def __post_init__(self):
        self.b_prime = np.asarray(self.b_prime, dtype=DTYPE)
        if self.b_prime.ndim != 3:
            raise ValueError("b_prime must have image shape (channels, H, W)")
        self.shapes()

    @property
    def input_shape(self) -> tuple:
        return tuple(self.b_prime.shape)

    def shapes(self) -> list[tuple]:
        """Shape of every activation, input first."""
        shapes = [self.input_shape]
        seen_dense = False
        for layer in self.layers:
            if seen_dense and layer.kind != "dense":
                raise ValueError("conv/pool layers cannot follow a dense layer")
            seen_dense |= layer.kind == "dense"
            shapes.append(layer.output_shape(shapes[-1]))
        return shapes

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, t in layer.params().items():
                out[f"L{i}.{name}"] = t
        out["b_prime"] = self.b_prime
        return out

    def descriptor(self) -> dict:
        return {"input_shape": list(self.input_shape), "layers": [l.descriptor() for l in self.layers]}

    @classmethod
    def from_tensors(cls, descriptor: dict, tensors: dict[str, np.ndarray]) -> "ConvEnergyParams":
        layers = []
        for i, desc in enumerate(descriptor["layers"]):
            if desc["type"] == "conv":
                layers.append(ConvLayer(tensors[f"L{i}.W"], tensors[f"L{i}.b"]))
            elif desc["type"] == "dense":
                layers.append(DenseLayer(tensors[f"L{i}.W"], tensors[f"L{i}.b"]))
            elif desc["type"] == "pool":
                layers.append(MaxPoolLayer(int(desc["size"])))
            else:
                raise ValueError(f"unknown layer type {desc['type']!r}")
        return cls(layers, tensors["b_prime"])

    def zeros_like(self) -> "ConvEnergyParams":
        layers = []
        for layer in self.layers:
            if layer.kind == "pool":
                layers.append(MaxPoolLayer(layer.size))
            else:
                layers.append(type(layer)(np.zeros_like(layer.W), np.zeros_like(layer.b)))
        return ConvEnergyParams(layers, np.zeros_like(self.b_prime))

    def energy(self, x):
        return conv_energy(self, x)[0]

    def score(self, x):
        return conv_score(self, x)

    def reconstruct(self, x):
        return conv_reconstruct(self, x)

    def loss_grad(self, x_clean, x_noisy):
        return conv_param_grad(self, x_clean, x_noisy)


def init_conv(input_shape, layout: list[dict], rng: RngStream, b_prime=None) -> ConvEnergyParams:
    """Build a stack from short descriptors.

    ``layout`` entries: ``{"type": "conv", "filters": F, "size": k}``,
    ``{"type": "pool", "size": p}`` or ``{"type": "dense", "outputs": K}``.
    """
    shape = tuple(input_shape)
    layers = []
    for desc in layout:
        kind = desc["type"]
        if kind == "conv":
            f, k, c = int(desc["filters"]), int(desc["size"]), shape[0]
            limit = np.sqrt(6.0 / ((c + f) * k * k))
            layer = ConvLayer(rng.uniform(-limit, limit, (f, c, k, k)), np.zeros(f))
        elif kind == "pool":
            layer = MaxPoolLayer(int(desc["size"]))
        elif kind == "dense":
            fan_in, fan_out = int(np.prod(shape)), int(desc["outputs"])
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            layer = DenseLayer(rng.uniform(-limit, limit, (fan_in, fan_out)), np.zeros(fan_out))
        else:
            raise ValueError(f"unknown layer type {kind!r}")
        shape = layer.output_shape(shape)
        layers.append(layer)
    bp = np.zeros(input_shape) if b_prime is None else np.array(b_prime, dtype=DTYPE)
    return ConvEnergyParams(layers, bp)


def _as_batch(params: ConvEnergyParams, x):
    x = np.asarray(x, dtype=DTYPE)
    if x.shape == params.input_shape:
        return x[None], True
    if x.ndim == 4 and x.shape[1:] == params.input_shape:
        return x, False
    raise ValueError(f"input shape {x.shape} does not match model input {params.input_shape}")


def _forward(params, x):
    hs, caches = [x], []
    for layer in params.layers:
        h, cache = layer.forward(hs[-1])
        hs.append(h)
        caches.append(cache)
    return hs, caches


def _sweep(params, hs, caches):
    """Score sweep from ``u_L = 1`` down to ``u_0``; also returns the gated ``a_l``."""
    us = [None] * (len(params.layers) + 1)
    gated = [None] * len(params.layers)
    us[-1] = np.ones_like(hs[-1])
    for l in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[l]
        if layer.kind == "pool":
            us[l] = layer.route(us[l + 1], caches[l])
        else:
            gated[l] = caches[l][1] * us[l + 1]
            us[l] = layer.linear_t(gated[l]).reshape(hs[l].shape)
    return us, gated


def conv_energy(params: ConvEnergyParams, x):
    """Energy and the cached activations ``[h_0, ..., h_L]``."""
    xb, single = _as_batch(params, x)
    hs, _ = _forward(params, xb)
    n = xb.shape[0]
    diff = (xb - params.b_prime).reshape(n, -1)
    energy = 0.5 * np.sum(diff * diff, axis=1) - hs[-1].reshape(n, -1).sum(axis=1)
    check_finite(energy, "conv energy")
    if single:
        return float(energy[0]), [h[0] for h in hs]
    return energy, hs


def conv_score(params: ConvEnergyParams, x) -> np.ndarray:
    xb, single = _as_batch(params, x)
    hs, caches = _forward(params, xb)
    us, _ = _sweep(params, hs, caches)
    score = check_finite((xb - params.b_prime) - us[0], "conv score")
    return score[0] if single else score


def conv_reconstruct(params: ConvEnergyParams, x) -> np.ndarray:
    """``f(x) = x - grad_x E``, evaluated as ``u_0 + b'``."""
    xb, single = _as_batch(params, x)
    hs, caches = _forward(params, xb)
    us, _ = _sweep(params, hs, caches)
    f = check_finite(us[0] + params.b_prime, "conv reconstruction")
    return f[0] if single else f


def conv_param_grad(params: ConvEnergyParams, x_clean, x_noisy):
    """Loss ``0.5 * sum ||x_clean - f(x_noisy)||^2`` and its parameter gradient."""
    xc, _ = _as_batch(params, x_clean)
    xn, _ = _as_batch(params, x_noisy)
    if xc.shape != xn.shape:
        raise ValueError("clean and noisy batches differ in shape")
    hs, caches = _forward(params, xn)
    us, gated = _sweep(params, hs, caches)
    resid = us[0] + params.b_prime - xc
    loss = 0.5 * float(np.sum(resid * resid))

    grads = params.zeros_like()
    gparams = [layer.params() for layer in grads.layers]
    grads.b_prime[...] = resid.sum(axis=0)

    L = len(params.layers)
    # adjoint of the score sweep, bottom to top
    u_bar = resid
    z_bar = [None] * L
    for l in range(L):
        layer = params.layers[l]
        if layer.kind == "pool":
            u_bar = layer.gather(u_bar, caches[l])
            continue
        s = caches[l][1]
        layer.grad_linear_t(gated[l], u_bar, gparams[l])
        a_bar = layer.linear(u_bar)
        z_bar[l] = a_bar * us[l + 1] * s * (1.0 - s)
        u_bar = a_bar * s

    # adjoint of the forward pass, top to bottom; h_L does not enter f
    h_bar = np.zeros_like(hs[-1])
    for l in range(L - 1, -1, -1):
        layer = params.layers[l]
        if layer.kind == "pool":
            h_bar = layer.route(h_bar, caches[l])
            continue
        s = caches[l][1]
        zt = z_bar[l] + h_bar * s
        layer.grad_linear(hs[l], zt, gparams[l])
        h_bar = layer.linear_t(zt).reshape(hs[l].shape)

    for name, t in grads.tensors().items():
        check_finite(t, f"conv gradient {name}")
    return loss, grads

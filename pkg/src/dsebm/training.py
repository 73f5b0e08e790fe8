"""Denoising score-matching training for any of the energy models.

The model's reconstruction ``f(x) = x - grad_x E(x)`` is regressed onto clean
inputs from Gaussian-corrupted copies, using minibatch SGD with momentum.
"""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .conv import init_conv
from .dense import init_dense
from .numerics import DTYPE, NumericalError, RngStream
from .recurrent import init_recurrent

log = logging.getLogger(__name__)


class TrainingDivergence(NumericalError):
    pass


@dataclass
class TrainConfig:
    noise_sigma: float = 0.1
    batch_size: int = 128
    epochs: int = 100
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    normalization: str = "zscore"

    def __post_init__(self):
        if not self.noise_sigma > 0:
            raise ValueError("noise_sigma must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.normalization not in ("zscore", "none"):
            raise ValueError("normalization must be 'zscore' or 'none'")

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        casts = {"noise_sigma": float, "batch_size": int, "epochs": int,
                 "learning_rate": float, "momentum": float, "seed": int, "normalization": str}
        return cls(**{k: casts[k](v) for k, v in values.items()})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainTrace:
    objective: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    checksum: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def param_checksum(model) -> str:
    h = hashlib.sha256()
    for name, t in model.tensors().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(t, dtype="<f8").tobytes())
    return h.hexdigest()


def _is_sequence_batch(x) -> bool:
    return isinstance(x, list)


def corrupt(x, sigma: float, rng: RngStream):
    """``x + eps`` with ``eps ~ N(0, sigma^2 I)``; lists of sequences are corrupted stepwise."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if _is_sequence_batch(x):
        return [corrupt(s, sigma, rng) for s in x]
    x = np.asarray(x, dtype=DTYPE)
    if sigma == 0:
        return x.copy()
    return x + rng.normal(0.0, sigma, x.shape)


def _sq_residuals(model, clean, recon) -> np.ndarray:
    if _is_sequence_batch(clean):
        return np.array([np.sum((c - r) ** 2) for c, r in zip(clean, recon)])
    diff = (np.asarray(clean) - recon).reshape(len(clean), -1)
    return np.sum(diff * diff, axis=1)


def dae_objective(model, batch, sigma: float, rng: RngStream) -> float:
    """Mean over the batch of ``||x - f(x + eps)||^2``, one noise draw per item."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    noisy = corrupt(batch, sigma, rng)
    value = float(np.mean(_sq_residuals(model, batch, model.reconstruct(noisy))))
    if not np.isfinite(value):
        raise NumericalError("non-finite reconstruction")
    return value


def _take(items, idx):
    if _is_sequence_batch(items):
        return [items[i] for i in idx]
    return items[idx]


def train(model, items, config: TrainConfig):
    """Minibatch SGD with momentum on the denoising objective.

    ``items`` holds training inliers only: an ``(n, ...)`` array or a list of
    ``(T, d)`` sequences. The model is updated in place and returned with its
    trace.
    """
    n = len(items)
    if n == 0:
        raise ValueError("no training items")
    rng = RngStream(config.seed).spawn(1)
    tensors = model.tensors()
    velocity = {k: np.zeros_like(v) for k, v in tensors.items()}
    trace = TrainTrace()
    for epoch in range(config.epochs):
        start = time.perf_counter()
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            clean = _take(items, idx)
            noisy = corrupt(clean, config.noise_sigma, rng)
            try:
                loss, grads = model.loss_grad(clean, noisy)
            except NumericalError as exc:
                raise TrainingDivergence(f"epoch {epoch + 1}: {exc}") from exc
            if not np.isfinite(loss):
                raise TrainingDivergence(f"epoch {epoch + 1}: objective became non-finite")
            total += 2.0 * loss  # loss_grad returns half the squared error
            scale = config.learning_rate / len(idx)
            for name, g in grads.tensors().items():
                v = velocity[name]
                v *= config.momentum
                v -= scale * g
                tensors[name] += v
        trace.objective.append(total / n)
        trace.seconds.append(time.perf_counter() - start)
        log.info("epoch %d objective %.6g", epoch + 1, trace.objective[-1])
    trace.checksum = param_checksum(model)
    return model, trace


def build_model(arch: str, sample_shape, rng: RngStream, b_prime=None, **options):
    """Fresh model for ``arch`` in {"dense", "recurrent", "conv"}.

    options: dense ``hidden=[K_1, ...]``; recurrent ``k_ebm``, ``k_rnn``;
    conv ``layers=[{"type": ...}, ...]``.
    """
    if arch == "dense":
        hidden = list(options.get("hidden", [16]))
        return init_dense([int(sample_shape[0])] + hidden, rng, b_prime)
    if arch == "recurrent":
        return init_recurrent(int(sample_shape[-1]), int(options.get("k_ebm", 16)),
                              int(options.get("k_rnn", 8)), rng, b_prime)
    if arch == "conv":
        layers = options.get("layers") or [
            {"type": "conv", "filters": 4, "size": 3},
            {"type": "pool", "size": 2},
            {"type": "dense", "outputs": 16},
        ]
        return init_conv(tuple(sample_shape), layers, rng, b_prime)
    raise ValueError(f"unknown architecture {arch!r}")


def fit(arch: str, items, config: TrainConfig, **options):
    """Normalize, initialize and train; returns ``(model, normalizer, trace)``.

    ``b'`` starts at the per-feature mean of the (normalized) training data.
    """
    from .datasets import Normalizer

    if config.normalization == "zscore":
        normalizer = Normalizer.fit(items)
    else:
        normalizer = Normalizer.identity(items)
    data = normalizer.apply(items)
    if _is_sequence_batch(data):
        mean, shape = np.concatenate(data).mean(axis=0), data[0].shape
    else:
        mean, shape = data.mean(axis=0), data.shape[1:]
    model = build_model(arch, shape, RngStream(config.seed).spawn(0), b_prime=mean, **options)
    model, trace = train(model, data, config)
    return model, normalizer, trace

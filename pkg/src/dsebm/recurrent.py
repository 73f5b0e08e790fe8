"""Recurrent energy model: one softplus-RBM energy per time step.

The step weights ``W`` are shared; the hidden and visible biases at step ``t``
are produced by an RNN from the hidden state *before* ``x^t`` is consumed::

    b^t  = W_bh  h^{t-1} + b
    b'^t = W_bph h^{t-1} + b'
    h^t  = softplus(W_hh h^{t-1} + W_hx x^t + b_h),   h^0 = h0

so the step parameters depend only on ``x^1 .. x^{t-1}``. The score used for
reconstruction is the per-step gradient with the step parameters held fixed.

A sequence is an array of shape ``(T, d)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import DTYPE, RngStream, check_finite, sigmoid, softplus

ARCH = "recurrent"

_NAMES = ("W", "b", "b_prime", "W_hh", "W_hx", "b_h", "W_bh", "W_bph", "h0")


@dataclass
class RecurrentEnergyParams:
    W: np.ndarray
    b: np.ndarray
    b_prime: np.ndarray
    W_hh: np.ndarray
    W_hx: np.ndarray
    b_h: np.ndarray
    W_bh: np.ndarray
    W_bph: np.ndarray
    h0: np.ndarray
    arch: str = field(default=ARCH, init=False)

    def __post_init__(self):
        for name in _NAMES:
            setattr(self, name, np.asarray(getattr(self, name), dtype=DTYPE))
        d, k = self.W.shape
        r = self.W_hh.shape[0]
        expected = {
            "b": (k,), "b_prime": (d,), "W_hh": (r, r), "W_hx": (r, d), "b_h": (r,),
            "W_bh": (k, r), "W_bph": (d, r), "h0": (r,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def input_dim(self) -> int:
        return self.W.shape[0]

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in _NAMES}

    def descriptor(self) -> dict:
        return {"d": self.W.shape[0], "k_ebm": self.W.shape[1], "k_rnn": self.W_hh.shape[0]}

    @classmethod
    def from_tensors(cls, descriptor: dict, tensors: dict[str, np.ndarray]) -> "RecurrentEnergyParams":
        return cls(**{name: tensors[name] for name in _NAMES})

    def zeros_like(self) -> "RecurrentEnergyParams":
        return RecurrentEnergyParams(**{n: np.zeros_like(v) for n, v in self.tensors().items()})

    def energy(self, seqs):
        return np.array([seq_energy(self, s)[0] for s in seqs])

    def score(self, seqs):
        return [seq_score(self, s) for s in seqs]

    def reconstruct(self, seqs):
        return [seq_reconstruct(self, s) for s in seqs]

    def loss_grad(self, clean, noisy):
        loss, grads = 0.0, self.zeros_like()
        for c, x in zip(clean, noisy):
            l, g = seq_param_grad(self, c, x)
            loss += l
            for name, t in grads.tensors().items():
                t += getattr(g, name)
        return loss, grads


def init_recurrent(d: int, k_ebm: int, k_rnn: int, rng: RngStream, b_prime=None) -> RecurrentEnergyParams:
    def glorot(shape):
        limit = np.sqrt(6.0 / sum(shape))
        return rng.uniform(-limit, limit, shape)

    bp = np.zeros(d) if b_prime is None else np.array(b_prime, dtype=DTYPE)
    return RecurrentEnergyParams(
        W=glorot((d, k_ebm)),
        b=np.zeros(k_ebm),
        b_prime=bp,
        W_hh=glorot((k_rnn, k_rnn)),
        W_hx=glorot((k_rnn, d)),
        b_h=np.zeros(k_rnn),
        W_bh=glorot((k_ebm, k_rnn)),
        W_bph=glorot((d, k_rnn)),
        h0=np.zeros(k_rnn),
    )


def _check_seq(params, seq) -> np.ndarray:
    seq = np.asarray(seq, dtype=DTYPE)
    if seq.ndim != 2 or seq.shape[0] < 1 or seq.shape[1] != params.input_dim:
        raise ValueError(f"sequence shape {seq.shape} does not match step dimension {params.input_dim}")
    return seq


def _roll(params, seq):
    """Hidden states h^0..h^T, pre-activations a^1..a^T and step biases."""
    T = seq.shape[0]
    hs = [params.h0]
    pre = []
    for t in range(T):
        a = params.W_hh @ hs[-1] + params.W_hx @ seq[t] + params.b_h
        pre.append(a)
        hs.append(softplus(a))
    hprev = np.array(hs[:-1])  # h^{t-1} for each step, shape (T, k_rnn)
    b_t = hprev @ params.W_bh.T + params.b
    bp_t = hprev @ params.W_bph.T + params.b_prime
    return hs, pre, b_t, bp_t


def rnn_roll(params: RecurrentEnergyParams, seq) -> list[tuple[np.ndarray, np.ndarray]]:
    """Adaptive ``(b^t, b'^t)`` for every step."""
    seq = _check_seq(params, seq)
    _, _, b_t, bp_t = _roll(params, seq)
    return list(zip(b_t, bp_t))


def seq_energy(params: RecurrentEnergyParams, seq):
    """Total energy and per-step energies."""
    seq = _check_seq(params, seq)
    _, _, b_t, bp_t = _roll(params, seq)
    diff = seq - bp_t
    per_step = 0.5 * np.sum(diff * diff, axis=1) - np.sum(softplus(seq @ params.W + b_t), axis=1)
    check_finite(per_step, "sequence energy")
    return float(per_step.sum()), per_step


def seq_score(params: RecurrentEnergyParams, seq) -> np.ndarray:
    """Per-step input gradient with the step parameters frozen, shape ``(T, d)``."""
    seq = _check_seq(params, seq)
    _, _, b_t, bp_t = _roll(params, seq)
    gates = sigmoid(seq @ params.W + b_t)
    return check_finite((seq - bp_t) - gates @ params.W.T, "sequence score")


def seq_reconstruct(params: RecurrentEnergyParams, seq) -> np.ndarray:
    """Per step ``x^t - score^t``, evaluated as ``W sigmoid(W^T x^t + b^t) + b'^t``."""
    seq = _check_seq(params, seq)
    _, _, b_t, bp_t = _roll(params, seq)
    gates = sigmoid(seq @ params.W + b_t)
    return check_finite(gates @ params.W.T + bp_t, "sequence reconstruction")


def seq_param_grad(params: RecurrentEnergyParams, seq_clean, seq_noisy):
    """Loss ``0.5 * sum_t ||x_clean^t - f_t(x_noisy)||^2`` and its gradient (BPTT)."""
    xc = _check_seq(params, seq_clean)
    xn = _check_seq(params, seq_noisy)
    if xc.shape != xn.shape:
        raise ValueError("clean and noisy sequences differ in shape")
    T = xn.shape[0]
    hs, pre, b_t, bp_t = _roll(params, xn)
    s = sigmoid(xn @ params.W + b_t)
    resid = s @ params.W.T + bp_t - xc
    loss = 0.5 * float(np.sum(resid * resid))

    g = params.zeros_like()
    # f_t = W s_t + b'^t,  s_t = sigmoid(W^T x_t + b^t)
    g.W += resid.T @ s
    z_bar = (resid @ params.W) * s * (1.0 - s)
    g.W += xn.T @ z_bar
    hprev = np.array(hs[:-1])
    g.b += z_bar.sum(axis=0)
    g.W_bh += z_bar.T @ hprev
    g.b_prime += resid.sum(axis=0)
    g.W_bph += resid.T @ hprev
    # adjoint of h^{t-1} from the step-t biases
    h_bar_bias = z_bar @ params.W_bh + resid @ params.W_bph

    h_bar = np.zeros_like(params.h0)  # h^T feeds nothing
    for t in range(T, 0, -1):
        # h_bar holds the adjoint of h^t; hs[t] = softplus(pre[t-1])
        a_bar = h_bar * sigmoid(pre[t - 1])
        g.W_hh += np.outer(a_bar, hs[t - 1])
        g.W_hx += np.outer(a_bar, xn[t - 1])
        g.b_h += a_bar
        h_bar = params.W_hh.T @ a_bar + h_bar_bias[t - 1]
    g.h0 += h_bar

    for name, t in g.tensors().items():
        check_finite(t, f"recurrent gradient {name}")
    return loss, g

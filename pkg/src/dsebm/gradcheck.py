"""Finite-difference checks of every analytic gradient on random small models."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conv import conv_energy, conv_param_grad, conv_score, init_conv
from .dense import dense_forward, dense_param_grad, dense_score, init_dense
from .numerics import RngStream, finite_diff_grad, rel_error
from .recurrent import init_recurrent, seq_energy, seq_param_grad, seq_score

INPUT_TOL = 1e-6
PARAM_TOL = 1e-5


@dataclass
class CheckResult:
    arch: str
    instance: int
    input_error: float
    param_error: float

    @property
    def passed(self) -> bool:
        return self.input_error <= INPUT_TOL and self.param_error <= PARAM_TOL


def _jitter(model, rng: RngStream, scale=0.5):
    for t in model.tensors().values():
        t += scale * rng.normal(size=t.shape)
    return model


def param_fd_error(model, loss_grad, clean, noisy) -> float:
    """Worst per-tensor relative error between analytic and numerical loss gradients."""
    _, grads = loss_grad(model, clean, noisy)
    analytic = grads.tensors()
    worst = 0.0
    for name, t in model.tensors().items():
        orig = t.copy()

        def loss(v, t=t, orig=orig):
            t[...] = v
            try:
                return loss_grad(model, clean, noisy)[0]
            finally:
                t[...] = orig

        worst = max(worst, rel_error(analytic[name], finite_diff_grad(loss, orig)))
    return worst


def dense_instance(rng: RngStream):
    d = int(rng.choice(9, 1)[0]) + 2
    depth = int(rng.choice(3, 1)[0]) + 1
    sizes = [d] + [int(k) + 1 for k in rng.choice(6, depth, replace=True)]
    model = _jitter(init_dense(sizes, rng), rng)
    x, c = rng.normal(size=d), rng.normal(size=d)
    in_err = rel_error(dense_score(model, x), finite_diff_grad(lambda v: dense_forward(model, v)[0], x))
    return model, in_err, param_fd_error(model, dense_param_grad, c, x)


def recurrent_instance(rng: RngStream):
    d = int(rng.choice(4, 1)[0]) + 1
    T = int(rng.choice(4, 1)[0]) + 1
    k_ebm = int(rng.choice(4, 1)[0]) + 1
    k_rnn = int(rng.choice(4, 1)[0]) + 1
    model = _jitter(init_recurrent(d, k_ebm, k_rnn, rng), rng)
    x, c = rng.normal(size=(T, d)), rng.normal(size=(T, d))
    # the score freezes each step's parameters, so check one step at a time
    scores = seq_score(model, x)
    in_err = 0.0
    for t in range(T):
        def step_energy(v, t=t):
            xt = x.copy()
            xt[t] = v
            return seq_energy(model, xt)[1][t]

        in_err = max(in_err, rel_error(scores[t], finite_diff_grad(step_energy, x[t])))
    return model, in_err, param_fd_error(model, seq_param_grad, c, x)


def conv_instance(rng: RngStream):
    channels = int(rng.choice(2, 1)[0]) + 1
    layouts = [
        (6, [{"type": "conv", "filters": 2, "size": 3}]),
        (7, [{"type": "conv", "filters": 2, "size": 3}, {"type": "conv", "filters": 1, "size": 2}]),
        (8, [{"type": "conv", "filters": 2, "size": 3}, {"type": "pool", "size": 2},
             {"type": "dense", "outputs": 3}]),
        (8, [{"type": "conv", "filters": 2, "size": 3}, {"type": "pool", "size": 2},
             {"type": "conv", "filters": 2, "size": 2}, {"type": "dense", "outputs": 2}]),
    ]
    side, layers = layouts[int(rng.choice(len(layouts), 1)[0])]
    shape = (channels, side, side)
    model = _jitter(init_conv(shape, layers, rng), rng)
    x, c = rng.normal(size=shape), rng.normal(size=shape)
    in_err = rel_error(conv_score(model, x), finite_diff_grad(lambda v: conv_energy(model, v)[0], x))
    return model, in_err, param_fd_error(model, conv_param_grad, c, x)


SUITES = {"dense": dense_instance, "recurrent": recurrent_instance, "conv": conv_instance}


def run_suites(seed: int = 0, instances: int = 5, archs=tuple(SUITES)) -> list[CheckResult]:
    results = []
    for a, arch in enumerate(archs):
        rng = RngStream(seed).spawn(a)
        for i in range(instances):
            _, in_err, p_err = SUITES[arch](rng)
            results.append(CheckResult(arch, i, in_err, p_err))
    return results


def summarize(results: list[CheckResult]) -> dict:
    """Maximum input and parameter error per architecture."""
    table = {}
    for r in results:
        row = table.setdefault(r.arch, {"input": 0.0, "param": 0.0, "passed": True})
        row["input"] = max(row["input"], r.input_error)
        row["param"] = max(row["param"], r.param_error)
        row["passed"] &= r.passed
    return table

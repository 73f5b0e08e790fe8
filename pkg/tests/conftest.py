import numpy as np
import pytest

from dsebm.numerics import RngStream, finite_diff_grad

ACCEPTANCE_LINES = []


def param_fd(model, loss_fn):
    """Numerical gradient of ``loss_fn()`` w.r.t. every tensor of ``model``."""
    out = {}
    for name, t in model.tensors().items():
        orig = t.copy()

        def f(v, t=t, orig=orig):
            t[...] = v
            try:
                return loss_fn()
            finally:
                t[...] = orig

        out[name] = finite_diff_grad(f, orig)
    return out


def jitter(model, rng, scale=0.5):
    for t in model.tensors().values():
        t += scale * rng.normal(size=t.shape)
    return model


@pytest.fixture
def rng():
    return RngStream(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

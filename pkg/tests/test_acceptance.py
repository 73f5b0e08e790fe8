"""Binding acceptance criteria AC1-AC7; one summary line each is printed after the run."""

import math
import os
import time
from contextlib import contextmanager

import numpy as np
import pytest
from scipy.integrate import quad

from conftest import ACCEPTANCE_LINES
from dsebm import cli, gradcheck
from dsebm.conv import ConvLayer, MaxPoolLayer, maxpool_forward
from dsebm.datasets import make_contaminated, synth_bimodal_1d, synth_gaussians
from dsebm.dense import DenseEnergyParams, dense_reconstruct
from dsebm.detection import choose_threshold, evaluate, score_samples
from dsebm.numerics import RngStream
from dsebm.training import TrainConfig, fit


@contextmanager
def criterion(tag, title):
    detail = {}
    start = time.perf_counter()
    try:
        yield detail
    except BaseException:
        ACCEPTANCE_LINES.append(f"{tag} FAIL  {title}  {detail.get('msg', '')}".rstrip())
        raise
    secs = time.perf_counter() - start
    ACCEPTANCE_LINES.append(f"{tag} PASS  {title}  {detail.get('msg', '')} [{secs:.1f}s]")


def run_detection(ds, rho, config, **options):
    """Train on the train split, set both thresholds at rho on the test split, evaluate."""
    model, norm, trace = fit("dense", ds.part("train").items, config, **options)
    test = ds.part("test")
    report = score_samples(model, norm.apply(test.items), test.ids, test.is_outlier)
    report.set_thresholds(rho)
    return model, norm, trace, report, evaluate(report, sweep=False)


@pytest.fixture(scope="module")
def bimodal():
    ds = make_contaminated(synth_bimodal_1d(1000, seed=0), ["0"], 0.2, seed=0)
    cfg = TrainConfig(noise_sigma=0.3, batch_size=32, epochs=100, learning_rate=0.05, seed=0)
    return run_detection(ds, 0.2, cfg, hidden=[32])


def test_ac1_gradient_oracles():
    with criterion("AC1", "gradient oracle suites") as d:
        start = time.perf_counter()
        results = gradcheck.run_suites(seed=2024, instances=20)
        elapsed = time.perf_counter() - start
        table = gradcheck.summarize(results)
        d["msg"] = "; ".join(f"{a} in={r['input']:.1e} par={r['param']:.1e}" for a, r in table.items())
        assert len(results) == 60
        assert all(r.input_error <= 1e-6 for r in results)
        assert all(r.param_error <= 1e-5 for r in results)
        assert elapsed < 120


def test_ac2_one_layer_closed_form():
    with criterion("AC2", "one-layer reconstruction closed form") as d:
        rng = RngStream(77)
        worst = 0.0
        for _ in range(100):
            n_in = int(rng.choice(10, 1)[0]) + 1
            n_hid = int(rng.choice(10, 1)[0]) + 1
            W, b, bp = rng.normal(size=(n_in, n_hid)), rng.normal(size=n_hid), rng.normal(size=n_in)
            x = rng.normal(size=n_in)
            closed = W @ (1.0 / (1.0 + np.exp(-(W.T @ x + b)))) + bp
            got = dense_reconstruct(DenseEnergyParams([W], [b], bp), x)
            worst = max(worst, float(np.max(np.abs(got - closed))))
        d["msg"] = f"max abs diff {worst:.1e}"
        assert worst <= 1e-12


def test_ac3_adjointness_and_routing():
    with criterion("AC3", "conv adjointness and pool routing") as d:
        rng = RngStream(303)
        worst = 0.0
        for _ in range(200):
            C, F, k = (int(v) + 1 for v in rng.choice(3, 3, replace=True))
            H, W = (int(v) + k for v in rng.choice(6, 2, replace=True))
            layer = ConvLayer(rng.normal(size=(F, C, k, k)), np.zeros(F))
            x = rng.normal(size=(1, C, H, W))
            y = rng.normal(size=(1, F, H - k + 1, W - k + 1))
            lhs, rhs = np.sum(layer.linear(x) * y), np.sum(x * layer.linear_t(y))
            worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300))

            p = int(rng.choice(3, 1)[0]) + 1
            hp, wp = (int(v) + 1 for v in rng.choice(4, 2, replace=True))
            h = rng.normal(size=(C, hp * p, wp * p))
            if rng.uniform() < 0.2:
                h = np.round(h)  # exercise ties
            pool = MaxPoolLayer(p)
            _, cache = pool.forward(h[None])
            u = rng.normal(size=(1, C, hp, wp))
            routed = pool.route(u, cache)[0]
            _, (rows, cols) = maxpool_forward(p, h)
            expected = np.zeros_like(h)
            for c in range(C):
                expected[c][rows[c], cols[c]] = u[0, c]
            assert np.array_equal(routed, expected)
            assert np.allclose(routed.sum(axis=(1, 2)), u[0].sum(axis=(1, 2)), rtol=1e-12, atol=1e-12)
        d["msg"] = f"max adjoint rel err {worst:.1e}"
        assert worst <= 1e-10


def test_ac4_density_energy_equivalence(bimodal):
    with criterion("AC4", "density and energy thresholds flag identical sets") as d:
        model = bimodal[0]
        shift = -float(np.min(model.energy(np.linspace(-6, 6, 2001)[:, None])))
        # integrate exp(-(E + shift)) to keep the integrand O(1); log Z adds the shift back
        z_shifted, err = quad(lambda v: math.exp(-(model.energy(np.array([[v]]))[0] + shift)),
                              -np.inf, np.inf, limit=200)
        log_z = math.log(z_shifted) - shift
        rng = RngStream(404)
        xs = rng.uniform(-8, 8, size=(2000, 1))
        energy = model.energy(xs)
        p = np.exp(-energy - log_z)
        disagreements = 0
        for _ in range(20):
            p_th = math.exp(rng.uniform(math.log(p.min()), math.log(p.max())))
            e_th = -math.log(p_th) - log_z
            disagreements += int(np.sum((p < p_th) != (energy > e_th)))
        d["msg"] = f"log Z={log_z:.4f} (quad err {err:.1e}), disagreements={disagreements}"
        assert disagreements == 0


def test_ac5_gaussian_detection():
    with criterion("AC5", "two-Gaussian end-to-end detection") as d:
        start = time.perf_counter()
        ds = make_contaminated(synth_gaussians(2000, 2, 6.0, seed=0), ["0"], 0.2, seed=0)
        cfg = TrainConfig(noise_sigma=0.1, batch_size=32, epochs=50, learning_rate=0.01, seed=0)
        _, _, trace, _, ev = run_detection(ds, 0.2, cfg, hidden=[16])
        elapsed = time.perf_counter() - start
        f1e, f1r = ev.results["energy"].f1, ev.results["recon"].f1
        d["msg"] = (f"objective {trace.objective[0]:.3f}->{min(trace.objective):.3f}, "
                    f"F1 energy={f1e:.3f} recon={f1r:.3f}")
        assert min(trace.objective) <= 0.5 * trace.objective[0]
        assert f1e >= 0.9 and f1r >= 0.9
        assert f1e >= f1r - 0.02
        assert elapsed < 300


def test_ac6_reconstruction_false_positive(bimodal):
    with criterion("AC6", "between-mode point: low error, high energy") as d:
        model, norm, _, report, _ = bimodal
        modes = norm.apply(np.array([[-4.0], [4.0]]))[:, 0]
        grid = np.linspace(modes[0], modes[1], 4001)[:, None]
        energy = model.energy(grid)
        inner = slice(1, -1)
        peaks = np.flatnonzero((energy[inner] > energy[:-2]) & (energy[inner] >= energy[2:])) + 1
        assert len(peaks) >= 1
        x2 = grid[peaks[np.argmax(energy[peaks])]]
        e2 = float(model.energy(x2[None])[0])
        r2 = float(np.sum(model.score(x2[None]) ** 2))
        e_th, r_th = report.thresholds["energy"], report.thresholds["recon"]
        d["msg"] = (f"x={norm.mean[0] + norm.std[0] * x2[0]:.3f} E={e2:.4f} > {e_th:.4f}, "
                    f"err={r2:.2e} < {r_th:.2e}")
        assert e2 > e_th
        assert r2 < r_th


def _cli_pipeline(workdir):
    old = os.getcwd()
    os.chdir(workdir)
    try:
        assert cli.main(["synth", "--n", "300", "--seed", "7", "--out-dir", "data"]) == 0
        assert cli.main(["train", "--arch", "dense", "--data", "data/train.csv", "--out", "m.dsebm",
                         "--sigma", "0.1", "--seed", "7", "--epochs", "10", "--batch-size", "32"]) == 0
        assert cli.main(["score", "--model", "m.dsebm", "--data", "data/test.csv", "--out", "scores.tsv",
                         "--inlier-classes", "0", "--rho", "0.2"]) == 0
    finally:
        os.chdir(old)
    return {name: (workdir / name).read_bytes()
            for name in ("data/train.csv", "data/test.csv", "m.dsebm", "scores.tsv")}


def test_ac7_determinism(tmp_path):
    with criterion("AC7", "bit-identical artifacts across runs") as d:
        (tmp_path / "a").mkdir()
        (tmp_path / "b").mkdir()
        a, b = _cli_pipeline(tmp_path / "a"), _cli_pipeline(tmp_path / "b")
        same = [k for k in a if a[k] == b[k]]
        d["msg"] = f"{len(same)}/{len(a)} files identical"
        assert same == list(a)


@pytest.mark.skip(reason="optional: needs user-supplied KDD99 data")
def test_ac8_kdd99():
    pass

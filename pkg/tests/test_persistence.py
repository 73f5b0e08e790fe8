import json

import numpy as np
import pytest

from conftest import jitter
from dsebm.conv import init_conv
from dsebm.datasets import Normalizer
from dsebm.dense import init_dense
from dsebm.detection import score_samples
from dsebm.numerics import RngStream
from dsebm.persistence import MAGIC, ArtifactError, ModelArtifact, dumps, load_model, loads, save_model
from dsebm.recurrent import init_recurrent


def models():
    r = RngStream(31)
    dense = jitter(init_dense([3, 4, 2], r), r)
    rec = jitter(init_recurrent(2, 3, 4, r), r)
    conv = jitter(init_conv((1, 6, 6), [{"type": "conv", "filters": 2, "size": 3},
                                         {"type": "pool", "size": 2},
                                         {"type": "dense", "outputs": 3}], r), r)
    return {
        "dense": (dense, r.normal(size=(5, 3))),
        "recurrent": (rec, [r.normal(size=(T, 2)) for T in (2, 5)]),
        "conv": (conv, r.normal(size=(4, 1, 6, 6))),
    }


CASES = models()


@pytest.fixture(params=sorted(CASES))
def case(request):
    model, data = CASES[request.param]
    norm = Normalizer(np.arange(1.0, 1.0 + np.shape(model.b_prime)[-1]), np.full(np.shape(model.b_prime)[-1], 2.0))
    return request.param, ModelArtifact(model, norm, {"epochs": 3, "seed": 0}), data


def test_round_trip_bytes(case, tmp_path):
    _, art, _ = case
    save_model(art, tmp_path / "m.bin")
    again = load_model(tmp_path / "m.bin")
    save_model(again, tmp_path / "m2.bin")
    assert (tmp_path / "m.bin").read_bytes() == (tmp_path / "m2.bin").read_bytes()
    assert again.config == art.config
    np.testing.assert_array_equal(again.normalizer.std, art.normalizer.std)


def test_reloaded_scores_identical(case):
    _, art, data = case
    again = loads(dumps(art))
    a, b = score_samples(art.model, data), score_samples(again.model, data)
    np.testing.assert_array_equal(a.energy, b.energy)
    np.testing.assert_array_equal(a.recon_error, b.recon_error)


def test_corrupted_byte(case):
    _, art, _ = case
    raw = bytearray(dumps(art))
    raw[-3] ^= 0x01
    with pytest.raises(ArtifactError, match="checksum"):
        loads(bytes(raw))


def test_truncated(case):
    _, art, _ = case
    raw = dumps(art)
    with pytest.raises(ArtifactError, match="payload"):
        loads(raw[:-8])
    with pytest.raises(ArtifactError):
        loads(raw[: len(MAGIC) + 5])


def test_arch_mismatch(case):
    arch, art, _ = case
    other = "dense" if arch != "dense" else "conv"
    with pytest.raises(ArtifactError, match="expected"):
        loads(dumps(art), expect_arch=other)
    assert loads(dumps(art), expect_arch=arch).arch == arch


def test_version_mismatch():
    art = ModelArtifact(CASES["dense"][0])
    raw = dumps(art)
    end = raw.index(b"\n", len(MAGIC))
    header = json.loads(raw[len(MAGIC):end])
    header["version"] = 99
    bad = MAGIC + json.dumps(header, sort_keys=True).encode() + raw[end:]
    with pytest.raises(ArtifactError, match="version 99"):
        loads(bad)


def test_not_a_model():
    with pytest.raises(ArtifactError, match="not a DSEBM"):
        loads(b"hello\n")


def test_without_normalizer():
    again = loads(dumps(ModelArtifact(CASES["dense"][0])))
    assert again.normalizer is None

import struct
import zlib
from fractions import Fraction

import numpy as np
import pytest

from adnet.errors import CompatibilityError, FormatError, StorageError
from adnet.graph import forward
from adnet.model import ModelConfig, build_adnet, param_count
from adnet.optim import AdamConfig, adam_step
from adnet.weights_io import dumps, load, loads, save

SMALL = ModelConfig(filter_scale=Fraction(1, 16))


@pytest.fixture(scope="module")
def small():
    return build_adnet(SMALL, 5, dtype=np.float64)


def test_round_trip_bit_exact(small, tmp_path):
    _, store = small
    save(store, SMALL.fingerprint(), tmp_path / "w.adnw")
    back, fp, step = load(tmp_path / "w.adnw", SMALL.fingerprint())
    assert fp == SMALL.fingerprint() and step == 0
    assert back.names() == store.names()
    for name in store:
        assert back[name].dtype == store[name].dtype
        assert back[name].tobytes() == store[name].tobytes()
        assert back.entry(name).trainable == store.entry(name).trainable


def test_round_trip_forward_identical(small, tmp_path):
    graph, store = small
    save(store, SMALL.fingerprint(), tmp_path / "w.adnw")
    back, _, _ = load(tmp_path / "w.adnw")
    x = np.random.default_rng(0).uniform(size=(2, 3, 100, 100))
    np.testing.assert_array_equal(forward(graph, store, x)[0], forward(graph, back, x)[0])


def test_serialization_is_deterministic(small):
    _, store = small
    assert dumps(store, "fp") == dumps(store.copy(), "fp")


def test_full_model_size():
    _, store = build_adnet(ModelConfig(), 0)
    blob = dumps(store, ModelConfig().fingerprint())
    payload = param_count(store)[0] * 4
    assert payload < len(blob) < payload + 8 * 1024


def test_checkpoint_carries_moments(small):
    _, store = small
    store = store.copy()
    grads = {n: np.full_like(store[n], 0.5) for n in store.trainable_names()}
    cfg = AdamConfig()
    adam_step(store, grads, cfg)
    back, _, step, is_ckpt = loads(dumps(store, "fp", checkpoint=True, step=cfg.t))
    assert is_ckpt and step == 1
    name = store.trainable_names()[0]
    np.testing.assert_array_equal(back.entry(name).m, store.entry(name).m)
    np.testing.assert_array_equal(back.entry(name).v, store.entry(name).v)
    _, _, step0, plain = loads(dumps(store, "fp"))
    assert not plain and step0 == 0


@pytest.mark.parametrize("where", [0, 7, 40, 200, -5, -1])
def test_single_byte_corruption_detected(small, where):
    _, store = small
    blob = bytearray(dumps(store, "fp"))
    blob[where] ^= 0x01
    with pytest.raises(FormatError):
        loads(bytes(blob))


def test_every_byte_flip_detected():
    from adnet.graph import ParamStore

    store = ParamStore()
    store.add("w", np.arange(6, dtype=np.float32).reshape(2, 3))
    store.add("s", np.ones(2), trainable=False)
    blob = dumps(store, "fp")
    for i in range(len(blob)):
        bad = bytearray(blob)
        bad[i] ^= 0xFF
        with pytest.raises(FormatError):
            loads(bytes(bad))


@pytest.mark.parametrize("keep", [0, 10, 100, -1])
def test_truncation_detected(small, keep):
    _, store = small
    blob = dumps(store, "fp")
    with pytest.raises(FormatError):
        loads(blob[:keep])


def test_valid_crc_but_trailing_bytes():
    from adnet.graph import ParamStore

    store = ParamStore()
    store.add("w", np.ones(2))
    body = dumps(store, "fp")[:-4] + b"\x00"
    with pytest.raises(FormatError, match="trailing"):
        loads(body + struct.pack("<I", zlib.crc32(body)))


def test_fingerprint_mismatch(small, tmp_path):
    _, store = small
    save(store, SMALL.fingerprint(), tmp_path / "w.adnw")
    other = ModelConfig(filter_scale=Fraction(1, 8)).fingerprint()
    with pytest.raises(CompatibilityError):
        load(tmp_path / "w.adnw", other)


def test_missing_file(tmp_path):
    with pytest.raises(StorageError):
        load(tmp_path / "nope.adnw")


def test_header_layout(small):
    _, store = small
    blob = dumps(store, "sha256:abc")
    assert blob[:4] == b"ADNW"
    version, flags, fp_len = struct.unpack("<IBI", blob[4:13])
    assert (version, flags, fp_len) == (1, 0, 10)
    assert blob[13:23] == b"sha256:abc"

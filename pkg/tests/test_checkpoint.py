import numpy as np
import pytest

from tall.checkpoint import (
    BadMagicError,
    MetadataMismatchError,
    TruncatedCheckpointError,
    VersionMismatchError,
    load_checkpoint,
    save_checkpoint,
)
from tall.nn import ParamStore


def random_store(rng, n_tensors=None):
    store = ParamStore()
    n = int(rng.integers(1, 8)) if n_tensors is None else n_tensors
    for i in range(n):
        rank = int(rng.integers(0, 4))
        shape = tuple(int(d) for d in rng.integers(1, 5, size=rank))
        dtype = np.float32 if rng.random() < 0.3 else np.float64
        store.add(f"module{i}.weight", rng.standard_normal(shape).astype(dtype))
    return store


def test_save_load_save_idempotent(tmp_path):
    rng = np.random.default_rng(0)
    store = random_store(rng)
    meta = {"seed": 7, "step": 12, "config": {"d_model": 8}}
    p1, p2 = tmp_path / "a.tlcp", tmp_path / "b.tlcp"
    save_checkpoint(store, meta, p1)
    loaded, meta2 = load_checkpoint(p1)
    assert meta2 == meta
    save_checkpoint(loaded, meta2, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_fuzz_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(1)
    for i in range(100):
        store = random_store(rng)
        path = tmp_path / f"fuzz{i}.tlcp"
        save_checkpoint(store, {"i": i}, path)
        loaded, _ = load_checkpoint(path)
        assert loaded.names() == store.names()
        for name, t in store.items():
            other = loaded[name]
            assert other.data.dtype == t.data.dtype
            assert other.data.shape == t.data.shape
            assert other.data.tobytes() == t.data.tobytes()


def test_bad_magic(tmp_path):
    path = tmp_path / "x.tlcp"
    store = random_store(np.random.default_rng(2), 1)
    save_checkpoint(store, {}, path)
    blob = bytearray(path.read_bytes())
    blob[0] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(BadMagicError):
        load_checkpoint(path)


def test_version_mismatch(tmp_path):
    path = tmp_path / "x.tlcp"
    save_checkpoint(random_store(np.random.default_rng(3), 1), {}, path)
    blob = bytearray(path.read_bytes())
    blob[4] = 99
    path.write_bytes(bytes(blob))
    with pytest.raises(VersionMismatchError):
        load_checkpoint(path)


def test_truncated_tensor_table(tmp_path):
    path = tmp_path / "x.tlcp"
    save_checkpoint(random_store(np.random.default_rng(4), 3), {}, path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) - 5])
    with pytest.raises(TruncatedCheckpointError):
        load_checkpoint(path)


def test_metadata_echo_mismatch(tmp_path):
    path = tmp_path / "x.tlcp"
    save_checkpoint(random_store(np.random.default_rng(5), 1),
                    {"config_hash": "abc"}, path)
    store, _ = load_checkpoint(path, expect_meta={"config_hash": "abc"})
    with pytest.raises(MetadataMismatchError):
        load_checkpoint(path, expect_meta={"config_hash": "other"})


def test_scalar_tensor_roundtrip(tmp_path):
    store = ParamStore()
    store.add("s", np.float64(3.25))
    path = tmp_path / "s.tlcp"
    save_checkpoint(store, {}, path)
    loaded, _ = load_checkpoint(path)
    assert loaded["s"].data.shape == ()
    assert float(loaded["s"].data) == 3.25

import numpy as np
import pytest

from liveseg import litt


def test_round_trip(tmp_path):
    arr = np.random.default_rng(0).standard_normal((3, 5, 2)).astype(np.float32)
    litt.save_tensor(tmp_path / "t.litt", arr)
    back = litt.load_tensor(tmp_path / "t.litt")
    assert back.dtype == np.float32
    assert np.array_equal(back, arr)


def test_header_layout(tmp_path):
    litt.save_tensor(tmp_path / "t.litt", np.zeros((2, 3), dtype=np.float32))
    raw = (tmp_path / "t.litt").read_bytes()
    assert raw[:4] == b"LITT"
    assert int.from_bytes(raw[4:6], "little") == 1      # version
    assert int.from_bytes(raw[6:8], "little") == 2      # ndim
    assert int.from_bytes(raw[8:12], "little") == 2     # dim 0
    assert int.from_bytes(raw[12:16], "little") == 3    # dim 1
    assert len(raw) == 16 + 6 * 4


def test_truncated_payload_rejected(tmp_path):
    litt.save_tensor(tmp_path / "t.litt", np.zeros((4, 4), dtype=np.float32))
    raw = (tmp_path / "t.litt").read_bytes()
    (tmp_path / "bad.litt").write_bytes(raw[:-8])
    with pytest.raises(litt.LittError, match="payload"):
        litt.load_tensor(tmp_path / "bad.litt")


def test_bad_magic_rejected(tmp_path):
    (tmp_path / "bad.litt").write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(litt.LittError, match="not a LITT"):
        litt.load_tensor(tmp_path / "bad.litt")


def test_bundle_round_trip_and_hash_check(tmp_path):
    tensors = {"layer.w": np.ones((2, 2), dtype=np.float32),
               "layer.b": np.zeros(2, dtype=np.float32)}
    litt.save_bundle(tmp_path / "bundle", tensors, meta={"seed": 5})
    back, manifest = litt.load_bundle(tmp_path / "bundle")
    assert manifest["seed"] == 5
    assert set(back) == set(tensors)
    assert np.array_equal(back["layer.w"], tensors["layer.w"])

    # corrupt one byte of a payload: the recorded hash must catch it
    target = tmp_path / "bundle" / "layer.w.litt"
    raw = bytearray(target.read_bytes())
    raw[-1] ^= 0xFF
    target.write_bytes(bytes(raw))
    with pytest.raises(litt.LittError, match="hash mismatch"):
        litt.load_bundle(tmp_path / "bundle")

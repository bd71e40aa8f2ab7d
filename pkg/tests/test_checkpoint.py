import numpy as np
import pytest

from qase.checkpoint import CheckpointError, drop_tensors, load_checkpoint, read_manifest, save_checkpoint


def test_roundtrip_and_prefix(tmp_path):
    tensors = {"plm.a": np.arange(6.0).reshape(2, 3), "head.b": np.ones(4)}
    save_checkpoint(tmp_path / "c.ckpt", tensors, {"k": 1})
    meta, got = load_checkpoint(tmp_path / "c.ckpt")
    assert meta == {"k": 1}
    np.testing.assert_array_equal(got["plm.a"], tensors["plm.a"])
    assert got["plm.a"].dtype == np.float32
    _, only = load_checkpoint(tmp_path / "c.ckpt", prefix="plm.")
    assert list(only) == ["plm.a"]


def test_bytes_stable(tmp_path):
    t = {"x": np.ones(3), "a": np.zeros((2, 2))}
    save_checkpoint(tmp_path / "1", t, {"b": 1, "a": 2})
    save_checkpoint(tmp_path / "2", dict(reversed(t.items())), {"a": 2, "b": 1})
    assert (tmp_path / "1").read_bytes() == (tmp_path / "2").read_bytes()


def test_drop(tmp_path):
    save_checkpoint(tmp_path / "c", {"plm.a": np.ones(2), "head.x": np.ones(2), "head.y": np.ones(1)}, {})
    assert drop_tensors(tmp_path / "c", tmp_path / "d", "head.") == 2
    _, entries, _ = read_manifest(tmp_path / "d")
    assert [e["name"] for e in entries] == ["plm.a"]


def test_errors(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "missing")
    (tmp_path / "junk").write_bytes(b"hello world")
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        load_checkpoint(tmp_path / "junk")
    save_checkpoint(tmp_path / "c", {"a": np.ones(100)}, {})
    raw = (tmp_path / "c").read_bytes()
    (tmp_path / "t").write_bytes(raw[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "t")

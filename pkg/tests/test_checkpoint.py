from __future__ import annotations

import pytest
import torch

from vivat_lab.core.checkpoint import (
    FORMAT_VERSION,
    decode_checkpoint,
    encode_checkpoint,
    read_checkpoint,
    tensors_sha256,
    write_checkpoint,
)
from vivat_lab.core.errors import CheckpointIntegrityError, CheckpointVersionError


def _tensors():
    g = torch.Generator().manual_seed(0)
    return {
        "model/w": torch.randn(3, 4, generator=g),
        "model/b": torch.randn(4, generator=g, dtype=torch.float64),
        "opt/0/step": torch.tensor(5.0),
        "rng/noise": torch.Generator().manual_seed(9).get_state(),
    }


def test_round_trip_preserves_meta_and_tensors():
    meta = {"kind": "model", "step": 12, "nested": {"a": [1, 2.5, None]}}
    tensors = _tensors()
    meta2, tensors2 = decode_checkpoint(encode_checkpoint(meta, tensors))
    assert meta2 == meta
    assert set(tensors2) == set(tensors)
    for k, t in tensors.items():
        assert tensors2[k].dtype == t.dtype
        assert tensors2[k].shape == t.shape
        assert torch.equal(tensors2[k], t)


def test_encoding_is_canonical():
    a = encode_checkpoint({"b": 1, "a": 2}, _tensors())
    b = encode_checkpoint({"a": 2, "b": 1}, dict(reversed(list(_tensors().items()))))
    assert a == b


@pytest.mark.parametrize("offset", [3, 40, -40, -1])
def test_corrupt_byte_is_rejected(offset):
    data = bytearray(encode_checkpoint({"kind": "model"}, _tensors()))
    data[offset] ^= 0xFF
    with pytest.raises(CheckpointIntegrityError):
        decode_checkpoint(bytes(data))


def test_truncated_file_is_rejected():
    data = encode_checkpoint({"kind": "model"}, _tensors())
    with pytest.raises(CheckpointIntegrityError):
        decode_checkpoint(data[: len(data) // 2])


def test_newer_version_names_both_versions():
    data = encode_checkpoint({"kind": "model"}, _tensors(), version=FORMAT_VERSION + 1)
    with pytest.raises(CheckpointVersionError) as exc:
        decode_checkpoint(data)
    assert exc.value.found == FORMAT_VERSION + 1
    assert exc.value.supported == FORMAT_VERSION
    assert str(FORMAT_VERSION + 1) in str(exc.value) and str(FORMAT_VERSION) in str(exc.value)


def test_write_is_atomic(tmp_path):
    path = write_checkpoint(tmp_path / "ckpt" / "a.ckpt", {"kind": "model"}, _tensors())
    assert path.is_file()
    assert [p.name for p in path.parent.iterdir()] == ["a.ckpt"]
    meta, tensors = read_checkpoint(path)
    assert meta == {"kind": "model"}
    assert torch.equal(tensors["model/w"], _tensors()["model/w"])


def test_fingerprint_ignores_insertion_order_but_not_values():
    t = _tensors()
    same = dict(reversed(list(t.items())))
    assert tensors_sha256(t) == tensors_sha256(same)
    changed = dict(t)
    changed["model/w"] = t["model/w"] + 1e-6
    assert tensors_sha256(t) != tensors_sha256(changed)

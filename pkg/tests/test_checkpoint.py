import numpy as np
import pytest
import torch

from depthgrow.backbones import backbone_preset, build_backbone, full_network
from depthgrow.checkpoint import (
    load_checkpoint,
    payload_hash,
    restore_state,
    save_checkpoint,
    state_arrays,
)
from depthgrow.errors import CheckpointError


@pytest.fixture
def tiny_net():
    spec = backbone_preset("tiny-residual-basic", 5, input_size=32)
    return spec, full_network(build_backbone(spec, seed=0), head_seed=1)


def test_roundtrip_bit_exact(tmp_path, tiny_net):
    spec, net = tiny_net
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, net, spec=spec, stage_index=1, seed=7, epoch=3)
    manifest, tensors = load_checkpoint(path, expected_spec=spec)
    assert manifest["stage_index"] == 1
    assert manifest["seed"] == 7
    assert manifest["epoch"] == 3
    assert manifest["spec_hash"] == spec.stable_hash()
    original = state_arrays(net)
    assert set(tensors) == set(original)
    for name, arr in original.items():
        assert tensors[name].dtype == arr.dtype
        assert np.array_equal(tensors[name], arr), name

    clone = full_network(build_backbone(spec, seed=99), head_seed=98)
    assert payload_hash(clone) != payload_hash(net)
    restore_state(clone, tensors)
    assert payload_hash(clone) == payload_hash(net)
    x = torch.randn(2, 3, 32, 32)
    net.eval(), clone.eval()
    with torch.no_grad():
        torch.testing.assert_close(net(x), clone(x), rtol=0, atol=0)


def test_spec_mismatch_rejected(tmp_path, tiny_net):
    spec, net = tiny_net
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, net, spec=spec, stage_index=1, seed=0, epoch=1)
    other = backbone_preset("tiny-residual-basic", 7, input_size=32)
    with pytest.raises(CheckpointError, match="hashes"):
        load_checkpoint(path, expected_spec=other)


def test_not_a_checkpoint(tmp_path):
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"\x00" * 64)
    with pytest.raises(CheckpointError):
        load_checkpoint(junk)


def test_truncated_payload_detected(tmp_path, tiny_net):
    spec, net = tiny_net
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, net, spec=spec, stage_index=1, seed=0, epoch=1)
    raw = path.read_bytes()
    path.write_bytes(raw[:-100])
    with pytest.raises(CheckpointError, match="past end of file"):
        load_checkpoint(path)


def test_tensors_little_endian_and_addressable(tmp_path, tiny_net):
    spec, net = tiny_net
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, net, spec=spec, stage_index=1, seed=0, epoch=1)
    manifest, _ = load_checkpoint(path)
    assert manifest["byte_order"] == "little"
    offsets = [e["offset"] for e in manifest["tensors"]]
    assert offsets == sorted(offsets)
    for entry in manifest["tensors"]:
        assert np.dtype(entry["dtype"]).byteorder in ("<", "|", "=")
    # declared extents fit inside the file
    raw = path.read_bytes()
    last = manifest["tensors"][-1]
    assert last["offset"] + last["nbytes"] <= len(raw)


def test_payload_hash_ignores_nothing(tiny_net):
    spec, net = tiny_net
    before = payload_hash(net)
    with torch.no_grad():
        list(net.parameters())[0].add_(1e-3)
    assert payload_hash(net) != before

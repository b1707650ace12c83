import numpy as np
import pytest

from bottleneck.harness.checkpoint import (
    BLOB,
    checkpoint_digest,
    decode_tensor,
    encode_tensor,
    load_backbone,
    load_checkpoint,
    load_processor,
    save_backbone,
    save_checkpoint,
    save_processor,
)
from bottleneck.schemas.config import BackboneConfig


def test_tensor_record_layout():
    array = np.arange(6, dtype=np.float64).reshape(2, 3)
    record = encode_tensor(array)
    assert record[:4] == b"f64\0"
    assert len(record) == 4 + 4 + 2 * 4 + 6 * 8
    decoded, end = decode_tensor(record)
    assert end == len(record)
    assert decoded.dtype == np.float64
    assert np.array_equal(decoded, array)


def test_encode_rejects_integer_arrays():
    with pytest.raises(ValueError, match="dtype"):
        encode_tensor(np.arange(3))


def test_backbone_reloads_bit_exact(backbone, tmp_path):
    save_backbone(tmp_path / "ckpt", backbone, epoch=3)
    loaded = load_backbone(tmp_path / "ckpt")
    assert loaded.config == backbone.config
    for name, tensor in backbone.params.named().items():
        other = loaded.params.named()[name]
        assert other.dtype == tensor.dtype
        assert other.data.tobytes() == tensor.data.tobytes()
    config, _ = load_checkpoint(tmp_path / "ckpt")
    assert config["epoch"] == 3


def test_saving_twice_gives_the_same_digest(backbone, tmp_path):
    save_backbone(tmp_path / "a", backbone)
    save_backbone(tmp_path / "b", backbone)
    assert checkpoint_digest(tmp_path / "a") == checkpoint_digest(tmp_path / "b")
    assert (tmp_path / "a" / BLOB).read_bytes() == (tmp_path / "b" / BLOB).read_bytes()


def test_corrupt_blob_is_rejected(backbone, tmp_path):
    path = save_backbone(tmp_path / "ckpt", backbone)
    blob = bytearray((path / BLOB).read_bytes())
    blob[-1] ^= 0xFF
    (path / BLOB).write_bytes(bytes(blob))
    with pytest.raises(ValueError, match="sha256"):
        load_backbone(path)


def test_processor_round_trip_and_kind_check(processor, tiny_config, tmp_path):
    processor.params.layers[1].gate.data[:] = 1.5
    path = save_processor(tmp_path / "proc", processor)
    loaded = load_processor(path, tiny_config)
    assert loaded.config == processor.config
    assert loaded.params.layers[1].gate.item() == pytest.approx(1.5)
    with pytest.raises(ValueError, match="not a backbone"):
        load_backbone(path)


def test_processor_for_another_backbone_is_rejected(processor, tmp_path):
    path = save_processor(tmp_path / "proc", processor)
    other = BackboneConfig(n_layers=3, n_heads=2, d_model=16, d_ff=32, vocab_size=32)
    with pytest.raises(ValueError, match=r"\(L, H, d_k\)"):
        load_processor(path, other)


def test_unwritable_destination_raises_runtime_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(RuntimeError, match="Failed to write checkpoint"):
        save_checkpoint(blocker / "ckpt", {}, {"w": np.zeros(2)})

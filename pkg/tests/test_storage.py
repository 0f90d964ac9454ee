"""
Tests for TNSR files, JSON documents, sub-band files and checkpoints.
"""

import struct

import numpy as np
import pytest

from triplet.errors import TensorFormatError
from triplet.layers import BatchNorm, Conv3d, ParamGroup
from triplet.storage import (
    decode_tnsr,
    encode_tnsr,
    load_into,
    load_json,
    load_subbands,
    read_manifest,
    read_tnsr,
    save_checkpoint,
    save_json,
    save_subbands,
    write_tnsr,
)
from triplet.wavelet import dwt3


def _group(seed):
    group = ParamGroup("recnet", seed)
    Conv3d(group, "enc1.conv1.conv", 1, 2)
    BatchNorm(group, "enc1.conv1.bn", 2)
    return group


# =============================================================================
# TNSR
# =============================================================================

class TestTNSR:

    def test_header_layout(self):
        payload = encode_tnsr(np.arange(6, dtype=np.float64).reshape(2, 3))
        assert payload[:4] == b"TNSR"
        assert payload[4] == 1 and payload[5] == 2
        assert struct.unpack_from("<2Q", payload, 6) == (2, 3)
        assert len(payload) == 6 + 16 + 24
        assert struct.unpack_from("<f", payload, 6 + 16 + 4)[0] == 1.0

    def test_file_round_trip_keeps_shape_and_values(self, tmp_path, rng):
        array = rng.standard_normal((3, 1, 4, 5)).astype(np.float32)
        path = write_tnsr(tmp_path / "nested" / "x.tnsr", array)
        out = read_tnsr(path)
        assert out.dtype == np.float32
        np.testing.assert_array_equal(out, array)

    def test_scalar(self):
        decoded = decode_tnsr(encode_tnsr(np.float32(2.5)))
        assert decoded.shape == () and decoded.item() == 2.5

    def test_bad_magic(self):
        with pytest.raises(TensorFormatError):
            decode_tnsr(b"NOPE\x01\x00" + b"\x00" * 4)

    def test_bad_version(self):
        payload = bytearray(encode_tnsr(np.zeros(2)))
        payload[4] = 7
        with pytest.raises(TensorFormatError):
            decode_tnsr(bytes(payload))

    def test_truncated_data(self):
        with pytest.raises(TensorFormatError):
            decode_tnsr(encode_tnsr(np.zeros((4, 4)))[:-4])

    def test_missing_file(self, tmp_path):
        with pytest.raises(TensorFormatError):
            read_tnsr(tmp_path / "absent.tnsr")


# =============================================================================
# JSON and sub-bands
# =============================================================================

class TestDocuments:

    def test_json_is_sorted_and_readable(self, tmp_path):
        path = save_json(tmp_path / "m.json", {"b": 1, "a": [1, 2]})
        assert path.read_text(encoding="utf-8").index('"a"') < path.read_text(encoding="utf-8").index('"b"')
        assert load_json(path) == {"a": [1, 2], "b": 1}

    def test_invalid_json(self, tmp_path):
        (tmp_path / "bad.json").write_text("{", encoding="utf-8")
        with pytest.raises(TensorFormatError):
            load_json(tmp_path / "bad.json")

    def test_subbands_with_sidecar(self, tmp_path, rng):
        bands = dwt3(rng.standard_normal((2, 8, 8, 8)), 2)
        path = save_subbands(tmp_path / "f.tnsr", bands)
        sidecar = load_json(tmp_path / "f.json")
        assert sidecar["level"] == 2 and sidecar["channels"] == 2
        assert sidecar["band_order"][0] == "LLL-LLL" and len(sidecar["band_order"]) == 64
        again = load_subbands(path)
        assert again.level == 2
        np.testing.assert_allclose(again[63], bands[63], atol=1e-6)

    def test_subbands_without_sidecar(self, tmp_path, rng):
        write_tnsr(tmp_path / "f.tnsr", np.zeros((8, 2, 2, 2)))
        with pytest.raises(TensorFormatError):
            load_subbands(tmp_path / "f.tnsr")


# =============================================================================
# Checkpoints
# =============================================================================

class TestCheckpoint:

    def test_round_trip_restores_digest(self, tmp_path):
        source = _group(1)
        source.buffers["enc1.conv1.bn"].mean[...] = 0.5
        source.buffers["enc1.conv1.bn"].tracked = True
        source.freeze()
        save_checkpoint(tmp_path / "ckpt", {"recnet": source}, {"seed": 0}, "abc")

        target = _group(2)
        assert target.digest() != source.digest()
        manifest = load_into(tmp_path / "ckpt", {"recnet": target})
        assert target.digest() == source.digest()
        assert target.frozen
        assert manifest["config_hash"] == "abc"
        assert read_manifest(tmp_path / "ckpt")["networks"]["recnet"]["digest"] == source.digest()

    def test_shape_mismatch(self, tmp_path):
        save_checkpoint(tmp_path, {"recnet": _group(0)}, {}, "h")
        other = ParamGroup("recnet")
        Conv3d(other, "enc1.conv1.conv", 1, 3)
        BatchNorm(other, "enc1.conv1.bn", 3)
        with pytest.raises(TensorFormatError):
            load_into(tmp_path, {"recnet": other})

    def test_missing_network(self, tmp_path):
        save_checkpoint(tmp_path, {"recnet": _group(0)}, {}, "h")
        with pytest.raises(TensorFormatError):
            load_into(tmp_path, {"advnet": ParamGroup("advnet")})

    def test_not_a_checkpoint(self, tmp_path):
        save_json(tmp_path / "manifest.json", {"format": 99})
        with pytest.raises(TensorFormatError):
            read_manifest(tmp_path)

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import pytest

from e2eie.checkpoint import FORMAT_VERSION, MAGIC, CheckpointError, assign, read_container, write_container
from e2eie.tensor import Tensor


@pytest.fixture
def params() -> dict[str, Tensor]:
    return {
        "a.weight": Tensor(np.arange(6, dtype=np.float32).reshape(2, 3)),
        "a.bias": Tensor(np.array([0.5, -1.5], dtype=np.float32)),
    }


def test_layout(params: dict[str, Tensor], tmp_path: Path):
    path = tmp_path / "nested" / "model.ckpt"
    write_container(path, {"kind": "test"}, params)

    data = path.read_bytes()
    magic, version, header_length = struct.unpack_from("<8sII", data)
    assert magic == MAGIC
    assert version == FORMAT_VERSION

    header = json.loads(data[16 : 16 + header_length].decode("utf-8"))
    assert header["kind"] == "test"
    assert header["parameters"] == [{"name": "a.weight", "shape": [2, 3]}, {"name": "a.bias", "shape": [2]}]

    values = np.frombuffer(data[16 + header_length :], dtype="<f4")
    np.testing.assert_array_equal(values, [0, 1, 2, 3, 4, 5, 0.5, -1.5])


def test_read(params: dict[str, Tensor], tmp_path: Path):
    path = tmp_path / "model.ckpt"
    write_container(path, {"kind": "test", "vocabulary": ["<pad>", "x"]}, params)

    header, arrays = read_container(path, kind="test")
    assert header["vocabulary"] == ["<pad>", "x"]
    assert list(arrays) == ["a.weight", "a.bias"]
    np.testing.assert_array_equal(arrays["a.weight"], params["a.weight"].data)


@pytest.mark.parametrize(
    "tokens",
    [
        ["<pad>", "<unk>", "<eos>", ",", "a"],
        ["\\x41", "A", '"quoted"', "back\\slash", "tab\tsep"],
        ["東京", "café", "ü", "[", "]", "=", "#"],
    ],
)
def test_header_strings_survive(params: dict[str, Tensor], tmp_path: Path, tokens: list[str]):
    path = tmp_path / "model.ckpt"
    write_container(path, {"kind": "test", "vocabulary": tokens}, params)

    header, _ = read_container(path)
    assert header["vocabulary"] == tokens


def test_write_read_write_is_byte_identical(params: dict[str, Tensor], tmp_path: Path):
    header = {"kind": "test", "config": {"fields": ["a", "b"], "rate": 0.3}, "vocabulary": ["<pad>", ",", "x"]}
    write_container(tmp_path / "first.ckpt", header, params)

    restored_header, arrays = read_container(tmp_path / "first.ckpt")
    del restored_header["parameters"]
    write_container(tmp_path / "second.ckpt", restored_header, {name: Tensor(a) for name, a in arrays.items()})

    assert (tmp_path / "second.ckpt").read_bytes() == (tmp_path / "first.ckpt").read_bytes()


class TestErrors:
    def test_wrong_kind(self, params, tmp_path: Path):
        path = tmp_path / "model.ckpt"
        write_container(path, {"kind": "baseline"}, params)
        with pytest.raises(CheckpointError) as e:
            read_container(path, kind="pointer")
        assert "baseline" in str(e.value)

    def test_version_mismatch(self, params, tmp_path: Path):
        path = tmp_path / "model.ckpt"
        write_container(path, {"kind": "test"}, params)
        data = bytearray(path.read_bytes())
        data[8:12] = struct.pack("<I", FORMAT_VERSION + 1)
        path.write_bytes(bytes(data))

        with pytest.raises(CheckpointError) as e:
            read_container(path)
        assert "version" in str(e.value)

    def test_corrupt_header(self, params, tmp_path: Path):
        path = tmp_path / "model.ckpt"
        write_container(path, {"kind": "test"}, params)
        data = bytearray(path.read_bytes())
        data[16] = 0xFF
        path.write_bytes(bytes(data))

        with pytest.raises(CheckpointError) as e:
            read_container(path)
        assert "corrupt header" in str(e.value)

    @pytest.mark.parametrize("keep", [4, 20, -1])
    def test_truncated(self, params, tmp_path: Path, keep: int):
        path = tmp_path / "model.ckpt"
        write_container(path, {"kind": "test"}, params)
        path.write_bytes(path.read_bytes()[:keep])

        with pytest.raises(CheckpointError) as e:
            read_container(path)
        assert e.value.path == str(path)

    def test_trailing_bytes(self, params, tmp_path: Path):
        path = tmp_path / "model.ckpt"
        write_container(path, {"kind": "test"}, params)
        path.write_bytes(path.read_bytes() + b"\0\0\0\0")
        with pytest.raises(CheckpointError):
            read_container(path)


class TestAssign:
    def test_assign(self, params):
        target = {name: Tensor(np.zeros_like(tensor.data), requires_grad=True) for name, tensor in params.items()}
        target["a.bias"].grad = np.ones(2, dtype=np.float32)

        assign(target, {name: tensor.data for name, tensor in params.items()})
        np.testing.assert_array_equal(target["a.weight"].data, params["a.weight"].data)
        assert target["a.bias"].grad is None

    def test_missing(self, params):
        with pytest.raises(CheckpointError):
            assign(params, {"a.weight": params["a.weight"].data})

    def test_shape_mismatch(self, params):
        arrays = {"a.weight": np.zeros((3, 2), dtype=np.float32), "a.bias": params["a.bias"].data}
        with pytest.raises(CheckpointError):
            assign(params, arrays)

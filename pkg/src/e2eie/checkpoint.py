from __future__ import annotations

import json
import logging
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .tensor import Tensor

logger = logging.getLogger(__name__)

MAGIC = b"E2EIECKP"
FORMAT_VERSION = 1

# マジック、フォーマットバージョン、ヘッダ長（いずれもリトルエンディアン）
_PREAMBLE = struct.Struct("<8sII")
_VALUE_DTYPE = np.dtype("<f4")


class CheckpointError(Exception):
    def __init__(self, path: str | os.PathLike, message: str):
        self.path = str(path)
        self.message = message
        super().__init__(f"{self.path}: {message}")


def write_container(path: str | os.PathLike, header: Mapping, params: Mapping[str, Tensor]) -> None:
    """チェックポイントを書き出す。

    形式: プリアンブル、JSONヘッダ（UTF-8）（構成・語彙・パラメータ一覧）、
    各パラメータの値（row-major、リトルエンディアンの32bit浮動小数点）をヘッダの一覧順に連結。
    """
    manifest = [{"name": name, "shape": list(tensor.shape)} for name, tensor in params.items()]
    header_bytes = json.dumps({**header, "parameters": manifest}, ensure_ascii=False).encode("utf-8")

    path = Path(path).expanduser().resolve()
    path.parent.mkdir(parents=True, exist_ok=True)

    with path.open(mode="wb") as f:
        f.write(_PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        for tensor in params.values():
            f.write(np.ascontiguousarray(tensor.data, dtype=_VALUE_DTYPE).tobytes(order="C"))

    logger.info("wrote checkpoint %s (%d tensors)", path, len(manifest))


def read_container(path: str | os.PathLike, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    """write_container()で書き出したファイルを読み込み、ヘッダと名前付きの配列を返す。"""
    data = Path(path).expanduser().read_bytes()

    if len(data) < _PREAMBLE.size:
        raise CheckpointError(path, "truncated file (no preamble)")

    magic, version, header_length = _PREAMBLE.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(path, "not a checkpoint file")
    if version != FORMAT_VERSION:
        raise CheckpointError(path, f"unsupported format version {version} (expected {FORMAT_VERSION})")

    offset = _PREAMBLE.size
    if len(data) < offset + header_length:
        raise CheckpointError(path, "truncated file (header)")

    try:
        header = json.loads(data[offset : offset + header_length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(path, f"corrupt header: {e}") from e
    offset += header_length

    if kind is not None and header.get("kind") != kind:
        raise CheckpointError(path, f"checkpoint holds a {header.get('kind')!r} model, expected {kind!r}")

    arrays = {}
    for entry in header.get("parameters", []):
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * _VALUE_DTYPE.itemsize
        if len(data) < offset + nbytes:
            raise CheckpointError(path, f"truncated file (parameter {entry['name']!r})")
        arrays[entry["name"]] = np.frombuffer(data, dtype=_VALUE_DTYPE, count=nbytes // 4, offset=offset).reshape(shape)
        offset += nbytes

    if offset != len(data):
        raise CheckpointError(path, f"{len(data) - offset} trailing bytes after the last parameter")

    return header, arrays


def assign(params: Mapping[str, Tensor], arrays: Mapping[str, np.ndarray]) -> None:
    """読み込んだ配列をパラメータに書き込む。名前と形状が完全に一致すること。"""
    if set(params) != set(arrays):
        missing = sorted(set(params) - set(arrays))
        unexpected = sorted(set(arrays) - set(params))
        raise CheckpointError("<parameters>", f"parameter mismatch: missing={missing}, unexpected={unexpected}")

    for name, tensor in params.items():
        if tensor.shape != arrays[name].shape:
            raise CheckpointError("<parameters>", f"{name}: shape {arrays[name].shape} != {tensor.shape}")
        tensor.data = np.array(arrays[name], dtype=tensor.data.dtype)
        tensor.zero_grad()

"""Binary checkpoint format.

Layout (all integers little-endian u32)::

    b"TMBR" | version | config length | config JSON (UTF-8)
    then, until end of file, one record per parameter:
    name length | name (UTF-8) | rank | dims... | float32 payload (LE)
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from ..autodiff import Tensor
from .config import NNLMConfig, RNNTConfig, config_from_dict
from .nnlm import NNLM
from .params import ModelParams
from .rnnt import RNNT

MAGIC = b"TMBR"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _u32(value: int) -> bytes:
    return struct.pack("<I", value)


def write_checkpoint(path, config, params: ModelParams) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(_u32(VERSION))
    blob = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    buf.write(_u32(len(blob)))
    buf.write(blob)
    for name, tensor in params.items():
        raw = name.encode("utf-8")
        buf.write(_u32(len(raw)))
        buf.write(raw)
        buf.write(_u32(tensor.ndim))
        for d in tensor.shape:
            buf.write(_u32(d))
        buf.write(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint(path) -> tuple[RNNTConfig | NNLMConfig, ModelParams]:
    data = Path(path).read_bytes()
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    def u32() -> int:
        return struct.unpack("<I", take(4))[0]

    if bytes(take(4)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version = u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    config = config_from_dict(json.loads(bytes(take(u32())).decode("utf-8")))
    params = ModelParams()
    while pos < len(data):
        name = bytes(take(u32())).decode("utf-8")
        dims = tuple(u32() for _ in range(u32()))
        count = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(bytes(take(4 * count)), dtype="<f4").reshape(dims).astype(np.float32)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return config, params


def save_model(path, model: RNNT | NNLM) -> None:
    write_checkpoint(path, model.config, model.params)


def load_model(path) -> RNNT | NNLM:
    config, params = read_checkpoint(path)
    if isinstance(config, NNLMConfig):
        return NNLM(config, params)
    return RNNT(config, params)

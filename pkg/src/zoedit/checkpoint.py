"""Binary checkpoint container.

Layout (all little-endian):

    bytes 0..7    magic  b"ZOEDITCP"
    bytes 8..11   uint32 version (currently 1)
    bytes 12..19  uint64 header length in bytes
    header        UTF-8 JSON: config, precision_state, tensor directory
                  (name/shape/dtype/offset/nbytes), optional quant sidecar
                  (weight/activation scales and the mixed-precision policy)
    payload       raw tensor bytes at the directory offsets ("f32" or "i8")

Export followed by import is bit-identical.
"""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

from .errors import FormatError
from .model import ModelBundle, ModelConfig

MAGIC = b"ZOEDITCP"
VERSION = 1

_DTYPES = {"f32": np.dtype("<f4"), "i8": np.dtype("i1")}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.int8): "i8"}


def save_checkpoint(bundle: ModelBundle, path: str) -> None:
    """Write atomically (temp file + rename)."""
    directory = []
    offset = 0
    payloads = []
    for name in sorted(bundle.weights):
        arr = bundle.weights[name]
        dtype_name = _DTYPE_NAMES.get(arr.dtype)
        if dtype_name is None:
            raise FormatError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr).astype(_DTYPES[dtype_name], copy=False).tobytes()
        directory.append(
            {
                "name": name,
                "dtype": dtype_name,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        payloads.append(raw)
        offset += len(raw)

    header = {
        "config": bundle.config.to_dict(),
        "precision_state": bundle.precision_state,
        "tensors": directory,
    }
    if bundle.quant is not None:
        header["quant"] = bundle.quant.to_dict()
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    dirpath = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=dirpath, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(np.uint32(VERSION).tobytes())
            f.write(np.uint64(len(header_bytes)).tobytes())
            f.write(header_bytes)
            for raw in payloads:
                f.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str) -> ModelBundle:
    """Read a container; raises FormatError on any structural problem
    (never returns a partial bundle)."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 20:
        raise FormatError("file too short to be a checkpoint")
    if blob[:8] != MAGIC:
        raise FormatError(f"bad magic {blob[:8]!r}")
    version = int(np.frombuffer(blob[8:12], dtype="<u4")[0])
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    header_len = int(np.frombuffer(blob[12:20], dtype="<u8")[0])
    if 20 + header_len > len(blob):
        raise FormatError("truncated header")
    try:
        header = json.loads(blob[20 : 20 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable header: {e}") from e

    payload = blob[20 + header_len :]
    config = ModelConfig.from_dict(header["config"])
    weights = {}
    for entry in header["tensors"]:
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise FormatError(f"unknown dtype {entry['dtype']!r}")
        lo, hi = entry["offset"], entry["offset"] + entry["nbytes"]
        if hi > len(payload):
            raise FormatError(f"truncated payload for tensor {entry['name']!r}")
        arr = np.frombuffer(payload[lo:hi], dtype=dtype).reshape(entry["shape"])
        if entry["dtype"] == "f32":
            arr = arr.astype(np.float32)  # native byte order, writable copy
        else:
            arr = arr.astype(np.int8)
        weights[entry["name"]] = arr

    quant = None
    if header.get("quant") is not None:
        from .quant import QuantizedWeights

        quant = QuantizedWeights.from_dict(header["quant"])
    return ModelBundle(
        config=config,
        weights=weights,
        precision_state=header["precision_state"],
        quant=quant,
    )

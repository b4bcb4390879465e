"""Bit-exact named-tensor checkpoint container.

Layout: 4-byte magic, 1-byte format version, little-endian uint32 header
length, UTF-8 JSON header (configs, metadata, tensor index), then the raw
little-endian tensor payloads in index order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict

import numpy as np

from .cascade import CascadeConfig, CascadeModel
from .encoder import EncoderConfig
from .errors import ConfigError, DataError

MAGIC = b"CTRK"
FORMAT_VERSION = 1

_DTYPE_CODES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


def save_checkpoint(path, model: CascadeModel, metadata: dict | None = None) -> None:
    params = model.params()
    index = []
    payloads = []
    for name, p in params.items():
        arr = np.ascontiguousarray(p.data)
        if arr.dtype == np.float32:
            code = "<f4"
        elif arr.dtype == np.float64:
            code = "<f8"
        else:
            raise ConfigError(f"cannot serialise dtype {arr.dtype} of {name}")
        payloads.append(arr.astype(code, copy=False).tobytes())
        index.append({"name": name, "shape": list(arr.shape), "dtype": code,
                      "nbytes": len(payloads[-1])})
    header = {
        "encoder": asdict(model.enc_cfg),
        "cascade": asdict(model.cas_cfg),
        "metadata": metadata or {},
        "tensors": index,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for payload in payloads:
            fh.write(payload)


def load_checkpoint(path) -> tuple[CascadeModel, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise DataError(f"{path}: not a checkpoint (bad magic {magic!r})")
        (version,) = struct.unpack("<B", fh.read(1))
        if version != FORMAT_VERSION:
            raise ConfigError(
                f"{path}: unsupported checkpoint format version {version} "
                f"(this build reads version {FORMAT_VERSION})"
            )
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        enc_cfg = EncoderConfig(**header["encoder"])
        cascade_raw = dict(header["cascade"])
        cascade_raw["layer_schedule"] = tuple(cascade_raw["layer_schedule"])
        cas_cfg = CascadeConfig(**cascade_raw)
        dtype = np.float32
        if header["tensors"] and header["tensors"][0]["dtype"] == "<f8":
            dtype = np.float64
        model = CascadeModel(enc_cfg, cas_cfg,
                             seed=header["metadata"].get("seed", 0), dtype=dtype)
        params = model.params()
        seen = set()
        for entry in header["tensors"]:
            name = entry["name"]
            if name not in params:
                raise DataError(f"{path}: unknown tensor {name!r}")
            raw = fh.read(entry["nbytes"])
            if len(raw) != entry["nbytes"]:
                raise DataError(f"{path}: truncated payload for {name!r}")
            arr = np.frombuffer(raw, dtype=_DTYPE_CODES[entry["dtype"]])
            arr = arr.reshape(entry["shape"])
            if tuple(arr.shape) != params[name].data.shape:
                raise DataError(
                    f"{path}: tensor {name!r} has shape {arr.shape}, "
                    f"model expects {params[name].data.shape}"
                )
            params[name].data[...] = arr
            seen.add(name)
        missing = set(params) - seen
        if missing:
            raise DataError(f"{path}: checkpoint lacks tensors {sorted(missing)[:4]}")
    return model, header["metadata"]

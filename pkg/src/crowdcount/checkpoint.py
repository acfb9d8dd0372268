"""Checkpoint files: network config, parameters and Adam moments in one binary file.

Layout (little-endian)::

    b"CFCK"  u32 version
    u32 n    n bytes of UTF-8 "key = json-value" lines (network config, Adam settings, metadata)
    u32 k    k records of: u32 name length, name bytes, CFTN tensor

Record names are ``param/<name>``, ``adam.m/<name>`` and ``adam.v/<name>``.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .convlstm import NetworkConfig, check_params
from .data import format_kv, parse_value
from .errors import DataError
from .optim import AdamState
from .tensor import read_tensor, write_tensor

MAGIC = b"CFCK"
VERSION = 1
_NET_KEYS = ("layer_channels", "kernel", "direction", "in_channels", "height", "width", "output_scale")
_ADAM_KEYS = ("lr", "beta1", "beta2", "eps", "step")


@dataclass
class Checkpoint:
    config: NetworkConfig
    params: dict[str, np.ndarray]
    adam: AdamState | None = None
    meta: dict = field(default_factory=dict)


def save(path: str | Path, ckpt: Checkpoint) -> None:
    kv = {f"net.{k}": v for k, v in ckpt.config.to_dict().items()}
    records = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    if ckpt.adam is not None:
        kv.update({f"adam.{k}": getattr(ckpt.adam, k) for k in _ADAM_KEYS})
        records += [(f"adam.m/{k}", v) for k, v in ckpt.adam.m.items()]
        records += [(f"adam.v/{k}", v) for k, v in ckpt.adam.v.items()]
    kv.update({f"meta.{k}": v for k, v in ckpt.meta.items()})
    text = format_kv(kv).encode()
    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<I", VERSION))
    buf.write(struct.pack("<I", len(text)) + text)
    buf.write(struct.pack("<I", len(records)))
    for name, t in records:
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)) + raw)
        write_tensor(buf, np.asarray(t))
    Path(path).write_bytes(buf.getvalue())


def load(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: checkpoint not found")
    fh = io.BytesIO(path.read_bytes())
    try:
        if fh.read(4) != MAGIC:
            raise DataError(f"{path}: not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        (n,) = struct.unpack("<I", fh.read(4))
        kv = {}
        for line in fh.read(n).decode().splitlines():
            key, raw = (s.strip() for s in line.split("=", 1))
            kv[key] = parse_value(raw)
        (k,) = struct.unpack("<I", fh.read(4))
        tensors = {}
        for _ in range(k):
            (ln,) = struct.unpack("<I", fh.read(4))
            name = fh.read(ln).decode()
            tensors[name] = read_tensor(fh)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise DataError(f"{path}: corrupt checkpoint ({exc})") from None
    config = NetworkConfig(**{k: kv[f"net.{k}"] for k in _NET_KEYS if f"net.{k}" in kv})
    params = {n.split("/", 1)[1]: t for n, t in tensors.items() if n.startswith("param/")}
    check_params(params, config)
    adam = None
    if "adam.step" in kv:
        adam = AdamState(**{k: kv[f"adam.{k}"] for k in _ADAM_KEYS})
        adam.m = {n.split("/", 1)[1]: t for n, t in tensors.items() if n.startswith("adam.m/")}
        adam.v = {n.split("/", 1)[1]: t for n, t in tensors.items() if n.startswith("adam.v/")}
    meta = {k[5:]: v for k, v in kv.items() if k.startswith("meta.")}
    return Checkpoint(config, params, adam, meta)

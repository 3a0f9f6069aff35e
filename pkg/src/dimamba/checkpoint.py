"""``DIMC`` checkpoint container.

Layout (little-endian)::

    b"DIMC" | u16 version | u32 manifest length | manifest (UTF-8 JSON)
    | u32 record count | records...

Each record is ``u16 name length | name (UTF-8) | DIMT tensor``; names are
``<group>/<parameter>`` with groups ``model``, ``ema``, ``adam_m``, ``adam_v``.
"""

from __future__ import annotations

import json
import os
import struct
from typing import Dict

import numpy as np

from .numerics import read_tensor, write_tensor

MAGIC = b"DIMC"
VERSION = 1


def save_checkpoint(path: str, manifest: dict, groups: Dict[str, Dict[str, np.ndarray]],
                    dtype: str = "f64") -> None:
    records = [(f"{g}/{k}", v) for g, tensors in groups.items() for k, v in tensors.items()]
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(head)))
        fh.write(head)
        fh.write(struct.pack("<I", len(records)))
        for name, arr in records:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            write_tensor(fh, arr, dtype)
    os.replace(tmp, path)


def load_checkpoint(path: str):
    """Return ``(manifest, groups)``."""
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not a DIMC checkpoint")
        version, hlen = struct.unpack("<HI", fh.read(6))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        manifest = json.loads(fh.read(hlen).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        groups: Dict[str, Dict[str, np.ndarray]] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            group, key = name.split("/", 1)
            groups.setdefault(group, {})[key] = read_tensor(fh)
    return manifest, groups

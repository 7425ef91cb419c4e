"""Single-file checkpoint container.

Layout (little-endian)::

    b"GDPC" | u32 version | u32 header_bytes | header (UTF-8 JSON)
    u32 array_count
    per array: u16 name_bytes | name (UTF-8) | u8 ndim | u32 dim * ndim | float32 data

The JSON header holds the codec config, the layer topology and free-form
metadata (training state, pruning settings).  Arrays are stored in insertion
order: model parameters under their own names, thresholds as
``threshold/<id>``, keep-masks as ``mask/<id>`` (0/1 floats) and optimizer
moments as ``adam.m/<name>`` / ``adam.v/<name>``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gdprune.codec import CodecConfig
from gdprune.errors import FormatError
from gdprune.topology import LayerSpec, Topology

MAGIC = b"GDPC"
VERSION = 1


@dataclass
class Checkpoint:
    config: CodecConfig
    topology: Topology
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    header = json.dumps({
        "config": ckpt.config.to_dict(),
        "topology": {"layers": ckpt.topology.to_list(), "externals": [list(e) for e in ckpt.topology.externals]},
        "meta": ckpt.meta,
    }, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(header)), header, struct.pack("<I", len(ckpt.arrays))]
    for name, arr in ckpt.arrays.items():
        arr = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (magic {data[:4]!r})")
    try:
        version, hlen = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        pos = 12
        header = json.loads(data[pos:pos + hlen].decode("utf-8"))
        pos += hlen
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            n = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * n > len(data):
                raise FormatError(f"{path}: truncated array {name!r}")
            arrays[name] = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * n
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint ({exc})") from exc
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    topo = header["topology"]
    topology = Topology(tuple(LayerSpec.from_dict(d) for d in topo["layers"]),
                        tuple((name, ch) for name, ch in topo["externals"]))
    return Checkpoint(CodecConfig.from_dict(header["config"]), topology, arrays, header.get("meta", {}))

"""Self-describing binary checkpoint container.

Layout: 4-byte magic, u32 version, u64 JSON header length, UTF-8 JSON
header, then the concatenated little-endian float32 parameter blobs. The
header carries the architecture, the noise schedule, a parameter manifest
(name/shape/offset), and free-form extra metadata. Denoiser checkpoints
and adapter-only checkpoints share the format, distinguished by "kind".
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"DSCK"
VERSION = 1


def save_checkpoint(path, kind: str, arch: dict | None, schedule: dict | None, params: dict, extra: dict):
    manifest = []
    blobs = []
    offset = 0
    for name in sorted(params):
        tensor = params[name]
        arr = np.ascontiguousarray(
            tensor.data if hasattr(tensor, "data") else tensor, dtype="<f4"
        )
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.size
    header = json.dumps(
        {"kind": kind, "arch": arch, "schedule": schedule, "params": manifest, "extra": extra}
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


def load_checkpoint(path) -> dict:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise ValueError(f"not a checkpoint file (bad magic {raw[:4]!r})")
    version, hlen = struct.unpack_from("<IQ", raw, 4)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    body = np.frombuffer(raw[16 + hlen :], dtype="<f4")
    params = {}
    for entry in header["params"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        chunk = body[entry["offset"] : entry["offset"] + size]
        params[entry["name"]] = np.array(chunk).reshape(entry["shape"])
    return {
        "kind": header["kind"],
        "arch": header.get("arch"),
        "schedule": header.get("schedule"),
        "params": params,
        "extra": header.get("extra", {}),
    }

"""Binary checkpoint container.

Layout::

    8 bytes   magic  b"CMLCKPT\\0"
    4 bytes   format version, uint32 little-endian
    8 bytes   header length N, uint64 little-endian
    N bytes   JSON header (UTF-8, sorted keys)
    ...       tensor payloads, float64 little-endian, row-major, in header order

The header maps section tags (``model``, ``seg.full``, ...) to a metadata
object and an ordered list of ``{name, shape, offset}`` tensor records; offsets
are relative to the start of the payload area.
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .recmodel import FeatureSchema, ModelParams
from .seg import SegParams

MAGIC = b"CMLCKPT\x00"
VERSION = 1


class CheckpointError(Exception):
    pass


def dumps(sections: dict[str, tuple[dict, dict[str, np.ndarray]]]) -> bytes:
    header: dict = {"sections": {}}
    payload = io.BytesIO()
    for tag in sorted(sections):
        meta, tensors = sections[tag]
        records = []
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f8")
            records.append({"name": name, "shape": list(arr.shape), "offset": payload.tell()})
            payload.write(arr.tobytes())
        header["sections"][tag] = {"meta": meta, "tensors": records}
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<IQ", VERSION, len(raw)) + raw + payload.getvalue()


def loads(blob: bytes) -> dict[str, tuple[dict, dict[str, np.ndarray]]]:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, n = struct.unpack("<IQ", blob[8:20])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(blob[20:20 + n])
    base = 20 + n
    out = {}
    for tag, sec in header["sections"].items():
        tensors = {}
        for rec in sec["tensors"]:
            count = int(np.prod(rec["shape"]))
            start = base + rec["offset"]
            if start + 8 * count > len(blob):
                raise CheckpointError(f"truncated tensor {tag}/{rec['name']}")
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=start)
            tensors[rec["name"]] = arr.reshape(rec["shape"]).astype(np.float64)
        out[tag] = (sec["meta"], tensors)
    return out


def save(path, sections) -> None:
    Path(path).write_bytes(dumps(sections))


def load(path) -> dict[str, tuple[dict, dict[str, np.ndarray]]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint: {path}")
    return loads(path.read_bytes())


def model_section(model: ModelParams, **extra) -> tuple[dict, dict]:
    return {"kind": "model", "schema": model.schema.to_dict(), **extra}, model.tensors


def seg_section(seg: SegParams, **extra) -> tuple[dict, dict]:
    return {"kind": "seg", "dim": seg.dim, "n_item_fields": seg.n_item_fields, **extra}, seg.tensors


def model_from(sections, tag: str = "model") -> ModelParams:
    if tag not in sections:
        raise CheckpointError(f"checkpoint has no {tag!r} section")
    meta, tensors = sections[tag]
    return ModelParams(FeatureSchema.from_dict(meta["schema"]), tensors)


def seg_from(sections, tag: str) -> SegParams:
    if tag not in sections:
        raise CheckpointError(f"checkpoint has no {tag!r} section")
    meta, tensors = sections[tag]
    return SegParams(tensors, meta["dim"], meta["n_item_fields"])

"""Binary model files.

Layout (all integers little-endian)::

    magic        8 bytes   b"SFPARAMS"
    version      uint32    currently 1
    header_len   uint32    byte length of the JSON header that follows
    header       UTF-8 JSON {"graph_hash", "spec", "params": [{"name", "shape"}], "metadata"}
    values       float64 LE, each array row-major, in header order

The same container stores neural parameter sets and CoxNet coefficients
(arrays ``beta``, ``center`` and ``scale``, prefixed ``<modality>.`` for late
linear fusion). ``graph_hash`` ties the file to the architecture that
produced it and is checked on load.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .exceptions import IncompatibleModel
from .fusion import FusionSpec

__all__ = ["MAGIC", "FORMAT_VERSION", "ModelFile", "save_model", "load_model", "spec_hash"]

MAGIC = b"SFPARAMS"
FORMAT_VERSION = 1


def spec_hash(spec: FusionSpec, shapes: dict) -> str:
    """Hash of the spec and parameter shapes; matches ``FusionGraph.spec_hash`` for neural specs."""
    payload = json.dumps({"spec": spec.to_dict(), "shapes": {k: list(v) for k, v in shapes.items()}},
                         sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


class ModelFile:
    """Decoded contents of a model file."""

    def __init__(self, spec: FusionSpec, arrays: dict, metadata: dict | None = None,
                 graph_hash: str | None = None):
        self.spec = spec
        self.arrays = {k: np.ascontiguousarray(v, dtype=np.float64) for k, v in arrays.items()}
        self.metadata = dict(metadata or {})
        self.graph_hash = graph_hash or spec_hash(spec, {k: v.shape for k, v in self.arrays.items()})

    def __repr__(self):
        return f"ModelFile(kind={self.spec.kind!r}, arrays={len(self.arrays)})"


def save_model(path, model: ModelFile) -> None:
    header = {
        "graph_hash": model.graph_hash,
        "spec": model.spec.to_dict(),
        "params": [{"name": k, "shape": list(v.shape)} for k, v in model.arrays.items()],
        "metadata": model.metadata,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for v in model.arrays.values():
            fh.write(v.astype("<f8").tobytes(order="C"))


def load_model(path) -> ModelFile:
    """Read a model file.

    Raises
    ------
    IncompatibleModel
        On a bad magic, unknown version, truncated data or a hash that does
        not match the stored spec and shapes.
    """
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise IncompatibleModel(f"{path}: not a model file")
    if len(data) < 16:
        raise IncompatibleModel(f"{path}: truncated header")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != FORMAT_VERSION:
        raise IncompatibleModel(f"{path}: unsupported format version {version}")
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except ValueError as exc:
        raise IncompatibleModel(f"{path}: unreadable header ({exc})") from None
    pos, arrays = 16 + hlen, {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(data):
            raise IncompatibleModel(f"{path}: truncated values for {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(data, "<f8", nbytes // 8, pos).reshape(shape).astype(np.float64)
        pos += nbytes
    if pos != len(data):
        raise IncompatibleModel(f"{path}: {len(data) - pos} trailing bytes")
    spec = FusionSpec.from_dict(header["spec"])
    expected = spec_hash(spec, {k: v.shape for k, v in arrays.items()})
    if expected != header["graph_hash"]:
        raise IncompatibleModel(f"{path}: stored hash does not match its spec and shapes")
    return ModelFile(spec, arrays, header.get("metadata", {}), header["graph_hash"])

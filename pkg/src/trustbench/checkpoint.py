"""THZM1 checkpoint file: graph + named binary32 tensors + metadata.

Layout: magic "THZM1", little-endian u32 header length, UTF-8 JSON header
(graph spec, tensor directory with offsets, metadata), then the raw
little-endian binary32 payloads.  Round trips preserve every bit pattern,
NaN payloads and infinities included, which the fault model relies on.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .engine import ModelGraph, param_shapes, validate_params
from .errors import FormatError, IntegrityError, IoError

MAGIC = b"THZM1"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    """A trained (or faulted) parameter set bound to its graph."""

    graph: ModelGraph
    params: dict
    metadata: dict = field(default_factory=dict)

    def tensor_items(self):
        """Deterministic (layer, tensor, array) iteration order."""
        shapes = param_shapes(self.graph)
        for spec in self.graph.layers:
            if spec.name not in shapes:
                continue
            for tname in sorted(shapes[spec.name]):
                yield spec.name, tname, self.params[spec.name][tname]

    def params_digest(self) -> str:
        """SHA-256 over the exact parameter bit patterns."""
        h = hashlib.sha256()
        for lname, tname, arr in self.tensor_items():
            h.update(lname.encode())
            h.update(tname.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return h.hexdigest()

    def copy_params(self) -> dict:
        return {
            lname: {t: a.copy() for t, a in tensors.items()}
            for lname, tensors in self.params.items()
        }


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    validate_params(ckpt.graph, ckpt.params)
    directory = []
    offset = 0
    payloads = []
    for lname, tname, arr in ckpt.tensor_items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append(
            {
                "layer": lname,
                "tensor": tname,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        payloads.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "graph": ckpt.graph.to_json_dict(),
        "tensors": directory,
        "metadata": ckpt.metadata,
        "payload_bytes": offset,
    }
    raw_header = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(np.array(len(raw_header), dtype="<u4").tobytes())
            fh.write(raw_header)
            for raw in payloads:
                fh.write(raw)
    except OSError as exc:
        raise IoError(path, str(exc)) from exc


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(path, str(exc)) from exc

    if blob[:5] != MAGIC:
        raise FormatError(path, 0, f"bad magic {blob[:5]!r}")
    if len(blob) < 9:
        raise FormatError(path, len(blob), "truncated before header length")
    header_len = int(np.frombuffer(blob[5:9], dtype="<u4")[0])
    if len(blob) < 9 + header_len:
        raise FormatError(path, len(blob), "truncated header")
    try:
        header = json.loads(blob[9 : 9 + header_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(path, 9, f"header not valid JSON: {exc}")

    data_start = 9 + header_len
    payload = blob[data_start:]
    if len(payload) != int(header["payload_bytes"]):
        raise FormatError(
            path, data_start + min(len(payload), int(header["payload_bytes"])),
            f"payload is {len(payload)} bytes, directory says "
            f"{header['payload_bytes']}",
        )

    graph = ModelGraph.from_json_dict(header["graph"])
    params: dict = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        if entry["nbytes"] != count * 4:
            raise IntegrityError(
                path,
                f"{entry['layer']}.{entry['tensor']}: {entry['nbytes']} bytes "
                f"for shape {shape}",
            )
        lo = entry["offset"]
        arr = np.frombuffer(payload[lo : lo + entry["nbytes"]], dtype="<f4").reshape(
            shape
        ).copy()
        params.setdefault(entry["layer"], {})[entry["tensor"]] = arr

    ckpt = Checkpoint(graph=graph, params=params, metadata=header.get("metadata", {}))
    try:
        validate_params(graph, params)
    except Exception as exc:
        raise IntegrityError(path, str(exc)) from exc
    return ckpt

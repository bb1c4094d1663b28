"""Single-file checkpoint container.

Layout::

    b"TTRECV01"                      8-byte magic
    uint64 little-endian             header length in bytes
    header                           UTF-8 JSON
    payload                          raw little-endian arrays, C order

The header lists TT tables (plan plus one entry per core) and additional
named arrays; every array entry records dtype, shape, and its byte offset
relative to the start of the payload.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .core import ShapePlan, TtTable

MAGIC = b"TTRECV01"


def _le(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False)


def _entry(arr: np.ndarray, offset: int) -> dict:
    return {"dtype": arr.dtype.newbyteorder("<").str, "shape": list(arr.shape),
            "offset": offset, "nbytes": arr.nbytes}


def save_checkpoint(path, tables: dict[str, TtTable] | None = None,
                    arrays: dict[str, np.ndarray] | None = None, meta: dict | None = None) -> dict:
    """Write tables and arrays to ``path``; returns the header that was written."""
    tables = tables or {}
    arrays = arrays or {}
    blobs: list[np.ndarray] = []
    offset = 0
    header = {"format": MAGIC.decode(), "meta": meta or {}, "tables": [], "arrays": []}
    for name, table in tables.items():
        cores = []
        for core in table.cores:
            arr = _le(core)
            cores.append(_entry(arr, offset))
            blobs.append(arr)
            offset += arr.nbytes
        header["tables"].append({"name": name, "plan": table.plan.to_dict(),
                                 "dtype": np.dtype(table.dtype).name, "cores": cores})
    for name, value in arrays.items():
        arr = _le(np.asarray(value))
        entry = _entry(arr, offset)
        entry["name"] = name
        header["arrays"].append(entry)
        blobs.append(arr)
        offset += arr.nbytes
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for arr in blobs:
            fh.write(arr.tobytes(order="C"))
    return header


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a TTRECV01 checkpoint (magic {magic!r})")
        (length,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(length).decode("utf-8"))


def load_checkpoint(path) -> tuple[dict[str, TtTable], dict[str, np.ndarray], dict]:
    """Inverse of :func:`save_checkpoint`: ``(tables, arrays, header)``."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a TTRECV01 checkpoint")
    (length,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + length].decode("utf-8"))
    base = 16 + length

    def read(entry: dict) -> np.ndarray:
        dtype = np.dtype(entry["dtype"])
        start = base + entry["offset"]
        buf = data[start:start + entry["nbytes"]]
        if len(buf) != entry["nbytes"]:
            raise ValueError(f"{path}: truncated payload")
        arr = np.frombuffer(buf, dtype=dtype).reshape(entry["shape"])
        return arr.astype(dtype.newbyteorder("="), copy=True)

    tables = {}
    for t in header["tables"]:
        plan = ShapePlan.from_dict(t["plan"])
        tables[t["name"]] = TtTable(plan, [read(c) for c in t["cores"]], name=t["name"])
    arrays = {a["name"]: read(a) for a in header["arrays"]}
    return tables, arrays, header

"""Versioned binary container of named arrays.

Layout (all integers little-endian)::

    b"CCGPFA\\x00\\x01"          8-byte magic, last byte is the format version
    uint64                      length of the UTF-8 JSON header
    JSON header                 {"kind", "meta", "arrays": [{"name", "dtype", "shape", "offset", "nbytes"}]}
    raw array bytes             C-order, little-endian, at the stated offsets

Round-trips are bit exact.
"""

import json
import struct

import numpy as np

MAGIC = b"CCGPFA\x00"
VERSION = 1


class ContainerError(ValueError):
    pass


def write_container(path, arrays, meta=None, kind="generic"):
    entries = []
    blobs = []
    offset = 0
    for name, value in arrays.items():
        arr = np.asarray(value)
        if arr.dtype == object:
            raise ContainerError(f"array {name!r} has object dtype")
        arr = np.ascontiguousarray(arr.astype(arr.dtype.newbyteorder("<"), copy=False))
        raw = arr.tobytes(order="C")
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"kind": kind, "meta": meta or {}, "arrays": entries},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC + bytes([VERSION]))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def read_container(path, kind=None):
    """Return ``(arrays, meta)``; raises :class:`ContainerError` on malformed input."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:7] != MAGIC:
        raise ContainerError(f"{path}: not a ccgpfa container")
    if blob[7] != VERSION:
        raise ContainerError(f"{path}: unsupported container version {blob[7]}")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: corrupt header") from exc
    if kind is not None and header.get("kind") != kind:
        raise ContainerError(f"{path}: expected a {kind!r} container, found {header.get('kind')!r}")
    base = 16 + hlen
    arrays = {}
    for entry in header["arrays"]:
        start = base + entry["offset"]
        stop = start + entry["nbytes"]
        if stop > len(blob):
            raise ContainerError(f"{path}: array {entry['name']!r} is truncated")
        arr = np.frombuffer(blob[start:stop], dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return arrays, header["meta"]

"""Versioned binary container shared by model checkpoints and world bundles.

Layout: 4-byte magic, uint32 version, uint32 header length, UTF-8 JSON header,
then the raw little-endian array payloads in header order. No timestamps are
written, so identical inputs produce identical bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import MalformedFile


def write_bundle(path, magic: bytes, version: int, meta: dict,
                 arrays: dict[str, np.ndarray]) -> None:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    entries = []
    payloads = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dtype = arr.dtype.newbyteorder("<")
        data = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        entries.append({"name": name, "dtype": dtype.str, "shape": list(arr.shape)})
        payloads.append(data)
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", version, len(header)))
        fh.write(header)
        for data in payloads:
            fh.write(data)


def read_bundle(path, magic: bytes, versions=(1,)) -> tuple[int, dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != magic:
        raise MalformedFile(f"{path}: bad magic, expected {magic!r}")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version not in versions:
        raise MalformedFile(f"{path}: unsupported version {version}")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedFile(f"{path}: unreadable header") from exc
    offset = 12 + hlen
    arrays = {}
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(raw):
            raise MalformedFile(f"{path}: truncated payload for {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype=dtype, count=nbytes // dtype.itemsize,
                                              offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise MalformedFile(f"{path}: {len(raw) - offset} trailing bytes")
    return version, header["meta"], arrays

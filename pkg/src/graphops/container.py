"""Byte-deterministic array container: magic, length-prefixed JSON header,
then raw little-endian arrays in header order. Identical content always
serializes to identical bytes, which the reproducibility contract relies
on."""

import json
import struct

import numpy as np

_HEADER_LEN = struct.Struct("<Q")


def write_container(path, magic, meta, arrays):
    """arrays is an ordered list of (name, ndarray)."""
    header = {
        "meta": meta,
        "arrays": [
            {"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape)}
            for name, arr in arrays
        ],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(magic)
        f.write(_HEADER_LEN.pack(len(blob)))
        f.write(blob)
        for _, arr in arrays:
            arr = np.ascontiguousarray(arr)
            f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_container(path, magic):
    with open(path, "rb") as f:
        got = f.read(len(magic))
        if got != magic:
            raise ValueError(f"{path} has wrong magic for this container type")
        (hlen,) = _HEADER_LEN.unpack(f.read(_HEADER_LEN.size))
        header = json.loads(f.read(hlen).decode())
        arrays = {}
        for entry in header["arrays"]:
            dtype = np.dtype(entry["dtype"]).newbyteorder("<")
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            buf = f.read(count * dtype.itemsize)
            arr = np.frombuffer(buf, dtype=dtype).reshape(entry["shape"])
            arrays[entry["name"]] = arr.astype(dtype.newbyteorder("="))
    return header["meta"], arrays

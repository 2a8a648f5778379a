"""Flat binary checkpoints with a JSON shape manifest.

Layout::

    b"KDNASCKP"                 8-byte magic
    uint32 little-endian        header length in bytes
    header                      UTF-8 JSON: {"format_version", "dtype": "<f8",
                                "meta": {...}, "tensors": [{"name", "shape",
                                "offset"}]}; offsets count bytes from the start
                                of the payload
    payload                     float64 little-endian values, row-major
"""
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"KDNASCKP"
FORMAT_VERSION = 1


def save_arrays(path, arrays, meta=None):
    """Write ``{name: ndarray}`` (insertion order kept) plus a JSON ``meta`` dict."""
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(data.shape), "offset": offset})
        chunks.append(data.tobytes())
        offset += data.nbytes
    header = json.dumps({"format_version": FORMAT_VERSION, "dtype": "<f8",
                         "meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for chunk in chunks:
            fh.write(chunk)
    tmp.replace(path)


def load_arrays(path):
    """Return ``(arrays, meta)`` from :func:`save_arrays` output."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen])
    if header["format_version"] != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {header['format_version']}")
    base = 12 + hlen
    arrays = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = base + entry["offset"]
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=start) \
            .reshape(entry["shape"]).astype(np.float64)
    return arrays, header["meta"]


def save_model(model, path, extra_meta=None):
    meta = {"kind": "encoder", "arch": str(model.arch), "vocab_size": model.vocab_size,
            "max_seq": model.max_seq}
    meta.update(extra_meta or {})
    save_arrays(path, {k: v.data for k, v in model.params.items()}, meta)


def load_model(path):
    from .model import TransformerEncoder
    from .numerics import Tensor
    from .space import parse_state

    arrays, meta = load_arrays(path)
    params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
    return TransformerEncoder(parse_state(meta["arch"]), meta["vocab_size"], meta["max_seq"], params)

"""Tensor blob container shared by dataset features and checkpoints.

A blob is one line of JSON (``{"dtype": "<f4", "shape": [...]}``) followed by
the raw little-endian row-major bytes of a float32 array.
"""

import json

import numpy as np

BLOB_DTYPE = "<f4"


class BlobError(ValueError):
    """Malformed or truncated blob."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


def encode_blob(array):
    arr = np.ascontiguousarray(np.asarray(array, dtype=BLOB_DTYPE))
    header = json.dumps({"dtype": BLOB_DTYPE, "shape": list(arr.shape)}, sort_keys=True)
    return header.encode("ascii") + b"\n" + arr.tobytes(order="C")


def decode_blob(buf, offset=0):
    """Decode the blob starting at ``offset``; returns ``(array, end_offset)``."""
    newline = buf.find(b"\n", offset)
    if newline < 0:
        raise BlobError(f"truncated blob: no header terminator after byte {offset}", field="header")
    try:
        header = json.loads(buf[offset:newline].decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BlobError(f"unreadable blob header at byte {offset}: {exc}", field="header") from exc
    if header.get("dtype") != BLOB_DTYPE:
        raise BlobError(f"unsupported blob dtype {header.get('dtype')!r} at byte {offset}", field="dtype")
    shape = tuple(int(s) for s in header["shape"])
    nbytes = int(np.prod(shape, dtype=np.int64)) * 4
    start = newline + 1
    end = start + nbytes
    if end > len(buf):
        raise BlobError(
            f"truncated blob: expected bytes [{start}, {end}) but buffer ends at {len(buf)}",
            field="data",
        )
    arr = np.frombuffer(buf, dtype=BLOB_DTYPE, count=nbytes // 4, offset=start).reshape(shape)
    return arr.astype(np.float32), end

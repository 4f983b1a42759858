"""Named-array container used for every checkpoint.

Layout: an 8-byte little-endian header length, a UTF-8 JSON index
``{name: {"dtype", "shape", "offset"}}`` with an optional ``__metadata__`` entry,
then the raw little-endian value blobs in index order.
"""
import json
import logging
import os
import struct

import numpy as np

from errors import DataError

logger = logging.getLogger(__name__)

METADATA_KEY = "__metadata__"
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "int32": "<i4", "bool": "|b1"}


def save_arrays(path, arrays, metadata=None):
    """Write ``{name: ndarray}`` (plus JSON-serializable ``metadata``) to ``path``"""
    index = {}
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        dtype_name = arr.dtype.name
        if dtype_name not in _DTYPES:
            raise DataError(f"array '{name}' has unsupported dtype {dtype_name}")
        blob = np.ascontiguousarray(arr, dtype=_DTYPES[dtype_name]).tobytes()
        index[name] = {"dtype": dtype_name, "shape": list(arr.shape), "offset": offset}
        blobs.append(blob)
        offset += len(blob)
    if metadata is not None:
        index[METADATA_KEY] = metadata
    header = json.dumps(index, sort_keys=True).encode("utf-8")

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp_path, path)
    logger.debug("saved %d arrays (%d bytes) to %s", len(arrays), offset, path)


def load_arrays(path):
    """Read a container; returns ``(arrays, metadata)``"""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise DataError(f"{path}: truncated container")
    (header_len,) = struct.unpack("<Q", raw[:8])
    try:
        index = json.loads(raw[8:8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{path}: unreadable index ({e})") from e
    metadata = index.pop(METADATA_KEY, None)
    body = raw[8 + header_len:]
    arrays = {}
    for name, entry in index.items():
        dtype = np.dtype(_DTYPES[entry["dtype"]])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        stop = start + count * dtype.itemsize
        if stop > len(body):
            raise DataError(f"{path}: array '{name}' runs past end of file")
        values = np.frombuffer(body[start:stop], dtype=dtype).reshape(entry["shape"])
        arrays[name] = values.astype(entry["dtype"])
    return arrays, metadata


def read_metadata(path):
    return load_arrays(path)[1]

"""TMID1 checkpoint container.

Layout:
    magic bytes  b"TMID1"
    u32 little-endian byte length of the metadata document
    UTF-8 JSON metadata; its "entries" list fixes parameter order as
        [{"name": ..., "shape": [...]}, ...]
    raw little-endian float32 blocks, one per entry, in entry order
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"TMID1"


class CheckpointError(Exception):
    pass


def save_checkpoint(path, metadata, arrays):
    """Write named float32 arrays plus a metadata document.

    `arrays` is an ordered mapping name -> ndarray; entry order in the
    file follows the mapping order.
    """
    metadata = dict(metadata)
    metadata["entries"] = [{"name": name, "shape": list(arr.shape)} for name, arr in arrays.items()]
    doc = json.dumps(metadata, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(doc)))
        fh.write(doc)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return path


def load_checkpoint(path):
    """Read back (metadata, arrays) from a TMID1 file."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        raw_len = fh.read(4)
        if len(raw_len) != 4:
            raise CheckpointError(f"{path}: truncated header")
        (doc_len,) = struct.unpack("<I", raw_len)
        doc = fh.read(doc_len)
        if len(doc) != doc_len:
            raise CheckpointError(f"{path}: truncated metadata")
        metadata = json.loads(doc.decode("utf-8"))
        arrays = {}
        for entry in metadata.get("entries", []):
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            block = fh.read(4 * count)
            if len(block) != 4 * count:
                raise CheckpointError(f"{path}: truncated block for {entry['name']!r}")
            arrays[entry["name"]] = np.frombuffer(block, dtype="<f4").reshape(shape).copy()
        return metadata, arrays

"""Self-describing flat binary checkpoints.

One file holds two maps: named little-endian arrays (parameters, optimizer
moments, counters) and named UTF-8 text entries (the resolved config, format
notes). Loading returns exactly the bytes that were stored, so a saved
training state resumes bit-for-bit.

Byte layout, all integers little-endian:

    magic   8 bytes  b"GCACKPT\\0"
    version u16      currently 1
    n       u32      number of entries
    entry   repeated n times:
        name_len u16, name utf-8
        kind     u8   0 = array, 1 = text
        array: dtype_tag u8 (see _TAGS), ndim u8, ndim x u32 shape,
               raw C-order little-endian data
        text:  byte_len u32, utf-8 payload
"""

import struct

import numpy as np

_MAGIC = b"GCACKPT\x00"
_VERSION = 1

_TAGS = {0: "<f4", 1: "<f8", 2: "<i8", 3: "|u1", 4: "<i2", 5: "<i4"}
_TAG_FOR = {np.dtype(v): k for k, v in _TAGS.items()}


class CheckpointError(ValueError):
    """Malformed or unsupported checkpoint file."""


def save_checkpoint(path, arrays, text):
    """Write arrays (name -> ndarray) and text (name -> str) to path."""
    blobs = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        tag = _TAG_FOR.get(np.dtype(arr.dtype.str.replace(">", "<")))
        if tag is None:
            raise CheckpointError(
                f"array {name!r} has unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        data = np.ascontiguousarray(arr.astype(_TAGS[tag], copy=False))
        blobs.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BBB", 0, tag, arr.ndim)
                     + struct.pack(f"<{arr.ndim}I", *arr.shape)
                     + data.tobytes())
    for name, value in text.items():
        nb = name.encode("utf-8")
        vb = value.encode("utf-8")
        blobs.append(struct.pack("<H", len(nb)) + nb
                     + struct.pack("<BI", 1, len(vb)) + vb)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<HI", _VERSION, len(blobs)))
        for blob in blobs:
            fh.write(blob)


class _Reader:
    def __init__(self, raw):
        self.raw = raw
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.raw):
            raise CheckpointError(
                f"truncated checkpoint while reading {what}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path):
    """Read a checkpoint. Returns (arrays, text) dicts."""
    with open(path, "rb") as fh:
        raw = fh.read()
    rd = _Reader(raw)
    if rd.take(len(_MAGIC), "magic") != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version, n = rd.unpack("<HI", "header")
    if version != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    arrays, text = {}, {}
    for _ in range(n):
        (name_len,) = rd.unpack("<H", "name length")
        name = rd.take(name_len, "name").decode("utf-8")
        (kind,) = rd.unpack("<B", "entry kind")
        if kind == 0:
            tag, ndim = rd.unpack("<BB", "array header")
            if tag not in _TAGS:
                raise CheckpointError(f"{name}: unknown dtype tag {tag}")
            shape = rd.unpack(f"<{ndim}I", "shape")
            dtype = np.dtype(_TAGS[tag])
            count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            data = rd.take(count * dtype.itemsize, f"data of {name}")
            arr = np.frombuffer(data, dtype=dtype).reshape(shape)
            arrays[name] = arr.astype(dtype.newbyteorder("="))
        elif kind == 1:
            (nbytes,) = rd.unpack("<I", "text length")
            text[name] = rd.take(nbytes, f"text of {name}").decode("utf-8")
        else:
            raise CheckpointError(f"{name}: unknown entry kind {kind}")
    if rd.pos != len(raw):
        raise CheckpointError(
            f"{len(raw) - rd.pos} trailing bytes after the last entry")
    return arrays, text

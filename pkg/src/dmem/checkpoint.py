"""Flat binary tensor container plus plain-text key-value files.

Container layout (all integers little-endian int64, floats little-endian
float64): the magic string ``DMEM1``, then one record per tensor:

    name length | name bytes (utf-8) | 4 dims | payload (prod(dims) floats)

Rank-1 tensors (biases) are stored with leading singleton dims, (1, 1, 1, c);
the loader returns arrays in their stored 4-dim shape and callers reshape.
"""

from __future__ import annotations

import numpy as np

MAGIC = b"DMEM1"


def _stored_dims(shape):
    if len(shape) == 4:
        return tuple(int(d) for d in shape)
    if len(shape) == 1:
        return (1, 1, 1, int(shape[0]))
    raise ValueError(f"checkpoint stores rank-4 and rank-1 tensors only, got shape {shape}")


def save_tensors(path, named):
    """Write {name: array} to a DMEM1 container. Records are name-sorted so
    identical contents always produce identical bytes."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name in sorted(named):
            arr = np.ascontiguousarray(named[name], dtype=np.float64)
            raw = name.encode("utf-8")
            fh.write(np.int64(len(raw)).astype("<i8").tobytes())
            fh.write(raw)
            fh.write(np.array(_stored_dims(arr.shape), dtype="<i8").tobytes())
            fh.write(arr.astype("<f8").tobytes())


def load_tensors(path):
    """Read a DMEM1 container back into {name: float64 array (4-dim)}."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:5] != MAGIC:
        raise ValueError(f"{path} is not a DMEM1 container (bad magic {blob[:5]!r})")
    out = {}
    pos = 5
    while pos < len(blob):
        if pos + 8 > len(blob):
            raise ValueError(f"{path}: truncated record header at byte {pos}")
        (nlen,) = np.frombuffer(blob, dtype="<i8", count=1, offset=pos)
        pos += 8
        name = blob[pos:pos + int(nlen)].decode("utf-8")
        pos += int(nlen)
        dims = np.frombuffer(blob, dtype="<i8", count=4, offset=pos)
        pos += 32
        count = int(np.prod(dims))
        payload = np.frombuffer(blob, dtype="<f8", count=count, offset=pos)
        pos += count * 8
        out[name] = payload.reshape(tuple(int(d) for d in dims)).copy()
    return out


def write_kv(path, mapping):
    """Write a plain-text ``key = value`` file (manifests, run configs)."""
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in mapping.items():
            fh.write(f"{key} = {value}\n")


def read_kv(path):
    """Parse a ``key = value`` file; values stay strings, callers coerce.

    Blank lines and lines starting with ``#`` are ignored.
    """
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out

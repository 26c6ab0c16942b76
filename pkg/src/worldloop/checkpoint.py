"""Checkpoint file format.

A plain-text header (key = value lines) listing format version, dtype and
every array name with its shape, followed by the raw little-endian float64
buffers in header order. Round-trips are bit-exact.

    worldloop-checkpoint = 1
    dtype = float64
    meta.<key> = <value>          (optional, repeated)
    array = <name> <d0>x<d1>...
    ...
    end = header
    <raw bytes>
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import WorldloopError

MAGIC = "worldloop-checkpoint = 1"


class CheckpointError(WorldloopError):
    pass


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict[str, str] | None = None):
    path = Path(path)
    lines = [MAGIC, "dtype = float64"]
    for key, value in (meta or {}).items():
        value = str(value)
        if "\n" in key or "\n" in value:
            raise CheckpointError(f"meta entry {key!r} contains a newline")
        lines.append(f"meta.{key} = {value}")
    blobs = []
    for name, arr in arrays.items():
        if " " in name or "\n" in name:
            raise CheckpointError(f"array name {name!r} contains whitespace")
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        lines.append(f"array = {name} {'x'.join(str(d) for d in arr.shape)}")
        blobs.append(arr.astype("<f8", copy=False).tobytes(order="C"))
    lines.append("end = header")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for blob in blobs:
            fh.write(blob)


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    end_marker = b"end = header\n"
    cut = raw.find(end_marker)
    if cut < 0:
        raise CheckpointError(f"{path}: no header terminator")
    header = raw[:cut].decode("utf-8").splitlines()
    payload = raw[cut + len(end_marker):]
    if not header or header[0] != MAGIC:
        raise CheckpointError(f"{path}: bad magic line {header[0] if header else '<empty>'!r}")
    meta: dict[str, str] = {}
    specs: list[tuple[str, tuple[int, ...]]] = []
    for line in header[1:]:
        key, _, value = line.partition(" = ")
        if key == "dtype":
            if value != "float64":
                raise CheckpointError(f"{path}: unsupported dtype {value!r}")
        elif key.startswith("meta."):
            meta[key[5:]] = value
        elif key == "array":
            name, _, dims = value.partition(" ")
            shape = tuple(int(d) for d in dims.split("x")) if dims else (1,)
            specs.append((name, shape))
        else:
            raise CheckpointError(f"{path}: unknown header line {line!r}")
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in specs:
        count = int(np.prod(shape))
        nbytes = count * 8
        if offset + nbytes > len(payload):
            raise CheckpointError(f"{path}: truncated payload at array {name!r}")
        arrays[name] = np.frombuffer(payload[offset : offset + nbytes], dtype="<f8").reshape(shape).copy()
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - offset} trailing bytes after arrays")
    return arrays, meta

"""Flat binary container of named float64 arrays.

Layout (all text is ASCII, lines end with a single ``\\n``)::

    GATOR-ARRAYS 1
    <name> <shape> <offset> <nbytes>      one line per array
    END
    <data>

``shape`` is ``x``-separated dimensions (``64x3x7x7``) or ``-`` for a scalar.
``offset`` counts bytes from the first byte after the ``END`` line. Data is
little-endian IEEE-754 double precision, C order, arrays packed back to back
in header order.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

MAGIC = b"GATOR-ARRAYS 1\n"


def dumps(arrays: dict[str, np.ndarray]) -> bytes:
    header = [MAGIC]
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        if not name or any(ch.isspace() for ch in name):
            raise ValueError(f"array name {name!r} must be non-empty without whitespace")
        a = np.asarray(arr, dtype="<f8", order="C")
        shape = "x".join(str(d) for d in a.shape) if a.ndim else "-"
        blob = a.tobytes()
        header.append(f"{name} {shape} {offset} {len(blob)}\n".encode())
        blobs.append(blob)
        offset += len(blob)
    header.append(b"END\n")
    return b"".join(header + blobs)


def loads(data: bytes) -> dict[str, np.ndarray]:
    if not data.startswith(MAGIC):
        raise ValueError("not a gator array container (bad magic line)")
    pos = len(MAGIC)
    entries = []
    while True:
        end = data.find(b"\n", pos)
        if end < 0:
            raise ValueError("truncated container header")
        line = data[pos:end].decode("ascii")
        pos = end + 1
        if line == "END":
            break
        parts = line.split(" ")
        if len(parts) != 4:
            raise ValueError(f"malformed header line {line!r}")
        name, shape_s, off, nbytes = parts
        shape = () if shape_s == "-" else tuple(int(d) for d in shape_s.split("x"))
        entries.append((name, shape, int(off), int(nbytes)))
    out = {}
    for name, shape, off, nbytes in entries:
        if nbytes != 8 * int(np.prod(shape, dtype=np.int64)):
            raise ValueError(f"{name}: byte count {nbytes} does not match shape {shape}")
        start = pos + off
        if start + nbytes > len(data):
            raise ValueError(f"{name}: data truncated")
        out[name] = np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=start).astype(np.float64).reshape(shape)
    return out


def save(path, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(arrays))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())


def gates_to_arrays(state) -> dict[str, np.ndarray]:
    arrays = {"tau": np.array(state.tau)}
    for j in state.edges:
        arrays[f"edge{j}.theta"] = state.theta[j]
        arrays[f"edge{j}.pruned"] = state.pruned[j].astype(np.float64)
        arrays[f"edge{j}.floor"] = np.array([state.floor[j]], dtype=np.float64)
    return arrays


def gates_from_arrays(arrays: dict[str, np.ndarray]):
    from gator.gating import GateState

    theta, pruned, floor = {}, {}, {}
    for name, arr in arrays.items():
        if not name.startswith("edge"):
            continue
        key, field = name[4:].split(".", 1)
        j = int(key)
        if field == "theta":
            theta[j] = arr.copy()
        elif field == "pruned":
            pruned[j] = arr.astype(bool)
        elif field == "floor":
            floor[j] = int(arr[0])
    if set(theta) != set(pruned):
        raise ValueError("gate checkpoint has mismatched theta/pruned entries")
    for j in theta:
        floor.setdefault(j, 1)
    return GateState(theta, pruned, floor, float(np.asarray(arrays.get("tau", 1.0)).reshape(-1)[0]))


def save_gates(path, state) -> None:
    save(path, gates_to_arrays(state))


def load_gates(path):
    return gates_from_arrays(load(path))

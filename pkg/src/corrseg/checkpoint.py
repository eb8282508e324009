"""Checkpoint file format: a UTF-8 header of `key: value` lines (config echo,
epoch counters, metrics, RNG states) followed by named parameter sections of
little-endian float32 with declared shapes, behind a versioned magic string."""

from __future__ import annotations

from pathlib import Path

import numpy as np

MAGIC = "corrseg-checkpoint v1"


class CheckpointError(ValueError):
    """Malformed checkpoint file."""


def save_checkpoint(path: Path | str, header: dict[str, str], arrays: dict[str, np.ndarray]) -> None:
    chunks: list[bytes] = [f"{MAGIC}\n".encode()]
    for key, value in header.items():
        value = str(value)
        if "\n" in value:
            raise CheckpointError(f"header value for {key!r} contains a newline")
        chunks.append(f"{key}: {value}\n".encode())
    chunks.append(f"sections: {len(arrays)}\n".encode())
    for name, array in arrays.items():
        arr = np.asarray(array, dtype="<f4")
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        dims = " ".join(str(d) for d in arr.shape)
        chunks.append(f"section: {name} f32le {dims}".rstrip().encode() + b"\n")
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def _read_line(buf: bytes, pos: int) -> tuple[str, int]:
    end = buf.find(b"\n", pos)
    if end < 0:
        raise CheckpointError("unexpected end of file")
    return buf[pos:end].decode("utf-8"), end + 1


def load_checkpoint(path: Path | str) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    line, pos = _read_line(buf, 0)
    if line != MAGIC:
        raise CheckpointError(f"{path}: bad magic {line!r}")
    header: dict[str, str] = {}
    n_sections = None
    while True:
        line, pos = _read_line(buf, pos)
        key, sep, value = line.partition(":")
        if not sep:
            raise CheckpointError(f"{path}: malformed header line {line!r}")
        key = key.strip()
        value = value.strip()
        if key == "sections":
            n_sections = int(value)
            break
        header[key] = value
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n_sections):
        line, pos = _read_line(buf, pos)
        if not line.startswith("section: "):
            raise CheckpointError(f"{path}: expected a section line, got {line!r}")
        parts = line[len("section: "):].split()
        name, dtype, dims = parts[0], parts[1], parts[2:]
        if dtype != "f32le":
            raise CheckpointError(f"{path}: unsupported section dtype {dtype!r}")
        shape = tuple(int(d) for d in dims)
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        if pos + nbytes > len(buf):
            raise CheckpointError(f"{path}: truncated section {name!r}")
        arrays[name] = np.frombuffer(buf[pos : pos + nbytes], dtype="<f4").reshape(shape).copy()
        pos += nbytes
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return header, arrays

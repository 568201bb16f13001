"""Minimal binary little-endian PLY reader/writer for point attributes."""

from __future__ import annotations

import numpy as np

_PLY_TYPES = {
    "float": "<f4",
    "double": "<f8",
    "int": "<i4",
    "uint": "<u4",
    "short": "<i2",
    "ushort": "<u2",
    "char": "b",
    "uchar": "B",
}
_NUMPY_TYPES = {np.dtype(v): k for k, v in _PLY_TYPES.items()}


def write_ply(path, data: np.ndarray, comments: list[str] | None = None) -> None:
    """Write a structured array as a binary PLY 'vertex' element."""
    lines = ["ply", "format binary_little_endian 1.0"]
    for comment in comments or []:
        lines.append(f"comment {comment}")
    lines.append(f"element vertex {len(data)}")
    for name in data.dtype.names:
        base = data.dtype[name]
        lines.append(f"property {_NUMPY_TYPES[base]} {name}")
    lines.append("end_header\n")
    with open(path, "wb") as fh:
        fh.write("\n".join(lines).encode("ascii"))
        fh.write(data.tobytes())


def read_ply(path) -> tuple[np.ndarray, list[str]]:
    """Read the 'vertex' element of a binary little-endian PLY.

    Returns the structured array and any header comments.
    """
    with open(path, "rb") as fh:
        header = b""
        while not header.endswith(b"end_header\n"):
            chunk = fh.readline()
            if not chunk:
                raise ValueError(f"{path}: truncated PLY header")
            header += chunk
        lines = header.decode("ascii").splitlines()
        if lines[0].strip() != "ply":
            raise ValueError(f"{path}: not a PLY file")
        if "binary_little_endian" not in lines[1]:
            raise ValueError(f"{path}: only binary_little_endian is supported")
        comments = [ln[len("comment "):] for ln in lines if ln.startswith("comment ")]
        count = 0
        fields: list[tuple[str, str]] = []
        for ln in lines:
            parts = ln.split()
            if parts[:2] == ["element", "vertex"]:
                count = int(parts[2])
            elif parts and parts[0] == "property":
                if parts[1] == "list":
                    raise ValueError(f"{path}: list properties are not supported")
                fields.append((parts[2], _PLY_TYPES[parts[1]]))
        dtype = np.dtype(fields)
        data = np.frombuffer(fh.read(count * dtype.itemsize), dtype=dtype, count=count)
    return data.copy(), comments

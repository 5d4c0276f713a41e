"""Versioned plain-text container for named float arrays.

Layout::

    fbvc-<kind> <version>
    meta <key> <value>            (any number of lines)
    array <name> <d0> [<d1> ...]  (followed by the values, row-major,
                                   one row of the trailing axis per line)
    end

Floats are written with 17 significant digits so a save/load round trip is
exact.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np


class FormatError(ValueError):
    pass


def _fmt_row(row) -> str:
    return " ".join(f"{v:.17g}" for v in row)


def write_arrays(path, kind: str, version: int, meta: dict, arrays: dict) -> None:
    lines = [f"fbvc-{kind} {version}"]
    for key, value in meta.items():
        text = str(value)
        if not text or any(c.isspace() for c in str(key)) or "\n" in text:
            raise FormatError(f"bad meta entry {key!r}={value!r}")
        lines.append(f"meta {key} {text}")
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        shape = arr.shape if arr.ndim else (1,)
        lines.append("array " + name + " " + " ".join(str(d) for d in shape))
        flat = arr.reshape(-1, shape[-1]) if arr.size else np.zeros((0, 0))
        lines.extend(_fmt_row(r) for r in flat)
    lines.append("end")
    Path(path).write_text("\n".join(lines) + "\n")


def read_arrays(path, kind: str, version: int):
    """Return ``(meta, arrays)``; raises :class:`FormatError` on any mismatch."""
    text = Path(path).read_text().splitlines()
    if not text:
        raise FormatError(f"{path}: empty file")
    head = text[0].split()
    if len(head) != 2 or head[0] != f"fbvc-{kind}":
        raise FormatError(f"{path}: expected a fbvc-{kind} file, found {text[0]!r}")
    if int(head[1]) != version:
        raise FormatError(f"{path}: unsupported {kind} version {head[1]} (want {version})")
    meta, arrays = {}, {}
    i = 1
    while i < len(text):
        line = text[i]
        if line == "end":
            return meta, arrays
        parts = line.split(" ", 2)
        if parts[0] == "meta" and len(parts) == 3:
            meta[parts[1]] = parts[2]
            i += 1
        elif parts[0] == "array":
            fields = line.split()
            name, shape = fields[1], tuple(int(d) for d in fields[2:])
            n_rows = int(np.prod(shape[:-1])) if len(shape) > 1 else 1
            rows = text[i + 1 : i + 1 + n_rows]
            if len(rows) != n_rows:
                raise FormatError(f"{path}: array {name} truncated")
            try:
                values = np.array([[float(v) for v in r.split()] for r in rows], dtype=np.float64)
            except ValueError as exc:
                raise FormatError(f"{path}: array {name}: {exc}") from None
            if values.size != int(np.prod(shape)):
                raise FormatError(f"{path}: array {name} has {values.size} values, shape {shape}")
            arrays[name] = values.reshape(shape)
            i += 1 + n_rows
        else:
            raise FormatError(f"{path}: line {i + 1}: cannot parse {line[:40]!r}")
    raise FormatError(f"{path}: missing end marker")

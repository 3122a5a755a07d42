"""Flat binary tensor archive with a plain-text manifest.

An archive is a directory holding two files:

``tensors.bin``
    all tensors back to back, little-endian float64, C order.
``manifest.txt``
    one line per entry::

        # fedbreach tensor archive v1
        meta <key> = <value>
        tensor <name> float64 <d0,d1,...> <byte offset>

Scalars use an empty shape field written as ``-``.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

HEADER = "# fedbreach tensor archive v1"
_DTYPE = np.dtype("<f8")


def save_archive(path, tensors: dict, meta: dict | None = None) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    lines = [HEADER]
    for key in sorted(meta or {}):
        value = str(meta[key])
        if "\n" in value:
            raise ValueError(f"meta value for {key!r} spans lines")
        lines.append(f"meta {key} = {value}")
    offset = 0
    with open(out / "tensors.bin", "wb") as fh:
        for name, arr in tensors.items():
            if any(c.isspace() for c in name):
                raise ValueError(f"tensor name {name!r} contains whitespace")
            a = np.array(arr, dtype=_DTYPE, order="C")
            shape = ",".join(str(s) for s in a.shape) or "-"
            lines.append(f"tensor {name} float64 {shape} {offset}")
            fh.write(a.tobytes())
            offset += a.nbytes
    (out / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out


def load_archive(path) -> tuple[dict, dict]:
    src = Path(path)
    text = (src / "manifest.txt").read_text(encoding="utf-8").splitlines()
    if not text or text[0] != HEADER:
        raise ValueError(f"{src} is not a tensor archive")
    blob = (src / "tensors.bin").read_bytes()
    meta, tensors = {}, {}
    for line in text[1:]:
        if not line.strip():
            continue
        kind, rest = line.split(" ", 1)
        if kind == "meta":
            key, value = rest.split(" = ", 1)
            meta[key] = value
        elif kind == "tensor":
            name, dtype, shape_s, off_s = rest.split()
            if dtype != "float64":
                raise ValueError(f"unsupported dtype {dtype} for {name}")
            shape = () if shape_s == "-" else tuple(int(s) for s in shape_s.split(","))
            count = int(np.prod(shape)) if shape else 1
            off = int(off_s)
            end = off + count * _DTYPE.itemsize
            if end > len(blob):
                raise ValueError(f"tensor {name} runs past the end of tensors.bin")
            tensors[name] = np.frombuffer(blob[off:end], dtype=_DTYPE).reshape(shape).copy()
        else:
            raise ValueError(f"unknown manifest line: {line!r}")
    return tensors, meta

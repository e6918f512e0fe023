"""Self-describing binary container used for datasets and checkpoints.

Layout::

    key = value\\n          (UTF-8, one pair per line, keys unique)
    ...
    \\n                     (blank line ends the header)
    <little-endian float32 payload>

The payload is a single flat float32 run; the header says how to slice it.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

FLOAT = np.dtype("<f4")


def format_header(header: dict[str, object]) -> bytes:
    lines = []
    for key, value in header.items():
        key = str(key)
        text = str(value)
        if "=" in key or "\n" in key or "\n" in text or not key.strip():
            raise ValueError(f"header entry {key!r} cannot be encoded")
        lines.append(f"{key} = {text}\n")
    return ("".join(lines) + "\n").encode("utf-8")


def parse_header(lines: list[str]) -> dict[str, str]:
    header = {}
    for line in lines:
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"malformed header line {line!r}")
        header[key.strip()] = value.strip()
    return header


def write_container(path: str | os.PathLike, header: dict[str, object], payload: np.ndarray) -> None:
    data = np.ascontiguousarray(payload, dtype=FLOAT)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(format_header(header))
        fh.write(data.tobytes())
    os.replace(tmp, path)


def read_container(path: str | os.PathLike) -> tuple[dict[str, str], np.ndarray]:
    with open(path, "rb") as fh:
        lines = []
        while True:
            raw = fh.readline()
            if not raw:
                raise ValueError(f"{path}: header not terminated by a blank line")
            if raw == b"\n":
                break
            lines.append(raw.decode("utf-8").rstrip("\n"))
        payload = np.frombuffer(fh.read(), dtype=FLOAT)
    return parse_header(lines), payload

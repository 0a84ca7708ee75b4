"""SBCKPT v1 text checkpoints.

Layout: the header line ``SBCKPT v1`` followed by one line per array::

    <name> <d1>x<d2>x...  <v1> <v2> ...

Values are written with 17 significant digits, which round-trips float64
exactly.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

import numpy as np

from scenebias.errors import FormatError

HEADER = "SBCKPT v1"


def dumps(state: Mapping[str, np.ndarray]) -> str:
    lines = [HEADER]
    for name, arr in state.items():
        arr = np.asarray(arr, dtype=np.float64)
        if not name or any(ch.isspace() for ch in name):
            raise ValueError(f"invalid parameter name {name!r}")
        shape = "x".join(str(d) for d in arr.shape) or "1"
        values = " ".join(format(v, ".17g") for v in arr.reshape(-1).tolist())
        lines.append(f"{name} {shape} {values}")
    return "\n".join(lines) + "\n"


def save(path, state: Mapping[str, np.ndarray]) -> None:
    Path(path).write_text(dumps(state))


def load(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if not raw.startswith(HEADER.encode()):
        raise FormatError(path, 0, f"bad magic {raw[:len(HEADER)]!r}, expected {HEADER!r}")
    state: dict[str, np.ndarray] = {}
    offset = 0
    for lineno, line in enumerate(raw.decode("ascii", errors="replace").split("\n")):
        here = offset
        offset += len(line) + 1
        if lineno == 0 or not line.strip():
            continue
        fields = line.split()
        try:
            shape = tuple(int(d) for d in fields[1].split("x"))
            values = np.array([float(v) for v in fields[2:]], dtype=np.float64)
            state[fields[0]] = values.reshape(shape)
        except (IndexError, ValueError) as exc:
            raise FormatError(path, here, f"malformed record on line {lineno + 1}: {exc}") from exc
    return state

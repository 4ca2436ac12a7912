"""Line-oriented text checkpoints.

Each tensor takes two lines::

    tensor <name> <dim> [<dim> ...]
    <v0> <v1> ...

Values are written with 17 significant digits, which round-trips IEEE
doubles exactly.
"""

from __future__ import annotations

import os
import tempfile
from pathlib import Path
from typing import Sequence

import numpy as np

from .network import DenseNet
from .tensor import ParamTensor, ShapeError


class CheckpointError(ValueError):
    pass


def format_float(v: float) -> str:
    return format(float(v), ".17g")


def dumps(params: Sequence[ParamTensor]) -> str:
    lines = []
    for p in params:
        if not p.name or any(c.isspace() for c in p.name):
            raise CheckpointError(f"tensor names must be non-empty without whitespace: {p.name!r}")
        lines.append(" ".join(["tensor", p.name, *map(str, p.shape)]))
        lines.append(" ".join(format_float(v) for v in p.data))
    return "\n".join(lines) + "\n"


def loads(text: str) -> list[ParamTensor]:
    lines = [line for line in text.splitlines() if line.strip()]
    if len(lines) % 2:
        raise CheckpointError("checkpoint has a header without a value line")
    out = []
    for k in range(0, len(lines), 2):
        header = lines[k].split()
        if len(header) < 3 or header[0] != "tensor":
            raise CheckpointError(f"line {k + 1}: expected 'tensor <name> <shape...>'")
        try:
            shape = tuple(int(s) for s in header[2:])
            values = np.array([float(v) for v in lines[k + 1].split()], dtype=np.float64)
            out.append(ParamTensor(shape, values, header[1]))
        except ValueError as exc:
            raise CheckpointError(f"line {k + 1}: {exc}") from None
    return out


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def save(path, params: Sequence[ParamTensor]) -> None:
    atomic_write_text(path, dumps(params))


def load(path) -> list[ParamTensor]:
    return loads(Path(path).read_text(encoding="utf-8"))


def load_into(path, template: DenseNet) -> DenseNet:
    """Read a checkpoint and place its tensors into ``template``'s architecture."""
    params = load(path)
    try:
        return template.with_params(params)
    except ShapeError as exc:
        raise CheckpointError(f"{path}: {exc}") from None

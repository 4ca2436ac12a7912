"""Parameter storage shared by every network in the package."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor shapes do not line up."""


class NonFiniteError(ValueError):
    """A NaN or infinity reached an operation that requires finite values."""


@dataclass(eq=False)
class ParamTensor:
    """A named block of real parameters.

    ``data`` is always a flat float64 array in row-major order; ``value``
    gives the shaped view used by the arithmetic. Instances hash by
    identity so they can key gradient maps.
    """

    shape: tuple[int, ...]
    data: np.ndarray
    name: str = field(default="")

    def __post_init__(self) -> None:
        self.shape = tuple(int(s) for s in self.shape)
        if any(s <= 0 for s in self.shape):
            raise ShapeError(f"{self.name or 'tensor'}: shape entries must be positive, got {self.shape}")
        data = np.ascontiguousarray(self.data, dtype=np.float64).reshape(-1)
        if data.size != int(np.prod(self.shape)):
            raise ShapeError(
                f"{self.name or 'tensor'}: data length {data.size} does not match shape {self.shape}"
            )
        self.data = data

    @classmethod
    def from_array(cls, array: np.ndarray, name: str = "") -> "ParamTensor":
        array = np.asarray(array, dtype=np.float64)
        return cls(shape=array.shape, data=array.reshape(-1).copy(), name=name)

    @property
    def value(self) -> np.ndarray:
        return self.data.reshape(self.shape)

    @property
    def size(self) -> int:
        return self.data.size

    @classmethod
    def _trusted(cls, shape: tuple[int, ...], data: np.ndarray, name: str) -> "ParamTensor":
        # skips validation; callers guarantee a flat float64 array of the right size
        obj = cls.__new__(cls)
        obj.shape, obj.data, obj.name = shape, data, name
        return obj

    def copy(self) -> "ParamTensor":
        return ParamTensor._trusted(self.shape, self.data.copy(), self.name)

    def with_data(self, data: np.ndarray) -> "ParamTensor":
        data = np.asarray(data, dtype=np.float64)
        if data.ndim == 1 and data.size == self.data.size:
            return ParamTensor._trusted(self.shape, data, self.name)
        return ParamTensor(self.shape, data, self.name)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def __repr__(self) -> str:
        return f"ParamTensor(name={self.name!r}, shape={self.shape})"


def check_compatible(a: Sequence[ParamTensor], b: Sequence[ParamTensor]) -> None:
    if len(a) != len(b):
        raise ShapeError(f"parameter sets differ in length: {len(a)} vs {len(b)}")
    for k, (p, q) in enumerate(zip(a, b)):
        if p.shape != q.shape:
            raise ShapeError(f"entry {k} ({p.name or q.name}): shape {p.shape} vs {q.shape}")


def params_digest(params: Iterable[ParamTensor]) -> str:
    """SHA-256 over shapes and raw bytes; equal digests mean bitwise-equal sets."""
    h = hashlib.sha256()
    for p in params:
        h.update(repr(p.shape).encode())
        h.update(p.data.tobytes())
    return h.hexdigest()


def flatten(params: Sequence[ParamTensor]) -> np.ndarray:
    if not params:
        return np.zeros(0)
    return np.concatenate([p.data for p in params])


def unflatten(template: Sequence[ParamTensor], flat: np.ndarray) -> list[ParamTensor]:
    flat = np.asarray(flat, dtype=np.float64)
    total = sum(p.size for p in template)
    if flat.size != total:
        raise ShapeError(f"flat vector has {flat.size} entries, template needs {total}")
    out, offset = [], 0
    for p in template:
        out.append(p.with_data(flat[offset:offset + p.size].copy()))
        offset += p.size
    return out

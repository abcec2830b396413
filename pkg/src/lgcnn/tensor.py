"""Dense float tensors and the numeric core shared by every other module.

The kit standardizes on the activation layout (batch, channels, height,
width) with row-major storage. Training state is float32; float64 is also
accepted so the gradient-check harness can rerun layers at higher
precision.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from io import BytesIO
from typing import BinaryIO

import numpy as np

__all__ = ["ShapeError", "Shape4", "Tensor"]

_U64 = struct.Struct("<Q")
_MAX_RANK = 32


class ShapeError(ValueError):
    """A tensor operation received shapes that violate its contract."""


@dataclass(frozen=True)
class Shape4:
    """Canonical activation shape: (batch, channels, height, width)."""

    batch: int
    channels: int
    height: int
    width: int

    def __post_init__(self) -> None:
        for name, value in vars(self).items():
            if int(value) < 1:
                raise ShapeError(f"Shape4.{name} must be >= 1, got {value}")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.batch, self.channels, self.height, self.width)

    @property
    def spatial(self) -> tuple[int, int]:
        return (self.height, self.width)


class Tensor:
    """Dense n-dimensional float array with loud, explicit shape rules.

    Binary operations accept an equal-shaped tensor (or array) or a plain
    python scalar; any other combination raises ``ShapeError`` instead of
    broadcasting. Data is always contiguous row-major.
    """

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim < 1 or arr.size == 0:
            raise ShapeError(
                f"tensors must have rank >= 1 with no empty dimension, got shape {arr.shape}"
            )
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)

    # ---- construction helpers -------------------------------------------

    @classmethod
    def zeros(cls, shape, dtype=np.float32) -> "Tensor":
        return cls(np.zeros(shape, dtype=dtype))

    @classmethod
    def ones(cls, shape, dtype=np.float32) -> "Tensor":
        return cls(np.ones(shape, dtype=dtype))

    @classmethod
    def full(cls, shape, value, dtype=np.float32) -> "Tensor":
        return cls(np.full(shape, value, dtype=dtype))

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype))

    # ---- basic introspection --------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def rank(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name})"

    def __getitem__(self, index):
        out = self.data[index]
        if np.ndim(out) == 0:
            return float(out)
        return Tensor(out)

    def take(self, indices) -> "Tensor":
        """Gather rows along the leading (batch) axis."""
        return Tensor(self.data[np.asarray(indices)])

    def tolist(self):
        return self.data.tolist()

    # ---- shape manipulation ---------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        if int(np.prod(shape)) != self.size:
            raise ShapeError(f"cannot reshape {self.shape} (size {self.size}) to {shape}")
        return Tensor(self.data.reshape(shape))

    # ---- elementwise arithmetic -----------------------------------------

    def elementwise(self, other, op: str) -> "Tensor":
        ufunc = {"add": np.add, "sub": np.subtract, "mul": np.multiply, "div": np.divide}.get(op)
        if ufunc is None:
            raise ValueError(f"unknown elementwise op {op!r}")
        other_arr = self._coerce_operand(other)
        if op == "div" and np.any(other_arr == 0):
            raise ZeroDivisionError("elementwise division by zero")
        return Tensor(ufunc(self.data, other_arr))

    def _coerce_operand(self, other) -> np.ndarray:
        if isinstance(other, Tensor):
            other = other.data
        if np.isscalar(other) or (isinstance(other, np.ndarray) and other.ndim == 0):
            return np.asarray(other, dtype=self.data.dtype)
        other = np.asarray(other)
        if other.shape != self.shape:
            raise ShapeError(f"elementwise shapes differ: {self.shape} vs {other.shape}")
        return other

    def __add__(self, other):
        return self.elementwise(other, "add")

    __radd__ = __add__

    def __sub__(self, other):
        return self.elementwise(other, "sub")

    def __rsub__(self, other):
        return Tensor(self._coerce_operand(other) - self.data)

    def __mul__(self, other):
        return self.elementwise(other, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self.elementwise(other, "div")

    def __neg__(self):
        return Tensor(-self.data)

    # ---- linear algebra / reductions ------------------------------------

    def matmul(self, other: "Tensor") -> "Tensor":
        rhs = other.data if isinstance(other, Tensor) else np.asarray(other)
        if self.rank != 2 or rhs.ndim != 2:
            raise ShapeError(f"matmul needs two rank-2 tensors, got ranks {self.rank} and {rhs.ndim}")
        if self.shape[1] != rhs.shape[0]:
            raise ShapeError(f"matmul inner dimensions differ: {self.shape} @ {rhs.shape}")
        return Tensor(self.data @ rhs)

    def __matmul__(self, other):
        return self.matmul(other)

    def reduce(self, axis: int, op: str):
        """Reduce one axis away. Reducing a rank-1 tensor returns a float.

        ``var`` is the population variance (divide by the element count).
        """
        fn = {"sum": np.sum, "max": np.max, "mean": np.mean, "var": np.var}.get(op)
        if fn is None:
            raise ValueError(f"unknown reduction {op!r}")
        if not (0 <= axis < self.rank):
            raise ShapeError(f"axis {axis} out of range for rank-{self.rank} tensor")
        out = fn(self.data, axis=axis)
        if np.ndim(out) == 0:
            return float(out)
        return Tensor(out)

    # ---- serialization ---------------------------------------------------

    # Wire format: rank as little-endian u64, then each dim as u64, then the
    # elements as raw little-endian float32 in row-major order.

    def write_into(self, fh: BinaryIO) -> None:
        fh.write(_U64.pack(self.rank))
        for dim in self.shape:
            fh.write(_U64.pack(dim))
        fh.write(np.ascontiguousarray(self.data, dtype="<f4").tobytes())

    @classmethod
    def read_from(cls, fh: BinaryIO) -> "Tensor":
        head = fh.read(_U64.size)
        if len(head) != _U64.size:
            raise ValueError("truncated tensor: missing rank header")
        rank = _U64.unpack(head)[0]
        if not (1 <= rank <= _MAX_RANK):
            raise ValueError(f"corrupt tensor header: rank {rank}")
        dims = []
        for _ in range(rank):
            raw = fh.read(_U64.size)
            if len(raw) != _U64.size:
                raise ValueError("truncated tensor: missing dimension header")
            dims.append(_U64.unpack(raw)[0])
        if any(d < 1 for d in dims):
            raise ValueError(f"corrupt tensor header: dims {dims}")
        count = int(np.prod(dims))
        payload = fh.read(4 * count)
        if len(payload) != 4 * count:
            raise ValueError("truncated tensor: payload shorter than header declares")
        data = np.frombuffer(payload, dtype="<f4").reshape(dims)
        return cls(data.astype(np.float32))

    def to_bytes(self) -> bytes:
        buf = BytesIO()
        self.write_into(buf)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Tensor":
        buf = BytesIO(raw)
        out = cls.read_from(buf)
        if buf.read(1):
            raise ValueError("trailing bytes after tensor payload")
        return out

# tensor.py
"""
Typed multidimensional tensors and the value-level quantization arithmetic.

Quantized values follow value = (q - offset) * scale, rounding is half away
from zero everywhere, and ranges are widened to include zero before the
parameters are chosen.
"""

import math
import re
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import ProfileError, TypeCheckError

INT8_MIN = -128
INT8_MAX = 127
OFFSET_MIN = -(2 ** 31)
OFFSET_MAX = 2 ** 31 - 1
RANGE_EPSILON = 1e-6


class ElemKind(Enum):
    FLOAT32 = "float"
    INT8Q = "int8q"
    INT64_INDEX = "index"
    BOOL = "bool"

    @property
    def dtype(self) -> np.dtype:
        return _DTYPES[self]

    @property
    def itemsize(self) -> int:
        return _DTYPES[self].itemsize


_DTYPES = {
    ElemKind.FLOAT32: np.dtype("<f4"),
    ElemKind.INT8Q: np.dtype("i1"),
    ElemKind.INT64_INDEX: np.dtype("<i8"),
    ElemKind.BOOL: np.dtype("?"),
}

_TYPE_RE = re.compile(
    r"^(float|int8q|index|bool)(?:\(([^,()]+),(-?\d+)\))?<(\d+(?: x \d+)*)>$"
)


@dataclass(frozen=True)
class TensorType:
    elem_kind: ElemKind
    dims: Tuple[int, ...]
    scale: Optional[float] = None
    offset: Optional[int] = None

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        object.__setattr__(self, "dims", dims)
        if not dims:
            raise TypeCheckError("tensor type needs at least one dimension")
        if any(d < 1 for d in dims):
            raise TypeCheckError(f"non-positive extent in dims {dims}")
        if self.elem_kind is ElemKind.INT8Q:
            if self.scale is None or self.offset is None:
                raise TypeCheckError("quantized type requires scale and offset")
            scale = float(self.scale)
            if not (scale > 0) or math.isinf(scale):
                raise TypeCheckError(f"quantization scale must be positive, got {self.scale}")
            offset = int(self.offset)
            if not OFFSET_MIN <= offset <= OFFSET_MAX:
                raise TypeCheckError(f"quantization offset {offset} out of range")
            object.__setattr__(self, "scale", scale)
            object.__setattr__(self, "offset", offset)
        elif self.scale is not None or self.offset is not None:
            raise TypeCheckError(f"{self.elem_kind.value} type cannot carry scale/offset")

    # -- constructors -----------------------------------------------------
    @classmethod
    def float32(cls, *dims: int) -> "TensorType":
        return cls(ElemKind.FLOAT32, tuple(dims))

    @classmethod
    def int8q(cls, dims: Sequence[int], scale: float, offset: int) -> "TensorType":
        return cls(ElemKind.INT8Q, tuple(dims), scale, offset)

    @classmethod
    def boolean(cls, *dims: int) -> "TensorType":
        return cls(ElemKind.BOOL, tuple(dims))

    @classmethod
    def index(cls, *dims: int) -> "TensorType":
        return cls(ElemKind.INT64_INDEX, tuple(dims))

    @classmethod
    def parse(cls, text: str) -> "TensorType":
        m = _TYPE_RE.match(text.strip())
        if not m:
            raise TypeCheckError(f"malformed tensor type '{text}'")
        kind = ElemKind(m.group(1))
        dims = tuple(int(d) for d in m.group(4).split(" x "))
        if kind is ElemKind.INT8Q:
            if m.group(2) is None:
                raise TypeCheckError(f"quantized type '{text}' lacks parameters")
            return cls(kind, dims, float(m.group(2)), int(m.group(3)))
        return cls(kind, dims)

    # -- queries ----------------------------------------------------------
    @property
    def is_quantized(self) -> bool:
        return self.elem_kind is ElemKind.INT8Q

    @property
    def is_float(self) -> bool:
        return self.elem_kind is ElemKind.FLOAT32

    @property
    def size(self) -> int:
        return int(np.prod(self.dims, dtype=np.int64))

    @property
    def size_in_bytes(self) -> int:
        return self.size * self.elem_kind.itemsize

    @property
    def strides(self) -> Tuple[int, ...]:
        """Row-major element strides; the innermost stride is 1."""
        strides = [1] * len(self.dims)
        for i in range(len(self.dims) - 2, -1, -1):
            strides[i] = strides[i + 1] * self.dims[i + 1]
        return tuple(strides)

    def with_dims(self, dims: Sequence[int]) -> "TensorType":
        return TensorType(self.elem_kind, tuple(dims), self.scale, self.offset)

    def as_float(self) -> "TensorType":
        return TensorType(ElemKind.FLOAT32, self.dims)

    def __str__(self) -> str:
        dims = " x ".join(str(d) for d in self.dims)
        if self.is_quantized:
            return f"int8q({self.scale!r},{self.offset})<{dims}>"
        return f"{self.elem_kind.value}<{dims}>"


class Tensor:
    """
    A typed row-major buffer. The payload is read-only; writes go through
    the array returned by handle().
    """

    def __init__(self, ty: TensorType, data=None):
        self.ty = ty
        if data is None:
            arr = np.zeros(ty.dims, dtype=ty.elem_kind.dtype)
        else:
            arr = np.asarray(data)
            if arr.size != ty.size:
                raise TypeCheckError(
                    f"payload has {arr.size} elements, type {ty} needs {ty.size}"
                )
            arr = np.array(arr.reshape(ty.dims), dtype=ty.elem_kind.dtype, order="C", copy=True)
        arr.setflags(write=False)
        self._data = arr

    @classmethod
    def from_array(cls, arr, ty: Optional[TensorType] = None) -> "Tensor":
        arr = np.asarray(arr)
        if ty is None:
            if arr.dtype == np.bool_:
                ty = TensorType(ElemKind.BOOL, arr.shape or (1,))
            elif np.issubdtype(arr.dtype, np.integer):
                ty = TensorType(ElemKind.INT64_INDEX, arr.shape or (1,))
            else:
                ty = TensorType(ElemKind.FLOAT32, arr.shape or (1,))
        return cls(ty, arr)

    @classmethod
    def from_bytes(cls, ty: TensorType, buf: bytes) -> "Tensor":
        if len(buf) != ty.size_in_bytes:
            raise TypeCheckError(f"blob holds {len(buf)} bytes, type {ty} needs {ty.size_in_bytes}")
        return cls(ty, np.frombuffer(buf, dtype=ty.elem_kind.dtype))

    @property
    def data(self) -> np.ndarray:
        return self._data

    def handle(self) -> np.ndarray:
        """Explicit mutation handle over the payload."""
        self._data.setflags(write=True)
        return self._data

    def to_bytes(self) -> bytes:
        return self._data.astype(self.ty.elem_kind.dtype, copy=False).tobytes(order="C")

    def flat_index(self, index: Sequence[int]) -> int:
        if len(index) != len(self.ty.dims):
            raise TypeCheckError(f"index {tuple(index)} has wrong rank for {self.ty}")
        flat = 0
        for i, (idx, dim, stride) in enumerate(zip(index, self.ty.dims, self.ty.strides)):
            if not 0 <= idx < dim:
                raise TypeCheckError(f"index {idx} out of bounds for axis {i} of {self.ty}")
            flat += idx * stride
        return flat

    def multi_index(self, flat: int) -> Tuple[int, ...]:
        if not 0 <= flat < self.ty.size:
            raise TypeCheckError(f"flat index {flat} out of bounds for {self.ty}")
        out = []
        for stride in self.ty.strides:
            out.append(flat // stride)
            flat %= stride
        return tuple(out)

    def dequantized(self) -> np.ndarray:
        if not self.ty.is_quantized:
            return self._data.astype(np.float32)
        return dequantize_array(self._data, self.ty)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.ty == other.ty and np.array_equal(self._data, other._data)

    def __repr__(self) -> str:
        return f"Tensor({self.ty})"


# ---------------------------------------------------------------------------
# quantization arithmetic
# ---------------------------------------------------------------------------

def round_half_away_from_zero(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _require_quantized(ty: TensorType):
    if not ty.is_quantized:
        raise TypeCheckError(f"expected a quantized type, got {ty}")


def dequantize_value(q: int, ty: TensorType) -> float:
    _require_quantized(ty)
    return (int(q) - ty.offset) * ty.scale


def quantize_value(f: float, ty: TensorType) -> int:
    _require_quantized(ty)
    x = float(f) / ty.scale
    r = math.copysign(math.floor(abs(x) + 0.5), x)
    return int(min(max(r + ty.offset, INT8_MIN), INT8_MAX))


def dequantize_array(q, ty: TensorType) -> np.ndarray:
    _require_quantized(ty)
    return ((np.asarray(q, dtype=np.int64) - ty.offset) * ty.scale).astype(np.float32)


def quantize_array(x, ty: TensorType) -> np.ndarray:
    _require_quantized(ty)
    r = round_half_away_from_zero(np.asarray(x, dtype=np.float64) / ty.scale) + ty.offset
    return np.clip(r, INT8_MIN, INT8_MAX).astype(np.int8)


def requantize_array(q, src: TensorType, dst: TensorType) -> np.ndarray:
    """Move int8 values from one (scale, offset) pair to another."""
    _require_quantized(src)
    _require_quantized(dst)
    if src.scale == dst.scale and src.offset == dst.offset:
        return np.asarray(q, dtype=np.int8)
    real = (np.asarray(q, dtype=np.int64) - src.offset) * src.scale
    r = round_half_away_from_zero(real / dst.scale) + dst.offset
    return np.clip(r, INT8_MIN, INT8_MAX).astype(np.int8)


def choose_quant_params(rmin: float, rmax: float) -> Tuple[float, int]:
    """Scale/offset covering [rmin, rmax] widened to include zero."""
    if not (math.isfinite(rmin) and math.isfinite(rmax)):
        raise ProfileError(f"non-finite range [{rmin}, {rmax}]")
    if rmin > rmax:
        raise ProfileError(f"inverted range [{rmin}, {rmax}]")
    rmin = min(float(rmin), 0.0)
    rmax = max(float(rmax), 0.0)
    scale = max(rmax - rmin, RANGE_EPSILON) / 255.0
    x = -128.0 - rmin / scale
    offset = int(math.copysign(math.floor(abs(x) + 0.5), x))
    offset = min(max(offset, OFFSET_MIN), OFFSET_MAX)
    return scale, offset


def quantized_type_for_range(dims: Sequence[int], rmin: float, rmax: float) -> TensorType:
    scale, offset = choose_quant_params(rmin, rmax)
    return TensorType.int8q(dims, scale, offset)


def quantized_range(ty: TensorType) -> Tuple[float, float]:
    return dequantize_value(INT8_MIN, ty), dequantize_value(INT8_MAX, ty)

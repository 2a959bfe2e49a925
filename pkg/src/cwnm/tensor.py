"""Dense f32 tensors with explicit memory layouts and a binary on-disk format.

Supported linearizations:

* ``NHWC``       flat index ``((n*H + h)*W + w)*C + c``
* ``CNHW``       flat index ``((c*N + n)*H + h)*W + w``
* ``RowMajor2D`` flat index ``r*cols + c``

4-D tensors always carry their extents as ``(N, C, H, W)`` no matter which
layout the payload uses; the layout tag only selects the linearization of
``data``.  Layout conversion is a pure index remapping, so round trips are
bit-exact (negative zeros included).

File format, little-endian throughout::

    magic "CWNM" | version u32=1 | dtype u8=0 (f32) | layout u8 | ndims u8 |
    reserved u8=0 | dims: ndims x u32 | payload: prod(dims) x f32
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

MAGIC = b"CWNM"
FORMAT_VERSION = 1
DTYPE_F32 = 0

_HEADER = struct.Struct("<4sIBBBB")


class LayoutError(ValueError):
    """Raised for layout-tag misuse (wrong rank, unknown conversion target)."""


class TensorFormatError(ValueError):
    """Raised when a tensor file does not match the binary format."""


class Layout(Enum):
    NHWC = 0
    CNHW = 1
    ROW_MAJOR_2D = 2


@dataclass(frozen=True, eq=False)
class Tensor:
    dims: tuple[int, ...]
    layout: Layout
    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        data = np.ascontiguousarray(self.data, dtype=np.float32).reshape(-1)
        object.__setattr__(self, "data", data)
        if any(d < 1 for d in self.dims):
            raise ValueError(f"dims must be positive, got {self.dims}")
        if self.layout in (Layout.NHWC, Layout.CNHW) and len(self.dims) != 4:
            raise LayoutError(f"{self.layout.name} tensor must be 4-D, got dims {self.dims}")
        if self.layout is Layout.ROW_MAJOR_2D and len(self.dims) != 2:
            raise LayoutError(f"RowMajor2D tensor must be 2-D, got dims {self.dims}")
        expect = int(np.prod(self.dims))
        if data.size != expect:
            raise ValueError(f"data has {data.size} elements, dims {self.dims} need {expect}")

    # shaped views (no copies) of the flat payload

    def nhwc(self) -> np.ndarray:
        if self.layout is not Layout.NHWC:
            raise LayoutError(f"tensor layout is {self.layout.name}, not NHWC")
        n, c, h, w = self.dims
        return self.data.reshape(n, h, w, c)

    def cnhw(self) -> np.ndarray:
        if self.layout is not Layout.CNHW:
            raise LayoutError(f"tensor layout is {self.layout.name}, not CNHW")
        n, c, h, w = self.dims
        return self.data.reshape(c, n, h, w)

    def matrix(self) -> np.ndarray:
        if self.layout is not Layout.ROW_MAJOR_2D:
            raise LayoutError(f"tensor layout is {self.layout.name}, not RowMajor2D")
        return self.data.reshape(self.dims)

    @staticmethod
    def from_nhwc(arr: np.ndarray) -> "Tensor":
        arr = np.asarray(arr, dtype=np.float32)
        if arr.ndim != 4:
            raise LayoutError("from_nhwc expects a 4-D (N, H, W, C) array")
        n, h, w, c = arr.shape
        return Tensor((n, c, h, w), Layout.NHWC, arr.reshape(-1))

    @staticmethod
    def from_cnhw(arr: np.ndarray) -> "Tensor":
        arr = np.asarray(arr, dtype=np.float32)
        if arr.ndim != 4:
            raise LayoutError("from_cnhw expects a 4-D (C, N, H, W) array")
        c, n, h, w = arr.shape
        return Tensor((n, c, h, w), Layout.CNHW, arr.reshape(-1))

    @staticmethod
    def from_matrix(arr: np.ndarray) -> "Tensor":
        arr = np.asarray(arr, dtype=np.float32)
        if arr.ndim != 2:
            raise LayoutError("from_matrix expects a 2-D array")
        return Tensor(arr.shape, Layout.ROW_MAJOR_2D, arr.reshape(-1))


def convert_layout(t: Tensor, target: Layout) -> Tensor:
    """Remap a 4-D tensor between NHWC and CNHW.

    Pure permutation: no arithmetic is performed on the values, so converting
    back and forth reproduces the original payload bit-for-bit.
    """
    if target not in (Layout.NHWC, Layout.CNHW):
        raise LayoutError(f"conversion target must be NHWC or CNHW, got {target!r}")
    if len(t.dims) != 4:
        raise LayoutError(f"layout conversion requires a 4-D tensor, got dims {t.dims}")
    if t.layout is target:
        return t
    if t.layout is Layout.NHWC and target is Layout.CNHW:
        arr = t.nhwc().transpose(3, 0, 1, 2)  # (N,H,W,C) -> (C,N,H,W)
        return Tensor(t.dims, Layout.CNHW, np.ascontiguousarray(arr).reshape(-1))
    if t.layout is Layout.CNHW and target is Layout.NHWC:
        arr = t.cnhw().transpose(1, 2, 3, 0)  # (C,N,H,W) -> (N,H,W,C)
        return Tensor(t.dims, Layout.NHWC, np.ascontiguousarray(arr).reshape(-1))
    raise LayoutError(f"cannot convert {t.layout.name} to {target.name}")


def write_tensor(t: Tensor, path) -> None:
    payload = t.data.astype("<f4", copy=False).tobytes()
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, DTYPE_F32, t.layout.value, len(t.dims), 0)
    dims = struct.pack(f"<{len(t.dims)}I", *t.dims)
    Path(path).write_bytes(header + dims + payload)


def read_tensor(path) -> Tensor:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TensorFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, dtype, layout_tag, ndims, _reserved = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise TensorFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise TensorFormatError(f"{path}: unsupported version {version}")
    if dtype != DTYPE_F32:
        raise TensorFormatError(f"{path}: unsupported dtype code {dtype}")
    try:
        layout = Layout(layout_tag)
    except ValueError:
        raise TensorFormatError(f"{path}: unknown layout tag {layout_tag}") from None
    if ndims < 1:
        raise TensorFormatError(f"{path}: ndims must be >= 1")
    off = _HEADER.size
    if len(raw) < off + 4 * ndims:
        raise TensorFormatError(f"{path}: truncated dims block")
    dims = struct.unpack_from(f"<{ndims}I", raw, off)
    off += 4 * ndims
    count = int(np.prod(dims)) if dims else 0
    if len(raw) != off + 4 * count:
        raise TensorFormatError(
            f"{path}: payload is {len(raw) - off} bytes, dims {dims} need {4 * count}"
        )
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=off).astype(np.float32)
    return Tensor(dims, layout, data)

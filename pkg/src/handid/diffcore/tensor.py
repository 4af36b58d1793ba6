"""Parameter/activation carrier and the HT01 binary tensor format."""

import struct
from pathlib import Path

import numpy as np

from handid.errors import DimensionError, FormatError, NumericalError

HT01_MAGIC = b"HT01"
DTYPE = np.float32


def check_finite(arr, what="tensor"):
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values in {what}")
    return arr


class Tensor:
    """Dense float array with an optional same-shape gradient buffer.

    Learnable parameters are Tensors; ``requires_grad=False`` marks a frozen
    parameter whose gradient is never accumulated.
    """

    __slots__ = ("data", "grad", "name", "requires_grad")

    def __init__(self, data, name="", requires_grad=True, dtype=DTYPE):
        arr = np.asarray(data, dtype=dtype)
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g):
        if not self.requires_grad:
            return
        if g.shape != self.data.shape:
            raise DimensionError(
                f"gradient shape {g.shape} does not match {self.name or 'tensor'} {self.data.shape}"
            )
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(name={self.name!r}, shape={self.shape}, requires_grad={self.requires_grad})"


def write_ht01(path, arr):
    # ascontiguousarray would promote rank 0 to rank 1
    arr = np.asarray(arr, dtype="<f4", order="C")
    if arr.ndim > 255:
        raise FormatError("HT01 supports rank <= 255")
    header = HT01_MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes(order="C"))


def read_ht01(path):
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != HT01_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {HT01_MAGIC!r}")
    if len(raw) < 5:
        raise FormatError(f"{path}: truncated header")
    rank = raw[4]
    off = 5 + 4 * rank
    if len(raw) < off:
        raise FormatError(f"{path}: truncated dims")
    dims = struct.unpack(f"<{rank}I", raw[5:off])
    count = int(np.prod(dims)) if rank else 1
    if len(raw) - off != 4 * count:
        raise FormatError(
            f"{path}: payload holds {(len(raw) - off) // 4} floats but shape {dims} needs {count}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=off).astype(DTYPE)
    return data.reshape(dims)

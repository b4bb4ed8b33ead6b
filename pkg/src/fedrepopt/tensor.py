"""Dense tensor with an explicit gradient slot.

Data is always a contiguous row-major numpy array in fp32 or fp64.  A
Tensor is written once per forward/backward pass and owned by a single
worker; nothing here is thread-safe by design.
"""

import numpy as np

from .errors import NumericalError, ShapeError

DTYPES = {"fp32": np.float32, "fp64": np.float64}
DTYPE_NAMES = {np.dtype(np.float32): "fp32", np.dtype(np.float64): "fp64"}


def resolve_dtype(dtype) -> np.dtype:
    """Accept 'fp32'/'fp64' or a numpy float dtype; reject anything else."""
    if isinstance(dtype, str):
        if dtype not in DTYPES:
            raise ShapeError(f"unsupported dtype {dtype!r}, expected one of {sorted(DTYPES)}")
    else:
        dtype = DTYPE_NAMES.get(np.dtype(dtype))
        if dtype is None:
            raise ShapeError(f"unsupported dtype {dtype!r}, expected fp32 or fp64")
    return np.dtype(DTYPES[dtype])


class Tensor:
    """A parameter or activation buffer plus its optional gradient."""

    __slots__ = ("data", "grad")

    def __init__(self, data: np.ndarray):
        self.data = np.ascontiguousarray(data)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def add_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.ascontiguousarray(g)
        else:
            self.grad = self.grad + g

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={DTYPE_NAMES[self.data.dtype]})"


def require_finite(arr: np.ndarray, what: str) -> None:
    """Raise NumericalError if arr contains NaN or Inf."""
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values in {what}")

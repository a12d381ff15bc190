"""Dense tensor primitives.

Tensors are plain row-major ``numpy.ndarray`` values of dtype float32 or
float64. Image batches use the (n, c, h, w) layout. Nothing here broadcasts:
binary operations demand identical shapes and raise ``ShapeError`` otherwise.

Two execution modes exist. In deterministic mode kernels accumulate in a fixed,
documented order on a single thread, so binary64 results are bit-identical to
naive loop oracles. Otherwise kernels may hand work to BLAS.
"""

from __future__ import annotations

import contextlib
import contextvars
from typing import Iterator, Sequence

import numpy as np

from .errors import ConstructionError, ParameterError, ShapeError

DTYPES = {32: np.float32, 64: np.float64}

_deterministic: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "adnet_deterministic", default=False
)


def is_deterministic() -> bool:
    return _deterministic.get()


def set_deterministic(flag: bool) -> None:
    _deterministic.set(bool(flag))


@contextlib.contextmanager
def deterministic(flag: bool = True) -> Iterator[None]:
    """Temporarily switch deterministic kernels on (or off)."""
    token = _deterministic.set(bool(flag))
    try:
        yield
    finally:
        _deterministic.reset(token)


def dtype_for(precision: int | str) -> np.dtype:
    try:
        return np.dtype(DTYPES[int(precision)])
    except (KeyError, ValueError):
        raise ParameterError(f"precision must be 32 or 64, got {precision!r}") from None


def tensor_from(shape: Sequence[int], values: Sequence[float], dtype=np.float64) -> np.ndarray:
    """Build a fresh tensor holding ``values`` in row-major order."""
    shape = tuple(int(s) for s in shape)
    if len(shape) < 1 or any(s < 1 for s in shape):
        raise ConstructionError(f"shape must have rank >= 1 and extents >= 1, got {shape}")
    flat = np.array(values, dtype=dtype).reshape(-1)
    expected = int(np.prod(shape))
    if flat.size != expected:
        raise ConstructionError(
            f"shape {shape} needs {expected} values, got {flat.size}"
        )
    return flat.reshape(shape).copy()


def require_shape(x: np.ndarray, shape: Sequence[int], what: str = "tensor") -> None:
    if tuple(x.shape) != tuple(shape):
        raise ShapeError(f"{what}: expected shape {tuple(shape)}, got {tuple(x.shape)}")


def require_rank(x: np.ndarray, rank: int, what: str = "tensor") -> None:
    if x.ndim != rank:
        raise ShapeError(f"{what}: expected rank {rank}, got shape {tuple(x.shape)}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Rank-2 matrix product ``c[i, j] = sum_t a[i, t] * b[t, j]``.

    In deterministic mode the sum runs over ``t`` in increasing order starting
    from zero, one rank-1 update at a time, which is exactly the order of the
    textbook triple loop.
    """
    require_rank(a, 2, "matmul lhs")
    require_rank(b, 2, "matmul rhs")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    if not is_deterministic():
        return a @ b
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.result_type(a, b))
    for t in range(a.shape[1]):
        out += a[:, t : t + 1] * b[t : t + 1, :]
    return out


_ELEMENTWISE = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def elementwise(a: np.ndarray, b: np.ndarray, op: str) -> np.ndarray:
    if op not in _ELEMENTWISE:
        raise ParameterError(f"unknown elementwise op {op!r}")
    if a.shape != b.shape:
        raise ShapeError(f"elementwise {op}: shapes differ {a.shape} vs {b.shape}")
    return _ELEMENTWISE[op](a, b)

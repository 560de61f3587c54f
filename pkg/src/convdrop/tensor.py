"""Dense NCHW tensor helpers.

Tensors are plain C-ordered ``numpy.ndarray`` objects of rank 4 (batch,
channel, row, column).  Row-major layout gives the flat index
``((i*c + j)*h + y)*w + x`` for element ``(i, j, y, x)``.  The helpers here
validate shapes and never modify their inputs.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

DEFAULT_DTYPE = np.float64


def check_shape(shape) -> tuple[int, int, int, int]:
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4:
        raise ShapeError(f"expected a 4-D (n, c, h, w) shape, got {shape}")
    if any(s < 1 for s in shape):
        raise ShapeError(f"all dimensions must be >= 1, got {shape}")
    return shape


def as_tensor(x, dtype=DEFAULT_DTYPE) -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=dtype)
    check_shape(arr.shape)
    return arr


def zeros(shape, dtype=DEFAULT_DTYPE) -> np.ndarray:
    return np.zeros(check_shape(shape), dtype=dtype)


_EW_OPS = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


def ew(op: str, a: np.ndarray, b) -> np.ndarray:
    """Elementwise ``add``, ``sub``, ``mul`` or ``scale``.

    ``b`` is either a tensor of the same shape or, for ``scale`` (and the
    other ops), a Python/numpy scalar.  No broadcasting beyond scalars.
    """
    if op == "scale":
        if not np.isscalar(b):
            raise TypeError("scale expects a scalar factor")
        return a * b
    try:
        fn = _EW_OPS[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    if not np.isscalar(b):
        b = np.asarray(b)
        if b.shape != a.shape:
            raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return fn(a, b)


def pad2d(x: np.ndarray, pad: int) -> np.ndarray:
    """Zero-pad the two spatial axes by ``pad`` pixels on every side."""
    if pad < 0:
        raise ValueError("pad must be >= 0")
    if pad == 0:
        return x.copy()
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    out[:, :, pad:pad + h, pad:pad + w] = x
    return out


def crop2d(x: np.ndarray, top: int, left: int, h: int, w: int) -> np.ndarray:
    if top < 0 or left < 0 or top + h > x.shape[2] or left + w > x.shape[3]:
        raise ShapeError(
            f"crop ({top},{left},{h},{w}) outside spatial extent {x.shape[2:]}")
    return x[:, :, top:top + h, left:left + w].copy()


def center_crop(x: np.ndarray, pad: int) -> np.ndarray:
    """Inverse of :func:`pad2d` for the same ``pad``."""
    h, w = x.shape[2] - 2 * pad, x.shape[3] - 2 * pad
    return crop2d(x, pad, pad, h, w)


def moments(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and biased variance over the (n, h, w) axes."""
    mean = x.mean(axis=(0, 2, 3))
    centered = x - mean[None, :, None, None]
    var = (centered * centered).mean(axis=(0, 2, 3))
    return mean, var

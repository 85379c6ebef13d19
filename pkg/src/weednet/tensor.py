"""Dense array substrate.

Tensors are plain ``numpy.ndarray`` values in row-major (C) order with a
channel-last image layout ``(batch, height, width, channels)``. The helpers
here add the shape checks the rest of the package relies on, plus a matmul
that always accumulates in double precision.
"""
import math
import os

import numpy as np

from .exceptions import ShapeError

DTYPES = {"single": np.float32, "double": np.float64}

# Finiteness assertions are on by default; set WEEDNET_CHECK_FINITE=0 to skip.
CHECK_FINITE = os.environ.get("WEEDNET_CHECK_FINITE", "1") != "0"


def resolve_dtype(precision):
    """Map ``'single'``/``'double'`` (or a numpy dtype) to a numpy float type."""
    if isinstance(precision, str):
        try:
            return DTYPES[precision]
        except KeyError:
            raise ValueError(f"unknown precision {precision!r}; expected one of {sorted(DTYPES)}")
    dtype = np.dtype(precision).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {precision!r}")
    return dtype


def as_shape(dims):
    """Validate ``dims`` and return it as a tuple of positive ints."""
    dims = tuple(int(d) for d in dims)
    if any(d < 1 for d in dims):
        raise ShapeError(f"every extent must be >= 1, got {dims}")
    return dims


def element_count(dims):
    count = math.prod(as_shape(dims))
    if count > np.iinfo(np.intp).max:
        raise ShapeError(f"shape {dims} overflows the platform index type")
    return count


def check_finite(t, what="tensor"):
    if CHECK_FINITE and not np.all(np.isfinite(t)):
        raise FloatingPointError(f"{what} contains NaN or Inf")
    return t


def tensor_from_data(shape, values, dtype=np.float64):
    shape = as_shape(shape)
    flat = np.asarray(values, dtype=dtype).ravel()
    if flat.size != element_count(shape):
        raise ShapeError(f"{flat.size} values cannot fill shape {shape}")
    return flat.reshape(shape)


def reshape(t, new_shape):
    new_shape = as_shape(new_shape)
    if element_count(new_shape) != t.size:
        raise ShapeError(f"cannot reshape {t.shape} ({t.size} elements) to {new_shape}")
    return np.ascontiguousarray(t).reshape(new_shape)


def matmul(a, b):
    """Matrix product ``a @ b`` accumulated in float64, returned in the inputs' dtype."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents disagree: {a.shape} x {b.shape}")
    out_dtype = np.result_type(a.dtype, b.dtype)
    out = np.asarray(a, dtype=np.float64) @ np.asarray(b, dtype=np.float64)
    return out.astype(out_dtype, copy=False)


def concat_last_axis(parts):
    parts = list(parts)
    if not parts:
        raise ShapeError("nothing to concatenate")
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise ShapeError(f"leading extents differ: {parts[0].shape} vs {p.shape}")
    if len(parts) == 1:
        return parts[0]
    return np.concatenate(parts, axis=-1)


def split_last_axis(t, widths):
    """Inverse of :func:`concat_last_axis` given the part widths."""
    if sum(widths) != t.shape[-1]:
        raise ShapeError(f"widths {widths} do not sum to last extent {t.shape[-1]}")
    bounds = np.cumsum(widths)[:-1]
    return np.split(t, bounds, axis=-1)

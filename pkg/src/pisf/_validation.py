"""Input validation helpers shared by the estimators and free functions."""
import numbers

import numpy as np


def check_complex(x, ndim=None, name="x", dtype=np.complex64):
    x = np.asarray(x)
    if x.size == 0:
        raise ValueError(f"{name} is empty")
    if ndim is not None and x.ndim not in np.atleast_1d(ndim):
        raise ValueError(f"{name} must have ndim {ndim}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x.astype(dtype, copy=False)


def check_mask(mask, shape=None, name="mask"):
    """Coerce a mask-like object (Mask1D/Mask2D or array) to a boolean array."""
    m = getattr(mask, "sampled", mask)
    m = np.asarray(m)
    if m.dtype != bool:
        if not np.all((m == 0) | (m == 1)):
            raise ValueError(f"{name} must contain only 0/1 values")
        m = m.astype(bool)
    if shape is not None and m.shape != tuple(shape):
        raise ValueError(f"{name} shape {m.shape} does not match {tuple(shape)}")
    return m


def check_nonneg(value, name):
    if not isinstance(value, numbers.Real) or not np.isfinite(value) or value < 0:
        raise ValueError(f"{name} must be a finite non-negative number, got {value!r}")
    return float(value)


def check_positive_int(value, name, minimum=1):
    if not isinstance(value, numbers.Integral) or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_same_shape(a, b, names=("a", "b")):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"{names[0]} shape {np.shape(a)} != {names[1]} shape {np.shape(b)}")

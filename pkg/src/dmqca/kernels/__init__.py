"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and ``DMQCA_DISABLE_NUMBA``
is unset (or ``0``). Both paths produce bitwise-identical forward results.
All kernels expect C-contiguous float64 arrays; the wrappers below enforce it.
"""
import os

import numpy as np

from . import _numpy

BACKEND = "numpy"
_impl = _numpy
if os.environ.get("DMQCA_DISABLE_NUMBA", "0") in ("", "0"):
    try:
        from . import _numba

        _impl = _numba
        BACKEND = "numba"
    except ImportError:  # pragma: no cover - numba is a declared dependency
        pass


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def conv_forward(x, k, stride, dilation):
    return _impl.conv_forward(_c(x), _c(k), tuple(stride), tuple(dilation))


def conv_grad_input(dy, k, stride, dilation, in_shape):
    return _impl.conv_grad_input(_c(dy), _c(k), tuple(stride), tuple(dilation), tuple(in_shape))


def conv_grad_weight(dy, x, k_shape, stride, dilation):
    return _impl.conv_grad_weight(_c(dy), _c(x), tuple(k_shape), tuple(stride), tuple(dilation))


def matmul(a, b):
    return _impl.matmul(_c(a), _c(b))

"""Backend selection for the convolution/pooling inner loops.

The compiled extension is used when it was built; otherwise the numpy
fallback is used.  Setting ``FAME_PURE_PYTHON=1`` forces the fallback.
"""

import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("FAME_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "compiled"


def compiled_module():
    """The compiled extension module, or ``None`` if it was not built."""
    try:
        from . import _kernels as compiled
    except ImportError:
        return None
    return compiled


def use_backend(name):
    """Switch backends at runtime ("compiled" or "python"). Returns the previous name."""
    global _impl, BACKEND
    prev = BACKEND
    if name == "python":
        _impl = _kernels_py
    elif name == "compiled":
        from . import _kernels as compiled

        _impl = compiled
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    BACKEND = name
    return prev


def im2col(xp, k, stride, ho, wo):
    return _impl.im2col(np.ascontiguousarray(xp), k, stride, ho, wo)


def col2im(cols, shape, k, stride, ho, wo):
    return _impl.col2im(np.ascontiguousarray(cols), tuple(shape), k, stride, ho, wo)


def maxpool_forward(x, k, stride, ho, wo):
    return _impl.maxpool_forward(np.ascontiguousarray(x), k, stride, ho, wo)


def maxpool_backward(g, idx, shape):
    return _impl.maxpool_backward(np.ascontiguousarray(g), np.ascontiguousarray(idx), tuple(shape))

"""Backend selection for the row-wise softmax / cross-entropy kernels.

The compiled extension is used when it imports; otherwise the numpy fallback.
Set ``DISTILL_INFLUENCE_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from . import _kernels_py

if os.environ.get("DISTILL_INFLUENCE_PURE_PYTHON", "") not in ("", "0"):
    _compiled = None
else:
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None

BACKEND = "compiled" if _compiled is not None else "python"


def get_backend(name=None):
    """Return the kernel module called ``name`` ("compiled"/"python"), default active."""
    name = name or BACKEND
    if name == "python":
        return _kernels_py
    if name == "compiled":
        if _compiled is None:
            raise ImportError("compiled kernels are not available")
        return _compiled
    raise ValueError(f"unknown kernel backend {name!r}")


_active = get_backend()


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def softmax_rows(z):
    return _active.softmax_rows(_c(z))


def softmax_rows_backward(p, g):
    return _active.softmax_rows_backward(_c(p), _c(g))


def xent_rows(t, q, floor):
    return _active.xent_rows(_c(t), _c(q), float(floor))


def xent_rows_backward(t, q, floor, g):
    return _active.xent_rows_backward(_c(t), _c(q), float(floor), _c(g))

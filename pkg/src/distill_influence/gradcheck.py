"""Central finite differences over a ParamVector, used as a gradient oracle."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .autodiff import GradVector, ParamVector


def numeric_grad(fn: Callable[[ParamVector], float], params: ParamVector, h: float = 1e-5) -> GradVector:
    """``(f(p + h e_k) - f(p - h e_k)) / 2h`` for every coordinate ``k``.

    ``fn`` receives detached parameter vectors and returns a float.
    """
    base = params.flatten()
    out = np.empty_like(base)
    probe = params.detached()
    for k in range(base.size):
        v = base.copy()
        v[k] = base[k] + h
        fp = fn(probe.unflatten(v))
        v[k] = base[k] - h
        fm = fn(probe.unflatten(v))
        out[k] = (fp - fm) / (2.0 * h)
    return GradVector.zeros_like(params).unflatten(out)


def rel_error(a, b, floor: float = 1e-8) -> float:
    """``||a - b|| / max(||a||, ||b||, floor)`` over flat vectors."""
    a = a.flatten() if hasattr(a, "flatten") else np.asarray(a)
    b = b.flatten() if hasattr(b, "flatten") else np.asarray(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def cosine(a, b) -> float:
    a, b = a.flatten(), b.flatten()
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))

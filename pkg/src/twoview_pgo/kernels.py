"""Backend selection for the linearization kernels.

The compiled extension is used when it imports; otherwise the vectorized
numpy version.  Set ``TWOVIEW_PGO_KERNELS=python`` to force the fallback.
"""
import os

import numpy as np

from . import _pykernels

python = _pykernels
compiled = None
if os.environ.get("TWOVIEW_PGO_KERNELS", "").lower() != "python":
    try:
        from . import _ckernels as compiled
    except ImportError:  # extension not built
        compiled = None

BACKEND = "compiled" if compiled is not None else "python"


def get(name=None):
    """Return the kernel module called ``name`` (default: the active one)."""
    name = name or BACKEND
    if name == "compiled":
        if compiled is None:
            raise ImportError("compiled kernels are not available")
        return compiled
    if name == "python":
        return _pykernels
    raise ValueError(f"unknown kernel backend {name!r}")


def _c(a):
    return np.ascontiguousarray(a, dtype=float)


def absolute_terms(Ra, ta, Rb, tb, Rm, tm, backend=None):
    return get(backend).absolute_terms(_c(Ra), _c(ta), _c(Rb), _c(tb), _c(Rm), _c(tm))


def scale_free_terms(Ra, ta, Rb, tb, Rm, dm, backend=None):
    return get(backend).scale_free_terms(_c(Ra), _c(ta), _c(Rb), _c(tb), _c(Rm), _c(dm))


def retract(R, t, delta, backend=None):
    return get(backend).retract(_c(R), _c(t), _c(delta))

"""Backend selection for the message-passing kernels.

The compiled Cython module is used when it was built; otherwise the numpy
fallback is loaded. Setting ``IGNS_PURE_PYTHON=1`` forces the fallback.
"""

import os

import numpy as np

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("IGNS_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _fallback


def _prep(a):
    if a.dtype not in (np.float32, np.float64):
        a = a.astype(np.float64)
    return np.ascontiguousarray(a)


def scatter_add_rows(values: np.ndarray, index: np.ndarray, n_rows: int) -> np.ndarray:
    """Sum rows of ``values`` into ``n_rows`` output rows selected by ``index``."""
    return _impl.scatter_add_rows(_prep(values), np.ascontiguousarray(index, dtype=np.int64), int(n_rows))


def gather_rows(x: np.ndarray, index: np.ndarray) -> np.ndarray:
    """Return ``x[index]`` as a fresh contiguous array."""
    return _impl.gather_rows(_prep(x), np.ascontiguousarray(index, dtype=np.int64))


def backends():
    """Return the available kernel implementations keyed by name."""
    out = {"python": _fallback}
    try:
        from . import _ckernels

        out["cython"] = _ckernels
    except ImportError:
        pass
    return out

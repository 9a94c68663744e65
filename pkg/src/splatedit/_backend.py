"""Numeric backend selection for the hot per-pixel kernels.

Two implementations of every inner loop exist: a numba ``@njit`` version and a
vectorized pure-numpy fallback.  The default is picked once at import from the
``SPLATEDIT_BACKEND`` environment variable:

* ``auto`` (default): numba when importable, numpy otherwise
* ``numba``: require the JIT, raise if numba is missing
* ``numpy``: force the fallback even when numba is installed

Tests and the benchmark switch per-call with :func:`use_backend`.  Both paths
are deterministic; outputs agree to float64 round-off.
"""
from __future__ import annotations

import os
from contextlib import contextmanager


def _have_numba() -> bool:
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


_requested = os.environ.get("SPLATEDIT_BACKEND", "auto").strip().lower()
if _requested not in ("auto", "numba", "numpy"):
    raise ValueError(
        f"SPLATEDIT_BACKEND must be auto|numba|numpy, got {_requested!r}"
    )

HAVE_NUMBA = _have_numba() if _requested != "numpy" else False
if _requested == "numba" and not HAVE_NUMBA:
    raise ImportError("SPLATEDIT_BACKEND=numba but numba is not importable")

DEFAULT_BACKEND = "numba" if HAVE_NUMBA else "numpy"

_active = [DEFAULT_BACKEND]


def active_backend() -> str:
    """Name of the backend kernels dispatch to right now."""
    return _active[-1]


@contextmanager
def use_backend(name: str):
    """Temporarily force ``numba`` or ``numpy`` kernels (tests, benchmark)."""
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is unavailable")
    _active.append(name)
    try:
        yield
    finally:
        _active.pop()

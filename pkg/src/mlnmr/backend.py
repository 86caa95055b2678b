"""Computation backend selection.

The likelihood kernels exist twice: a numba ``@njit`` build and a pure-numpy
build with identical semantics.  ``MLNMR_BACKEND`` picks one:

* ``auto`` (default): numba when importable, numpy otherwise
* ``numba``: require numba, raise if missing
* ``numpy``: force the numpy fallback even when numba is installed

The choice is frozen at import time.  ``cache=True`` is used everywhere so
repeated process launches (CLI runs, test workers) reuse compiled kernels.
"""

import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only on bare installs
    numba = None
    HAVE_NUMBA = False

_requested = os.environ.get("MLNMR_BACKEND", "auto").strip().lower()
if _requested not in ("auto", "numba", "numpy"):
    raise RuntimeError(
        f"MLNMR_BACKEND must be 'auto', 'numba' or 'numpy', got {_requested!r}"
    )
if _requested == "numba" and not HAVE_NUMBA:
    raise RuntimeError("MLNMR_BACKEND=numba but numba is not importable")

USE_NUMBA = HAVE_NUMBA if _requested == "auto" else _requested == "numba"
BACKEND = "numba" if USE_NUMBA else "numpy"


def njit(func=None, **kwargs):
    """``numba.njit(cache=True)`` on the numba backend, identity otherwise.

    Keeping the decorator importable either way lets kernel modules share
    source between builds.
    """
    if not USE_NUMBA:
        if func is not None:
            return func
        return lambda f: f
    kwargs.setdefault("cache", True)
    # IEEE inf/nan on zero division, exactly like the numpy build
    kwargs.setdefault("error_model", "numpy")
    if func is not None:
        return numba.njit(**kwargs)(func)
    return numba.njit(**kwargs)

"""Kernel backend selection.

The hot numeric kernels (capsule fields, sphere tracing, marching cubes,
point/triangle distances) ship in two variants: numba ``@njit`` loops and
pure-numpy vectorized fallbacks. Set ``AVATARSDF_BACKEND=numpy`` to force
the fallback path; any other value (or unset) uses numba when importable.
``AVATARSDF_THREADS`` caps the numba thread pool.
"""

import os


def _detect() -> bool:
    if os.environ.get("AVATARSDF_BACKEND", "").strip().lower() == "numpy":
        return False
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


USE_NUMBA = _detect()

if USE_NUMBA:
    import numba

    _threads = os.environ.get("AVATARSDF_THREADS", "").strip()
    if _threads:
        numba.set_num_threads(max(1, min(int(_threads), numba.config.NUMBA_NUM_THREADS)))


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"

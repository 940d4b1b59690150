"""Kernel backend selection.

Hot loops (entry-time scans, trajectory integration) run either as numba
jitted kernels or as vectorized numpy code.  The backend is picked once per
process: the CROWDSTEER_BACKEND environment variable forces "numba" or
"numpy"; otherwise numba is used when importable.
"""

from __future__ import annotations

import os

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None
    HAS_NUMBA = False

_VALID = ("numba", "numpy")


def resolve_backend() -> str:
    choice = os.environ.get("CROWDSTEER_BACKEND", "").strip().lower()
    if choice:
        if choice not in _VALID:
            raise ValueError(
                f"CROWDSTEER_BACKEND must be one of {_VALID}, got {choice!r}")
        if choice == "numba" and not HAS_NUMBA:
            raise ValueError("CROWDSTEER_BACKEND=numba but numba is not importable")
        return choice
    return "numba" if HAS_NUMBA else "numpy"


def njit_or_plain(func):
    """Decorate with numba.njit when available, else return the function."""
    if HAS_NUMBA:
        return numba.njit(cache=True)(func)
    return func

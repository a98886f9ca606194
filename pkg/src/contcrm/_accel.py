"""Backend selection for the compiled kernels.

The hot loops in :mod:`contcrm.kernels` exist twice: once compiled with
numba and once as plain numpy. The numba versions are used by default.
Setting ``CONTCRM_DISABLE_NUMBA=1`` in the environment (or calling
:func:`set_backend`) switches every kernel to the numpy versions, which is
handy on machines without a working LLVM or when the JIT warm-up is not
worth it for a tiny problem.
"""

from __future__ import annotations

import contextlib
import os

_TRUTHY = {"1", "true", "yes", "on"}

try:  # pragma: no cover - exercised implicitly
    import numba  # noqa: F401

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False


def _initial_backend() -> str:
    flag = os.environ.get("CONTCRM_DISABLE_NUMBA", "").strip().lower()
    if flag in _TRUTHY or not HAVE_NUMBA:
        return "numpy"
    return "numba"


_backend = _initial_backend()


def get_backend() -> str:
    """Name of the active kernel backend, ``"numba"`` or ``"numpy"``."""
    return _backend


def set_backend(name: str) -> None:
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not importable in this environment")
    _backend = name


@contextlib.contextmanager
def backend(name: str):
    """Temporarily switch the kernel backend."""
    previous = _backend
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


def use_numba() -> bool:
    return _backend == "numba"

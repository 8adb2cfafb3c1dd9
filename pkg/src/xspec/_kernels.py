"""Kernel backend selection.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy implementations in ``_pykernels`` are used. ``XSPEC_BACKEND=python``
forces the fallback. ``XSPEC_THREADS`` caps the compiled kernels' OpenMP
team; the kernels never split a reduction across threads, so results do not
depend on the thread count.
"""

import os

from . import _pykernels

BACKEND_ENV = "XSPEC_BACKEND"
THREADS_ENV = "XSPEC_THREADS"


def _load_compiled():
    try:
        from . import _ckernels
    except ImportError:
        return None
    return _ckernels


_compiled = _load_compiled()


def available_backends():
    return ["python"] + (["compiled"] if _compiled is not None else [])


def get_backend(name=None):
    """Return the kernel module for ``name`` ("compiled", "python" or None=auto)."""
    if name is None:
        name = os.environ.get(BACKEND_ENV, "auto")
    if name == "auto":
        return _compiled if _compiled is not None else _pykernels
    if name == "python":
        return _pykernels
    if name == "compiled":
        if _compiled is None:
            raise ImportError("compiled kernels are not built; run `pip install -e .`")
        return _compiled
    raise ValueError(f"unknown kernel backend {name!r}")


def backend_name(mod=None):
    mod = mod or get_backend()
    return "compiled" if mod is _compiled and mod is not None else "python"


def num_threads():
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
        if n < 1:
            raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
        return n
    return os.cpu_count() or 1

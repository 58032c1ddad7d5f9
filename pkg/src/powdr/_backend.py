"""Kernel backend selection.

The compiled extension is used when importable. ``POWDR_BACKEND=python``
forces the numpy fallback; ``POWDR_BACKEND=compiled`` makes a missing
extension an import error instead of a silent fallback.
"""
import logging
import os

from . import _pykernels

log = logging.getLogger(__name__)

_requested = os.environ.get("POWDR_BACKEND", "auto").lower()

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None
    if _requested == "compiled":
        raise

if _requested == "python" or _compiled is None:
    kernels = _pykernels
    BACKEND = "python"
else:
    kernels = _compiled
    BACKEND = "compiled"

log.debug("powdr kernel backend: %s", BACKEND)


def get_kernels(name=None):
    """Return a kernel module: the active one, or ``"python"``/``"compiled"``."""
    if name is None:
        return kernels
    if name == "python":
        return _pykernels
    if name == "compiled":
        if _compiled is None:
            raise ImportError("powdr._kernels is not built")
        return _compiled
    raise ValueError(f"unknown backend {name!r}")


def compiled_available():
    return _compiled is not None

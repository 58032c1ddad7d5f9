"""Pathology-preserving 3D outpainting with a conditioned Haar-wavelet diffusion model.

Set ``POWDR_THREADS`` to cap BLAS/OpenMP threads; ``POWDR_BACKEND=python``
forces the numpy kernels even when the compiled extension is built.
"""
import os as _os

_threads = _os.environ.get("POWDR_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)
    try:  # numpy may already be loaded; cap its pools directly when possible
        from threadpoolctl import threadpool_limits as _limits
        _limits(int(_threads))
    except ImportError:
        pass

from ._backend import BACKEND  # noqa: E402

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]

"""Pick the compiled kernels when available; ``DRMOOD_PURE_PYTHON=1`` forces the fallback."""
import os

if os.environ.get("DRMOOD_PURE_PYTHON", "") not in ("", "0"):
    from drmood import _pykernels as kernels
    BACKEND = "python"
else:
    try:
        from drmood import _ckernels as kernels
        BACKEND = "cython"
    except ImportError:
        from drmood import _pykernels as kernels
        BACKEND = "python"

__all__ = ["kernels", "BACKEND"]

"""Conv lowering kernels with backend selection at import.

The compiled Cython backend is preferred when present; the pure-numpy
fallback is always available. Override with CMF_KERNELS=c|py|auto.
"""

import os

from . import _pykernels

_choice = os.environ.get("CMF_KERNELS", "auto").lower()

if _choice == "py":
    _impl = _pykernels
elif _choice in ("auto", "c"):
    try:
        from . import _ckernels as _impl
    except ImportError:
        if _choice == "c":
            raise ImportError(
                "CMF_KERNELS=c requested but the compiled kernel extension is "
                "not available; rebuild the package or use CMF_KERNELS=py"
            )
        _impl = _pykernels
else:
    raise ValueError(f"CMF_KERNELS must be auto, c or py, got {_choice!r}")

im2col = _impl.im2col
col2im = _impl.col2im
BACKEND = _impl.BACKEND


def backend_name():
    """Name of the kernel backend selected at import ('cython' or 'numpy')."""
    return BACKEND

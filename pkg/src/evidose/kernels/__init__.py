"""Kernel backend selection.

Two interchangeable implementations of the hot grid kernels exist:

* ``_core`` — compiled Cython loops (built at install time when a C compiler
  is available),
* ``numpy_backend`` — pure numpy, with convolutions routed through BLAS.

The env var ``EVIDOSE_KERNELS`` picks one: ``auto`` (default; compiled if
built), ``cython``, or ``python``. The active choice is exposed as
``BACKEND``. Both modules remain importable directly for cross-checks.
"""

import os

_choice = os.environ.get("EVIDOSE_KERNELS", "auto").strip().lower()
if _choice not in ("auto", "cython", "python"):
    raise ValueError(
        f"EVIDOSE_KERNELS must be 'auto', 'cython' or 'python', got {_choice!r}"
    )

if _choice in ("auto", "cython"):
    try:
        from . import _core as _impl
        BACKEND = "cython"
    except ImportError:
        if _choice == "cython":
            raise ImportError(
                "EVIDOSE_KERNELS=cython but the compiled kernel core is not "
                "built; reinstall with a C compiler or use EVIDOSE_KERNELS=python"
            ) from None
        from . import numpy_backend as _impl
        BACKEND = "python"
else:
    from . import numpy_backend as _impl
    BACKEND = "python"

conv3d_forward = _impl.conv3d_forward
conv3d_backward = _impl.conv3d_backward
maxpool3d_forward = _impl.maxpool3d_forward
maxpool3d_backward = _impl.maxpool3d_backward

__all__ = [
    "BACKEND",
    "conv3d_forward",
    "conv3d_backward",
    "maxpool3d_forward",
    "maxpool3d_backward",
]

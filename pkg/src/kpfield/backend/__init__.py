"""Kernel backend selection.

The compiled extension is preferred when it imports cleanly; the NumPy
implementation is the fallback.  ``KPFIELD_BACKEND=numpy|cython`` forces
a choice (``cython`` raises if the extension is unavailable).
"""

import os

from . import numpy_kernels

_choice = os.environ.get("KPFIELD_BACKEND", "auto").lower()

if _choice == "numpy":
    kernels = numpy_kernels
elif _choice == "cython":
    from . import _ckernels as kernels  # noqa: F401
else:
    try:
        from . import _ckernels as kernels  # type: ignore[no-redef]
    except ImportError:
        kernels = numpy_kernels

BACKEND = kernels.NAME


def available_backends():
    out = ["numpy"]
    try:
        from . import _ckernels  # noqa: F401

        out.append("cython")
    except ImportError:
        pass
    return out


def get_kernels(name=None):
    """Return a kernel module by name (None = the selected one)."""
    if name is None:
        return kernels
    if name == "numpy":
        return numpy_kernels
    if name == "cython":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown backend {name!r}")

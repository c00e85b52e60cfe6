"""Kernel backend selection.

The compiled extension is preferred when importable; the numpy backend is
the always-available fallback. Selection happens per call site through
``get_backend`` so tests can pin either one; ``TISSUESIM_BACKEND`` overrides
the default for a whole process.
"""

from __future__ import annotations

import os

from . import numpy_backend

try:
    from . import _kernels as compiled_backend
    HAVE_COMPILED = True
except ImportError:
    compiled_backend = None
    HAVE_COMPILED = False


def available_backends():
    names = ["numpy"]
    if HAVE_COMPILED:
        names.insert(0, "compiled")
    return names


def default_backend_name():
    forced = os.environ.get("TISSUESIM_BACKEND", "auto")
    if forced == "auto":
        return "compiled" if HAVE_COMPILED else "numpy"
    return forced


def get_backend(name: str = "auto"):
    if name in (None, "auto"):
        name = default_backend_name()
    if name == "numpy":
        return numpy_backend
    if name == "compiled":
        if not HAVE_COMPILED:
            raise ImportError(
                "compiled backend requested but tissuesim.backends._kernels is not built; "
                "install with the extension or set TISSUESIM_BACKEND=numpy"
            )
        return compiled_backend
    raise ValueError(f"unknown backend {name!r}; expected auto, compiled, or numpy")

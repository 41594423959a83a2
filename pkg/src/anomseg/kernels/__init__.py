"""Kernel backend selection.

The compiled extension (``anomseg.kernels._native``) is preferred when it
imported cleanly; otherwise the pure NumPy backend is used.  Set
``ANOMSEG_BACKEND=pure`` to force the fallback, ``ANOMSEG_BACKEND=native``
to fail loudly when the extension is missing.  Both backends implement the
same five primitives with identical semantics (see ``pure.py``); the
``benchmarks/`` script times them against each other.
"""

import os

from . import pure

_requested = os.environ.get("ANOMSEG_BACKEND", "").strip().lower()

if _requested == "pure":
    _impl = pure
else:
    try:
        from . import _native as _impl  # type: ignore[attr-defined]
    except ImportError:
        if _requested == "native":
            raise
        _impl = pure

BACKEND = "pure" if _impl is pure else "native"

splitmix64_fill = _impl.splitmix64_fill
patch_matrix = _impl.patch_matrix
patch_scatter = _impl.patch_scatter
label_components = _impl.label_components
bilinear_resize = _impl.bilinear_resize


def get_backend(name):
    """Return the backend module by name ('pure' or 'native')."""
    if name == "pure":
        return pure
    if name == "native":
        from . import _native

        return _native
    raise ValueError(f"unknown backend {name!r}")

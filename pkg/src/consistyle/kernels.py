"""Backend selection for the hot kernels.

The compiled extension is used when it was built; otherwise the numpy
fallback is loaded. Set ``CONSISTYLE_BACKEND=python`` to force the
fallback, or ``compiled`` to fail loudly when the extension is missing.
"""
import os

from . import _kernels_py

_choice = os.environ.get("CONSISTYLE_BACKEND", "auto").lower()
if _choice not in ("auto", "compiled", "python"):
    raise ImportError(f"CONSISTYLE_BACKEND must be auto|compiled|python, got {_choice!r}")

_impl = _kernels_py
if _choice != "python":
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]
    except ImportError:
        if _choice == "compiled":
            raise
        _impl = _kernels_py

BACKEND = _impl.NAME
channel_stats = _impl.channel_stats
adain = _impl.adain
row_norms = _impl.row_norms
cosine_argmax = _impl.cosine_argmax
softmax_rows = _impl.softmax_rows


def available_backends():
    """Map of backend name to kernel module for every importable backend."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels
    except ImportError:
        pass
    else:
        out["compiled"] = _kernels
    return out

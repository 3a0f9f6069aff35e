"""Backend selection for the scan kernels.

The compiled extension is used when it imports; ``DIM_PURE_PYTHON=1`` forces
the numpy reference. ``BACKEND`` names whichever one is active.
"""

from __future__ import annotations

import os

from . import _scan_ref

if os.environ.get("DIM_PURE_PYTHON", "") not in ("", "0"):
    _impl = _scan_ref
    BACKEND = "python"
else:
    try:
        from . import _scan as _impl  # type: ignore[attr-defined]
        BACKEND = "cython"
    except ImportError:
        _impl = _scan_ref
        BACKEND = "python"

scan_forward = _impl.scan_forward
scan_backward = _impl.scan_backward
linear_scan = _impl.linear_scan
linear_scan_reverse = _impl.linear_scan_reverse


def get_backend(name: str):
    """Return the kernel module for ``name`` ("python" or "cython")."""
    if name == "python":
        return _scan_ref
    if name == "cython":
        from . import _scan  # type: ignore[attr-defined]
        return _scan
    raise ValueError(f"unknown backend {name!r}")

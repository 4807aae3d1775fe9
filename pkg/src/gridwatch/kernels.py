"""Kernel backend selection.

The compiled extension is preferred; ``GRIDWATCH_PURE_PYTHON=1`` forces the
pure-Python implementation (useful for debugging and for the benchmark).
"""
import os

from . import _kernels_py

if os.environ.get("GRIDWATCH_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:
        _impl = _kernels_py

BACKEND = "compiled" if _impl is not _kernels_py else "python"

PENALTY_SENTINEL = _kernels_py.PENALTY_SENTINEL
FACTOR_CAP = _kernels_py.FACTOR_CAP

region_flows = _impl.region_flows
region_jacobian = _impl.region_jacobian
factor_step = _impl.factor_step
factor_series = _impl.factor_series
penalty_raw = _impl.penalty_raw
penalty_series = _impl.penalty_series


def backends():
    """Return every importable backend module, keyed by name."""
    found = {"python": _kernels_py}
    try:
        from . import _kernels
    except ImportError:
        pass
    else:
        found["compiled"] = _kernels
    return found

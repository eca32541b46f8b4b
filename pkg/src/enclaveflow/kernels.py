"""Hot-loop kernels, compiled when available.

The compiled extension is used unless it failed to build or
``ENCLAVEFLOW_PURE=1`` is set in the environment. ``BACKEND`` names the one
in use.
"""
import os

from . import _pykernels

if os.environ.get("ENCLAVEFLOW_PURE") == "1":
    _impl = _pykernels
else:
    try:
        from . import _speedups as _impl
    except ImportError:
        _impl = _pykernels

BACKEND = "cython" if _impl is not _pykernels else "python"

split_frames = _impl.split_frames
convert_rows = _impl.convert_rows
filter_gt = _impl.filter_gt
fold_count_sum = _impl.fold_count_sum


def backends():
    """Map of backend name to kernel module, for side-by-side comparison."""
    found = {"python": _pykernels}
    try:
        from . import _speedups
    except ImportError:
        pass
    else:
        found["cython"] = _speedups
    return found

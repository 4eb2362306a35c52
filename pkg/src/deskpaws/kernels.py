"""Row kernel backend selection.

The compiled extension is used when it was built; otherwise the numpy
fallback is loaded. Set ``DESKPAWS_PURE_PYTHON=1`` to force the fallback.
"""

import os

from deskpaws import _kernels_py

BACKEND = "python"

if os.environ.get("DESKPAWS_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from deskpaws import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py
else:
    _impl = _kernels_py

softmax_rows = _impl.softmax_rows
softmax_rows_backward = _impl.softmax_rows_backward
l2_normalize_rows = _impl.l2_normalize_rows
l2_normalize_rows_backward = _impl.l2_normalize_rows_backward
sharpen_rows = _impl.sharpen_rows
sharpen_rows_backward = _impl.sharpen_rows_backward
cross_entropy_rows = _impl.cross_entropy_rows
cross_entropy_rows_backward = _impl.cross_entropy_rows_backward


def backends():
    """Return the available kernel modules keyed by name."""
    out = {"python": _kernels_py}
    try:
        from deskpaws import _ckernels

        out["cython"] = _ckernels
    except ImportError:
        pass
    return out

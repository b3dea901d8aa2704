"""Kernel dispatch: numba-compiled loops by default, pure numpy on request.

Set ``LCMKIT_NUMBA=0`` to force the numpy fallback.  The choice is made
once at import time; both implementations stay importable for testing and
benchmarking (``conv_numpy``, ``conv_numba``).
"""

import os

from . import conv_numpy

_want_numba = os.environ.get("LCMKIT_NUMBA", "1") != "0"

if _want_numba:
    try:
        from . import conv_numba as _impl
        NUMBA_ENABLED = True
    except ImportError:
        _impl = conv_numpy
        NUMBA_ENABLED = False
else:
    _impl = conv_numpy
    NUMBA_ENABLED = False

conv2d_forward = _impl.conv2d_forward
conv2d_backward_dx = _impl.conv2d_backward_dx
conv2d_backward_dw = _impl.conv2d_backward_dw


def backend_name():
    return "numba" if NUMBA_ENABLED else "numpy"

"""Backend selection for the 3D convolution kernels.

The compiled extension is used when it imports; set ``MTPROG_PURE_PYTHON=1``
to force the numpy implementation. ``BACKEND`` names the active one.
"""
import os

from . import _conv_py

_pure = os.environ.get("MTPROG_PURE_PYTHON", "").strip() not in ("", "0")

if _pure:
    _impl = _conv_py
    BACKEND = "numpy"
else:
    try:
        from . import _conv_ext as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        _impl = _conv_py
        BACKEND = "numpy"

conv3d_forward = _impl.conv3d_forward
conv3d_backward_input = _impl.conv3d_backward_input
conv3d_backward_weight = _impl.conv3d_backward_weight

__all__ = [
    "BACKEND",
    "conv3d_forward",
    "conv3d_backward_input",
    "conv3d_backward_weight",
]

"""Kernel backend selection.

Two interchangeable backends provide the convolution and pooling primitives:
a compiled extension (built at install time when a C compiler is present) and
a vectorized numpy fallback. Set XCAM_KERNELS=numpy or =cython to force one;
the default "auto" prefers the compiled backend and silently falls back.
"""

import os

from . import numpy_ops

_choice = os.environ.get("XCAM_KERNELS", "auto")
if _choice not in ("auto", "cython", "numpy"):
    raise ValueError(f"XCAM_KERNELS must be auto, cython, or numpy; got {_choice!r}")

if _choice == "numpy":
    _impl = numpy_ops
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        if _choice == "cython":
            raise ImportError(
                "XCAM_KERNELS=cython but the compiled extension is not available; "
                "reinstall with a C compiler or use XCAM_KERNELS=numpy"
            ) from None
        _impl = numpy_ops

BACKEND_NAME = _impl.BACKEND_NAME

conv2d_forward = _impl.conv2d_forward
conv2d_backward_data = _impl.conv2d_backward_data
conv2d_backward_weight = _impl.conv2d_backward_weight
maxpool2d_forward = _impl.maxpool2d_forward
maxpool2d_backward = _impl.maxpool2d_backward
maxpool2d_gather = _impl.maxpool2d_gather

__all__ = [
    "BACKEND_NAME",
    "conv2d_forward",
    "conv2d_backward_data",
    "conv2d_backward_weight",
    "maxpool2d_forward",
    "maxpool2d_backward",
    "maxpool2d_gather",
    "numpy_ops",
]

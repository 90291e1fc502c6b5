"""Kernel backend selection.

The conv kernels come in two interchangeable flavours: a compiled Cython
extension (_convext) and a numpy fallback (pykernels). The compiled one is
picked at import time when present; set TRUNKSHARE_FORCE_FALLBACK=1 to force
the numpy path (used by the parity tests and the kernel benchmark).

Pooling and bilinear kernels are vectorised numpy either way; convolution is
the only loop hot enough to warrant compilation.
"""

import os

from . import pykernels

maxpool2x2_forward = pykernels.maxpool2x2_forward
maxpool2x2_backward = pykernels.maxpool2x2_backward
bilinear_forward = pykernels.bilinear_forward
bilinear_backward = pykernels.bilinear_backward
bilinear_plan = pykernels.bilinear_plan

if os.environ.get("TRUNKSHARE_FORCE_FALLBACK"):
    _conv_impl = pykernels
    BACKEND = "numpy"
else:
    try:
        from . import _convext as _conv_impl
        BACKEND = "compiled"
    except ImportError:
        _conv_impl = pykernels
        BACKEND = "numpy"

conv_forward = _conv_impl.conv_forward
conv_backward_weight = _conv_impl.conv_backward_weight
conv_backward_input = _conv_impl.conv_backward_input

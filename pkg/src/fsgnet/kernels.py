"""Backend selection for the hot kernels.

The compiled extension is used when it imports cleanly; set the
environment variable ``FSGNET_PURE_PYTHON=1`` to force the numpy fallback.
"""
import os

from . import _pykernels

BACKEND = "python"

if os.environ.get("FSGNET_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels
else:
    _impl = _pykernels

im2col = _impl.im2col
col2im = _impl.col2im
depthwise_forward = _impl.depthwise_forward
depthwise_backward = _impl.depthwise_backward
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward
fft_rows = _impl.fft_rows

python_kernels = _pykernels

"""Hot loops, compiled with numba unless ``CASCADE_SEG_NO_NUMBA=1`` is set.

Both backends compute bit-identical im2col/col2im results; the CRF kernel
matrix agrees to within libm ``exp`` rounding and the mean-field messages to
within summation order. Neither backend calls BLAS, so every result is the same
for any thread count.
"""
import os

from . import _numpy

BACKEND = "numpy"
if os.environ.get("CASCADE_SEG_NO_NUMBA", "0") not in ("1", "true", "yes"):
    try:
        import numba

        # the TBB layer warns on older TBB builds; workqueue is always present
        if numba.config.THREADING_LAYER == "default":
            numba.config.THREADING_LAYER = "workqueue"
        from . import _numba as _impl
        BACKEND = "numba"
    except ImportError:  # numba missing or broken
        _impl = _numpy
else:
    _impl = _numpy

im2col = _impl.im2col
col2im = _impl.col2im
crf_kernel_matrix = _impl.crf_kernel_matrix
potts_messages = _impl.potts_messages

__all__ = ["BACKEND", "im2col", "col2im", "crf_kernel_matrix", "potts_messages"]

"""Kernel backend selection: compiled Cython extension or numpy fallback.

Set NGCCPHAT_FORCE_NUMPY=1 to force the fallback (used by the benchmark and
for debugging). Both backends produce identical results up to floating-point
summation order; the compiled one is the default when importable.
"""

import os

if os.environ.get("NGCCPHAT_FORCE_NUMPY") == "1":
    from ngccphat import _np_kernels as _impl

    BACKEND = "numpy"
else:
    try:
        from ngccphat import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:
        from ngccphat import _np_kernels as _impl

        BACKEND = "numpy"

conv1d_forward = _impl.conv1d_forward
conv1d_grad_input = _impl.conv1d_grad_input
conv1d_grad_weights = _impl.conv1d_grad_weights

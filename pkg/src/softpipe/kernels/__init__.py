"""Backend selection for the hot kernels.

The compiled extension is preferred when importable; otherwise the numpy
fallback is used.  SOFTPIPE_BACKEND=c forces the extension (raising if it is
missing) and SOFTPIPE_BACKEND=py forces the fallback.  The chosen backend is
exposed as ``BACKEND`` so reports and benchmarks can record it.
"""

import os

_requested = os.environ.get("SOFTPIPE_BACKEND", "").strip().lower()

if _requested not in ("", "c", "py"):
    raise ValueError(
        f"SOFTPIPE_BACKEND must be 'c' or 'py', got {_requested!r}"
    )

if _requested == "py":
    from softpipe.kernels import _pykernels as _impl

    BACKEND = "py"
else:
    try:
        from softpipe.kernels import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "c"
    except ImportError:
        if _requested == "c":
            raise
        from softpipe.kernels import _pykernels as _impl  # type: ignore[no-redef]

        BACKEND = "py"

softmax_fwd = _impl.softmax_fwd
softmax_bwd = _impl.softmax_bwd
log_softmax_fwd = _impl.log_softmax_fwd
log_softmax_bwd = _impl.log_softmax_bwd
layer_norm_fwd = _impl.layer_norm_fwd
layer_norm_bwd = _impl.layer_norm_bwd
nll_fwd = _impl.nll_fwd
nll_bwd = _impl.nll_bwd

__all__ = [
    "BACKEND",
    "softmax_fwd",
    "softmax_bwd",
    "log_softmax_fwd",
    "log_softmax_bwd",
    "layer_norm_fwd",
    "layer_norm_bwd",
    "nll_fwd",
    "nll_bwd",
]

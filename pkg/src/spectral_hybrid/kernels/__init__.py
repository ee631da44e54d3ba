"""Periodic dilated convolution kernels.

The compiled extension (``_conv_ext``) is used when it was built; otherwise the
numpy implementation in ``_conv_py`` is selected. Set
``SPECTRAL_HYBRID_BACKEND=python`` to force the fallback.

Layout is channel-last: inputs ``(batch, *spatial, c_in)``, weights
``(*kernel, c_in, c_out)`` with odd, equal kernel extents. Tap ``j`` reads the
input at offset ``(j - K // 2) * dilation`` with periodic wrap-around
(cross-correlation, as in most deep-learning libraries).
"""

import os

import numpy as np

from . import _conv_py

try:
    from . import _conv_ext
except ImportError:  # extension not built
    _conv_ext = None

BACKEND = "python"
_impl = _conv_py
if _conv_ext is not None and os.environ.get("SPECTRAL_HYBRID_BACKEND", "ext") != "python":
    BACKEND, _impl = "ext", _conv_ext


def _check(x: np.ndarray, w: np.ndarray, dilation: int) -> None:
    nd = w.ndim - 2
    if nd not in (1, 2) or x.ndim != nd + 2:
        raise ValueError(f"input of shape {x.shape} does not match {nd}D kernel {w.shape}")
    k = w.shape[0]
    if k % 2 == 0 or any(s != k for s in w.shape[:nd]):
        raise ValueError(f"kernel extents must be equal and odd, got {w.shape[:nd]}")
    if x.shape[-1] != w.shape[-2]:
        raise ValueError(f"channel mismatch: input has {x.shape[-1]}, kernel expects {w.shape[-2]}")
    if dilation < 1:
        raise ValueError("dilation must be >= 1")
    if dilation * (k - 1) >= min(x.shape[1:-1]):
        raise ValueError(
            f"dilation too large for grid: {dilation}*({k}-1) >= {min(x.shape[1:-1])}")


def conv_forward(x: np.ndarray, w: np.ndarray, dilation: int = 1) -> np.ndarray:
    _check(x, w, dilation)
    if x.dtype not in (np.float32, np.float64):
        x = x.astype(np.float64)
    return _impl.conv_forward(x, w.astype(x.dtype, copy=False), dilation)


def conv_backward(x, w, gy, dilation=1, need_input=True):
    """Return ``(grad_input, grad_weight)``; ``grad_input`` is None if not needed."""
    _check(x, w, dilation)
    return _impl.conv_backward(x, w.astype(x.dtype, copy=False),
                               gy.astype(x.dtype, copy=False), dilation, need_input)


def use_backend(name: str) -> str:
    """Switch backend at runtime (benchmarks and tests); returns the previous name."""
    global BACKEND, _impl
    prev = BACKEND
    if name == "ext":
        if _conv_ext is None:
            raise RuntimeError("compiled extension is not built")
        BACKEND, _impl = "ext", _conv_ext
    elif name == "python":
        BACKEND, _impl = "python", _conv_py
    else:
        raise ValueError(f"unknown backend {name!r}")
    return prev

"""Convolution kernel backend selection.

The compiled Cython kernels are used when the extension built; otherwise the
numpy im2col fallback takes over. EQUIWRAP_KERNELS=numpy|compiled forces a
backend (forcing `compiled` raises if the extension is missing). Both
backends implement the same contract and agree to ~1e-12 relative; they are
not bit-identical because summation orders differ, so the active backend name
is recorded in run summaries.
"""

from __future__ import annotations

import os

from . import _conv_np

try:
    from . import _conv_cy
except ImportError:
    _conv_cy = None

_forced = os.environ.get("EQUIWRAP_KERNELS", "").strip().lower()
if _forced == "numpy":
    _impl = _conv_np
elif _forced == "compiled":
    if _conv_cy is None:
        raise ImportError("EQUIWRAP_KERNELS=compiled but the extension is not built")
    _impl = _conv_cy
elif _forced:
    raise ValueError(f"unknown EQUIWRAP_KERNELS value {_forced!r}")
else:
    _impl = _conv_cy if _conv_cy is not None else _conv_np

BACKEND = "compiled" if _impl is _conv_cy else "numpy"

conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward


def available_backends() -> dict:
    """Map backend name -> (conv2d_forward, conv2d_backward), for benchmarks."""
    out = {"numpy": (_conv_np.conv2d_forward, _conv_np.conv2d_backward)}
    if _conv_cy is not None:
        out["compiled"] = (_conv_cy.conv2d_forward, _conv_cy.conv2d_backward)
    return out

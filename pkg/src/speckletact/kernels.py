"""Kernel backend selection.

The compiled extension is used when it imports; otherwise (or when the
environment variable ``SPECKLETACT_PURE=1`` is set) the numpy fallback is
used. ``BACKEND`` names the active implementation and is recorded in
training reports and invocation.json: rendered frames are bit-identical
across backends, but the batch-norm kernels agree only to rounding.
"""
import os

from . import _fallback

if os.environ.get("SPECKLETACT_PURE") == "1":
    _impl = _fallback
    BACKEND = "numpy"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "compiled"
    except ImportError:
        _impl = _fallback
        BACKEND = "numpy"

render_intensity = _impl.render_intensity
im2col3x3 = _impl.im2col3x3
col2im3x3 = _impl.col2im3x3
maxpool2x2_forward = _impl.maxpool2x2_forward
maxpool2x2_backward = _impl.maxpool2x2_backward
channel_moments = _impl.channel_moments
bn_apply = _impl.bn_apply
bn_backward = _impl.bn_backward
relu_forward = _impl.relu_forward
relu_backward = _impl.relu_backward

__all__ = [
    "BACKEND",
    "render_intensity",
    "im2col3x3",
    "col2im3x3",
    "maxpool2x2_forward",
    "maxpool2x2_backward",
    "channel_moments",
    "bn_apply",
    "bn_backward",
    "relu_forward",
    "relu_backward",
]

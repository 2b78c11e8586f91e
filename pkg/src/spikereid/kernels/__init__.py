"""Hot-kernel backend selection.

The compiled Cython extension is preferred when importable; otherwise the
numpy fallback is used. ``SPIKEREID_BACKEND`` overrides the choice
(``auto`` | ``ext`` | ``numpy``).
"""

import os

from . import fallback

try:
    from . import _ext
except ImportError:
    _ext = None

_BACKENDS = {}
_BACKENDS["numpy"] = fallback
if _ext is not None:
    _BACKENDS["ext"] = _ext

_active = None


def available_backends():
    return sorted(_BACKENDS)


def use_backend(name):
    """Select a kernel backend by name; returns the active backend name."""
    global _active
    if name == "auto":
        name = "ext" if "ext" in _BACKENDS else "numpy"
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; available: {available_backends()}")
    _active = name
    return _active


def backend_name():
    return _active


use_backend(os.environ.get("SPIKEREID_BACKEND", "auto"))


def _impl():
    return _BACKENDS[_active]


def conv_out_size(size, k, stride, pad):
    return fallback.conv_out_size(size, k, stride, pad)


def im2col(x, kh, kw, stride, pad):
    return _impl().im2col(x, kh, kw, stride, pad)


def col2im(cols, x_shape, kh, kw, stride, pad):
    return _impl().col2im(cols, tuple(x_shape), kh, kw, stride, pad)


def lif_forward(x, alpha, v_rest, v_th, v_reset):
    return _impl().lif_forward(x, alpha, v_rest, v_th, v_reset)

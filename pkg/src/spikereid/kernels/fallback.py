"""Pure-numpy implementations of the hot kernels.

These are the reference semantics; the compiled extension in ``_ext.pyx``
must match them bit-for-bit (accumulation order included), which the
backend-equivalence tests enforce.
"""

import numpy as np


def conv_out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def im2col(x, kh, kw, stride, pad):
    """Unfold (N, C, H, W) into patch rows of shape (N*OH*OW, C*kh*kw)."""
    n, c, h, w = x.shape
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(w, kw, stride, pad)
    if pad > 0:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]             # (N, C, OH, OW, kh, kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(n * oh * ow, c * kh * kw)


def col2im(cols, x_shape, kh, kw, stride, pad):
    """Scatter-add patch rows back onto the (padded) input; inverse of im2col."""
    n, c, h, w = x_shape
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(w, kw, stride, pad)
    cols = cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    # Kernel-offset-major accumulation; each (i, j) slice-add is collision-free.
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + oh * stride:stride, j:j + ow * stride:stride] += cols[:, :, :, :, i, j]
    if pad > 0:
        return np.ascontiguousarray(xp[:, :, pad:pad + h, pad:pad + w])
    return xp


def lif_forward(x, alpha, v_rest, v_th, v_reset):
    """Step a layer of LIF neurons over time.

    x: (T, M) input currents. Returns (spikes, v_pre, v_state) where v_pre is
    the pre-reset membrane candidate at each step and v_state the membrane at
    step entry (both needed by the backward rule and its verification oracle).
    """
    t_steps, m = x.shape
    spikes = np.zeros_like(x)
    v_pre = np.empty_like(x)
    v_state = np.empty_like(x)
    v = np.full(m, v_rest, dtype=x.dtype)
    for t in range(t_steps):
        v_state[t] = v
        v = v + alpha * ((v_rest - v) + x[t])
        v_pre[t] = v
        fired = v > v_th
        spikes[t, fired] = 1.0
        v = np.where(fired, v_reset, v)
    return spikes, v_pre, v_state

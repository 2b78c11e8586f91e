# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: conv patch gather/scatter and the LIF time loop.

Semantics (including floating-point accumulation order) mirror
``spikereid.kernels.fallback`` exactly; compiled with -ffp-contract=off so
results stay bit-identical to the numpy path.
"""

import numpy as np

cimport cython

ctypedef fused real:
    float
    double


def conv_out_size(Py_ssize_t size, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    return (size + 2 * pad - k) // stride + 1


def im2col(real[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw,
           Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out_arr = np.zeros((n * oh * ow, c * kh * kw), dtype=dtype)
    cdef real[:, ::1] cols = out_arr
    cdef Py_ssize_t b, ci, oy, ox, i, j, iy, ix, row
    for b in range(n):
        for oy in range(oh):
            for ox in range(ow):
                row = (b * oh + oy) * ow + ox
                for ci in range(c):
                    for i in range(kh):
                        iy = oy * stride + i - pad
                        if iy < 0 or iy >= h:
                            continue
                        for j in range(kw):
                            ix = ox * stride + j - pad
                            if ix < 0 or ix >= w:
                                continue
                            cols[row, (ci * kh + i) * kw + j] = x[b, ci, iy, ix]
    return out_arr


def col2im(real[:, ::1] cols, tuple x_shape, Py_ssize_t kh, Py_ssize_t kw,
           Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t n = x_shape[0], c = x_shape[1], h = x_shape[2], w = x_shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out_arr = np.zeros((n, c, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] x = out_arr
    cdef Py_ssize_t b, ci, oy, ox, i, j, iy, ix, row
    # Same accumulation order as the fallback: kernel offset (i, j) outermost.
    for i in range(kh):
        for j in range(kw):
            for b in range(n):
                for ci in range(c):
                    for oy in range(oh):
                        iy = oy * stride + i - pad
                        if iy < 0 or iy >= h:
                            continue
                        for ox in range(ow):
                            ix = ox * stride + j - pad
                            if ix < 0 or ix >= w:
                                continue
                            row = (b * oh + oy) * ow + ox
                            x[b, ci, iy, ix] = x[b, ci, iy, ix] + cols[row, (ci * kh + i) * kw + j]
    return out_arr


def lif_forward(real[:, ::1] x, double alpha, double v_rest, double v_th, double v_reset):
    cdef Py_ssize_t t_steps = x.shape[0], m = x.shape[1]
    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    spikes_arr = np.zeros((t_steps, m), dtype=dtype)
    v_pre_arr = np.empty((t_steps, m), dtype=dtype)
    v_state_arr = np.empty((t_steps, m), dtype=dtype)
    cdef real[:, ::1] spikes = spikes_arr
    cdef real[:, ::1] v_pre = v_pre_arr
    cdef real[:, ::1] v_state = v_state_arr
    cdef real a = <real> alpha, vr = <real> v_rest, vt = <real> v_th, vz = <real> v_reset
    cdef real v
    cdef Py_ssize_t t, i
    for i in range(m):
        v = vr
        for t in range(t_steps):
            v_state[t, i] = v
            v = v + a * ((vr - v) + x[t, i])
            v_pre[t, i] = v
            if v > vt:
                spikes[t, i] = 1.0
                v = vz
    return spikes_arr, v_pre_arr, v_state_arr

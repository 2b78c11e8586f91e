"""Minimal dense-array reverse-mode autodiff engine.

One contiguous numpy buffer per tensor, no strided views. Float32 is the
training default; the test suite flips the global default to float64 for
finite-difference headroom. Gradients accumulate: calling backward twice
without zeroing doubles them.
"""

import contextlib

import numpy as np

from . import kernels

_default_dtype = np.float32
_grad_enabled = True


def set_default_dtype(dtype):
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError("default dtype must be float32 or float64")
    _default_dtype = dtype.type


def get_default_dtype():
    return _default_dtype


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to the original shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _default_dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def detach(self):
        return Tensor(self.data)

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, grad, own=False):
        # own=True promises `grad` is a freshly allocated writable array that
        # the closure will not reuse, so it can be adopted without a copy.
        if self.grad is None:
            self.grad = grad if own else np.array(grad, dtype=self.data.dtype)
        else:
            self.grad += grad

    def backward(self):
        """Reverse-topological gradient accumulation from a scalar root.

        Leaf gradients accumulate across calls (two backwards double them);
        interior-node gradients are pass-local.
        """
        if self.data.size != 1:
            raise ValueError("backward requires a scalar tensor")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        for node in topo:
            if node._backward is not None:
                node.grad = None
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def item(self):
        return float(self.data.reshape(()))

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    # -- shape ops as methods ----------------------------------------------

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, *axes)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """Trainable tensor; ``name`` is assigned at model registration and is
    the checkpoint key."""

    __slots__ = ("name",)

    def __init__(self, data, name=None, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


# -- elementwise -----------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape), own=True)
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape), own=True)

    return _make(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape), own=True)
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape), own=True)

    return _make(a.data / b.data, (a, b), backward)


def power(a, p):
    a = as_tensor(a)
    p = float(p)

    def backward(g):
        a._accumulate(g * p * a.data ** (p - 1.0), own=True)

    return _make(a.data ** p, (a,), backward)


def sqrt(a):
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        a._accumulate(g * 0.5 / out_data, own=True)

    return _make(out_data, (a,), backward)


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out_data, own=True)

    return _make(out_data, (a,), backward)


def log(a):
    a = as_tensor(a)

    def backward(g):
        a._accumulate(g / a.data, own=True)

    return _make(np.log(a.data), (a,), backward)


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0

    def backward(g):
        a._accumulate(g * mask, own=True)

    return _make(a.data * mask, (a,), backward)


# -- reductions -------------------------------------------------------------


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape).copy(), own=True)

    return _make(np.asarray(out_data), (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    scale = a.data.size / max(out_data.size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape) / scale, own=True)

    return _make(np.asarray(out_data), (a,), backward)


# -- shape -------------------------------------------------------------------


def reshape(a, *shape):
    a = as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])

    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _make(np.ascontiguousarray(a.data.reshape(shape)), (a,), backward)


def transpose(a, *axes):
    a = as_tensor(a)
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    if not axes:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)

    def backward(g):
        a._accumulate(g.transpose(inv))

    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), backward)


def getitem(a, key):
    a = as_tensor(a)
    keys = key if isinstance(key, tuple) else (key,)
    fancy = any(isinstance(k, (np.ndarray, list)) for k in keys)

    def backward(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        if fancy:
            np.add.at(a.grad, key, g)
        else:
            a.grad[key] += g

    return _make(np.ascontiguousarray(a.data[key]), (a,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(np.take(g, i, axis=axis))

    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), backward)


# -- contractions -------------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T, own=True)
        if b.requires_grad:
            b._accumulate(a.data.T @ g, own=True)

    return _make(a.data @ b.data, (a, b), backward)


def _contract(sub_a, sub_b, out_sub, a, b):
    """einsum('<sub_a>,<sub_b>-><out_sub>') lowered onto one batched matmul."""
    batch = [i for i in out_sub if i in sub_a and i in sub_b]
    contracted = [i for i in sub_a if i in sub_b and i not in out_sub]
    free_a = [i for i in sub_a if i not in sub_b]
    free_b = [i for i in sub_b if i not in sub_a]
    dims = {i: a.shape[sub_a.index(i)] for i in sub_a}
    dims.update({i: b.shape[sub_b.index(i)] for i in sub_b})

    def fold(x, sub, groups):
        perm = [sub.index(i) for grp in groups for i in grp]
        shape = [int(np.prod([dims[i] for i in grp])) if grp else 1 for grp in groups]
        return np.ascontiguousarray(x.transpose(perm)).reshape(shape)

    am = fold(a, sub_a, (batch, free_a, contracted))
    bm = fold(b, sub_b, (batch, contracted, free_b))
    cm = np.matmul(am, bm)
    inner = batch + free_a + free_b
    cm = cm.reshape([dims[i] for i in inner])
    return np.ascontiguousarray(cm.transpose([inner.index(i) for i in out_sub]))


def einsum(subscripts, a, b):
    """Two-operand einsum with autodiff, executed as a batched matmul.

    Restricted to specs where each operand's subscripts are unique within the
    operand and appear in the output or the other operand, so both gradients
    are themselves plain einsums.
    """
    a, b = as_tensor(a), as_tensor(b)
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    sub_a, sub_b = lhs.split(",")
    for name, sub, other in (("first", sub_a, sub_b), ("second", sub_b, sub_a)):
        if len(set(sub)) != len(sub):
            raise ValueError(f"einsum: repeated index in {name} operand of {subscripts!r}")
        if not set(sub) <= set(out_sub) | set(other):
            raise ValueError(f"einsum: {name} operand of {subscripts!r} has an index "
                             "absent from both output and the other operand")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_contract(out_sub, sub_b, sub_a, g, b.data), own=True)
        if b.requires_grad:
            b._accumulate(_contract(sub_a, out_sub, sub_b, a.data, g), own=True)

    return _make(_contract(sub_a, sub_b, out_sub, a.data, b.data), (a, b), backward)


# -- softmax ------------------------------------------------------------------


def softmax_lastdim(x):
    """Max-shifted softmax along the last axis."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        x._accumulate(y * (g - (g * y).sum(axis=-1, keepdims=True)), own=True)

    return _make(y, (x,), backward)


def log_softmax_lastdim(x):
    x = as_tensor(x)
    m = x.data.max(axis=-1, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse
    sm = np.exp(y)

    def backward(g):
        x._accumulate(g - sm * g.sum(axis=-1, keepdims=True), own=True)

    return _make(y, (x,), backward)


# -- structured ops ------------------------------------------------------------


def conv2d(x, w, stride=1, padding=0):
    """Cross-correlation of (N, Cin, H, W) with (Cout, Cin, kh, kw)."""
    x, w = as_tensor(x), as_tensor(w)
    n, cin, h, wid = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ValueError(f"conv2d channel mismatch: input {cin}, weight {cin_w}")
    if h + 2 * padding < kh or wid + 2 * padding < kw:
        raise ValueError("conv2d kernel does not fit the padded input")
    oh = kernels.conv_out_size(h, kh, stride, padding)
    ow = kernels.conv_out_size(wid, kw, stride, padding)
    cols = kernels.im2col(x.data, kh, kw, stride, padding)
    wm = w.data.reshape(cout, -1)
    out2d = cols @ wm.T
    out_data = np.ascontiguousarray(
        out2d.reshape(n, oh, ow, cout).transpose(0, 3, 1, 2))

    def backward(g):
        g2d = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
        if w.requires_grad:
            w._accumulate((g2d.T @ cols).reshape(w.shape), own=True)
        if x.requires_grad:
            x._accumulate(kernels.col2im(g2d @ wm, x.shape, kh, kw, stride, padding), own=True)

    return _make(out_data, (x, w), backward)


def conv1x1_tokens(x, w):
    """Per-token linear map: (T, C, N) with weight (C', C) -> (T, C', N)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv1x1_tokens shape mismatch: x {x.shape}, w {w.shape}")
    return einsum("oc,tcn->ton", w, x)


def avg_pool_2d(x, region=None):
    """Mean over a spatial rectangle of the trailing two axes.

    region is (y0, y1, x0, x1) with python-slice semantics; None pools the
    full map. Output drops the two spatial axes.
    """
    x = as_tensor(x)
    h, w = x.shape[-2], x.shape[-1]
    if region is None:
        region = (0, h, 0, w)
    y0, y1, x0, x1 = region
    if not (0 <= y0 < y1 <= h and 0 <= x0 < x1 <= w):
        raise ValueError(f"empty or out-of-bounds pooling region {region} for map {h}x{w}")
    key = (Ellipsis, slice(y0, y1), slice(x0, x1))
    return mean(getitem(x, key), axis=(-2, -1))


def batch_norm(x, gamma, beta, axes, eps=1e-5):
    """Normalize over ``axes`` with per-channel affine (training statistics).

    Returns (out, batch_mean, batch_var) with the biased variance used for
    normalization.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * invstd
    # channel axis is axis 1; reshape affine params for broadcast
    bshape = [1] * x.ndim
    bshape[1] = gamma.data.shape[0]
    gm = gamma.data.reshape(bshape)
    out_data = xhat * gm + beta.data.reshape(bshape)
    n = x.data.size // mu.size

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if x.requires_grad:
            gh = g * gm
            term = (n * gh - gh.sum(axis=axes, keepdims=True)
                    - xhat * (gh * xhat).sum(axis=axes, keepdims=True))
            x._accumulate(invstd / n * term, own=True)

    out = _make(out_data, (x, gamma, beta), backward)
    return out, mu.reshape(-1), var.reshape(-1)


def batch_norm_eval(x, gamma, beta, running_mean, running_var, eps=1e-5):
    """Affine-only normalization with frozen statistics."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    bshape = [1] * x.ndim
    bshape[1] = gamma.data.shape[0]
    invstd = (1.0 / np.sqrt(running_var + eps)).reshape(bshape)
    rm = running_mean.reshape(bshape)
    gm = gamma.data.reshape(bshape)
    out_data = (x.data - rm) * invstd * gm + beta.data.reshape(bshape)
    xhat = (x.data - rm) * invstd

    def backward(g):
        if gamma.requires_grad:
            axes = tuple(i for i in range(x.ndim) if i != 1)
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            axes = tuple(i for i in range(x.ndim) if i != 1)
            beta._accumulate(g.sum(axis=axes))
        if x.requires_grad:
            x._accumulate(g * gm * invstd, own=True)

    return _make(out_data, (x, gamma, beta), backward)

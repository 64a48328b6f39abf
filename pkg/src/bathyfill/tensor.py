"""Small n-dimensional tensor with reverse-mode automatic differentiation.

Every operation the depth network needs is implemented here with an
analytic gradient. Arrays are numpy-backed; the graph is built eagerly
as closures on the output node, and ``backward`` replays it in reverse
topological order. Computations default to float32; the gradient-check
utilities run the same code paths in float64.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GradientError(RuntimeError):
    """Raised on invalid backward calls or non-finite gradients."""


def _as_dtype(data, dtype):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(DEFAULT_DTYPE)


class Tensor:
    """Value node in the autodiff graph.

    ``data`` is a row-major numpy array; ``grad`` (same shape) is allocated
    lazily during backward. Nodes created by operations carry their parent
    nodes and a closure that scatters the output gradient back to them.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_backward_ran")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_dtype(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._backward_ran = False

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _from_op(data, parents, backward):
        out = Tensor(data)
        parents = tuple(p for p in parents if isinstance(p, Tensor))
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

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

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- gradient machinery ---------------------------------------------------

    def _accumulate(self, grad):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Accumulate gradients of this scalar into every reachable node.

        A second call on the same node is an error; gradients are reset
        explicitly (``zero_grad``) between optimization steps.
        """
        if self.data.size != 1:
            raise GradientError(f"backward requires a scalar loss, got shape {self.shape}")
        if self._backward_ran:
            raise GradientError("backward already ran for this node; rebuild the graph")
        self._backward_ran = True
        order = self._topo_order()
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    def _topo_order(self):
        # Iterative DFS: graphs from deep networks overflow the recursion limit.
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return order

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, *axes)

    def sqrt(self):
        return sqrt(self)

    def exp(self):
        return exp(self)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    out_data = a.data + b.data

    def backward(grad):
        if a.requires_grad or a._parents:
            a._accumulate(_unbroadcast(grad, a.shape))
        if b.requires_grad or b._parents:
            b._accumulate(_unbroadcast(grad, b.shape))

    return Tensor._from_op(out_data, (a, b), backward)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    out_data = a.data - b.data

    def backward(grad):
        if a.requires_grad or a._parents:
            a._accumulate(_unbroadcast(grad, a.shape))
        if b.requires_grad or b._parents:
            b._accumulate(_unbroadcast(-grad, b.shape))

    return Tensor._from_op(out_data, (a, b), backward)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    out_data = a.data * b.data

    def backward(grad):
        if a.requires_grad or a._parents:
            a._accumulate(_unbroadcast(grad * b.data, a.shape))
        if b.requires_grad or b._parents:
            b._accumulate(_unbroadcast(grad * a.data, b.shape))

    return Tensor._from_op(out_data, (a, b), backward)


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    out_data = a.data / b.data

    def backward(grad):
        if a.requires_grad or a._parents:
            a._accumulate(_unbroadcast(grad / b.data, a.shape))
        if b.requires_grad or b._parents:
            b._accumulate(_unbroadcast(-grad * a.data / (b.data * b.data), b.shape))

    return Tensor._from_op(out_data, (a, b), backward)


def power(a, exponent):
    a = _wrap(a)
    exponent = float(exponent)
    out_data = a.data**exponent

    def backward(grad):
        a._accumulate(grad * exponent * a.data ** (exponent - 1.0))

    return Tensor._from_op(out_data, (a,), backward)


def exp(a):
    a = _wrap(a)
    out_data = np.exp(a.data)

    def backward(grad):
        a._accumulate(grad * out_data)

    return Tensor._from_op(out_data, (a,), backward)


def sqrt(a):
    a = _wrap(a)
    out_data = np.sqrt(a.data)

    def backward(grad):
        a._accumulate(grad * 0.5 / out_data)

    return Tensor._from_op(out_data, (a,), backward)


def relu(a):
    a = _wrap(a)
    out_data = np.maximum(a.data, 0)

    def backward(grad):
        a._accumulate(grad * (a.data > 0))

    return Tensor._from_op(out_data, (a,), backward)


# -- reductions ---------------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = _wrap(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(grad):
        g = grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape).copy())

    return Tensor._from_op(out_data, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = _wrap(a)
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.data.shape[ax] for ax in axis]))
    else:
        count = a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- shape manipulation -------------------------------------------------------


def reshape(a, *shape):
    a = _wrap(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out_data = a.data.reshape(shape)

    def backward(grad):
        a._accumulate(grad.reshape(a.shape))

    return Tensor._from_op(out_data, (a,), backward)


def transpose(a, *axes):
    a = _wrap(a)
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    if not axes:
        axes = tuple(reversed(range(a.ndim)))
    out_data = a.data.transpose(axes)
    inverse = np.argsort(axes)

    def backward(grad):
        a._accumulate(grad.transpose(inverse))

    return Tensor._from_op(out_data, (a,), backward)


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(grad):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            index = [slice(None)] * grad.ndim
            index[axis] = slice(lo, hi)
            t._accumulate(grad[tuple(index)])

    return Tensor._from_op(out_data, tuple(tensors), backward)


def split(a, sizes, axis=0):
    """Inverse of ``concat``: cut ``a`` into chunks of the given sizes."""
    a = _wrap(a)
    if sum(sizes) != a.shape[axis]:
        raise ShapeError(f"split sizes {sizes} do not cover axis {axis} of shape {a.shape}")
    pieces = []
    offset = 0
    for size in sizes:
        index = [slice(None)] * a.ndim
        index[axis] = slice(offset, offset + size)
        index = tuple(index)
        out_data = a.data[index]

        def backward(grad, index=index):
            g = np.zeros_like(a.data)
            g[index] = grad
            a._accumulate(g)

        pieces.append(Tensor._from_op(out_data, (a,), backward))
        offset += size
    return pieces


def take(a, indices, axis):
    """Gather along ``axis``; backward scatter-adds (repeated indices allowed)."""
    a = _wrap(a)
    indices = np.asarray(indices)
    out_data = np.take(a.data, indices, axis=axis)

    def backward(grad):
        g = np.zeros_like(a.data)
        g_moved = np.moveaxis(g, axis, 0)
        np.add.at(g_moved, indices, np.moveaxis(grad, axis, 0))
        a._accumulate(g)

    return Tensor._from_op(out_data, (a,), backward)


# -- linear algebra -----------------------------------------------------------


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shapes incompatible: {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def backward(grad):
        if a.requires_grad or a._parents:
            ga = grad @ b.data.swapaxes(-1, -2)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad or b._parents:
            gb = a.data.swapaxes(-1, -2) @ grad
            b._accumulate(_unbroadcast(gb, b.shape))

    return Tensor._from_op(out_data, (a, b), backward)


def linear(x, weight, bias=None):
    """Affine map ``x @ weight + bias`` with weight shaped (in, out)."""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


# -- neural-net primitives ----------------------------------------------------


def softmax(a, axis=-1):
    a = _wrap(a)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(grad):
        dot = (grad * out_data).sum(axis=axis, keepdims=True)
        a._accumulate((grad - dot) * out_data)

    return Tensor._from_op(out_data, (a,), backward)


def layernorm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then scale-shift."""
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out_data = xhat * gamma.data + beta.data

    def backward(grad):
        if gamma.requires_grad or gamma._parents:
            axes = tuple(range(grad.ndim - 1))
            gamma._accumulate((grad * xhat).sum(axis=axes).reshape(gamma.shape))
        if beta.requires_grad or beta._parents:
            axes = tuple(range(grad.ndim - 1))
            beta._accumulate(grad.sum(axis=axes).reshape(beta.shape))
        if x.requires_grad or x._parents:
            gxhat = grad * gamma.data
            m1 = gxhat.mean(axis=-1, keepdims=True)
            m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
            x._accumulate((gxhat - m1 - xhat * m2) * inv_std)

    return Tensor._from_op(out_data, (x, gamma, beta), backward)


def dropout(x, p, training, rng=None):
    """Inverted dropout: train-time scaling by 1/(1-p); inference is identity."""
    x = _wrap(x)
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng for determinism")
    keep = (rng.random(x.shape) >= p).astype(x.dtype)
    scale = keep / (1.0 - p)

    def backward(grad):
        x._accumulate(grad * scale)

    return Tensor._from_op(x.data * scale, (x,), backward)


def conv2d(x, kernel, bias=None, stride=1, padding=0):
    """2-D cross-correlation of (C,H,W) or (N,C,H,W) input with (O,C,kh,kw) kernel.

    Output spatial size is (H + 2*padding - kh)//stride + 1 per side; the
    backward pass scatters window gradients back through the same im2col view.
    """
    x, kernel = _wrap(x), _wrap(kernel)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 3/4-D input and 4-D kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = xd.shape
    c_out, c_in, kh, kw = kernel.shape
    if c != c_in:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (w + 2 * padding - kw) // stride + 1
    if out_h <= 0 or out_w <= 0:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}, kernel {kernel.shape}, padding {padding}, stride {stride}")

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    cols = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out_data = np.einsum("nchwab,ocab->nohw", cols, kernel.data, optimize=True)
    if bias is not None:
        bias = _wrap(bias)
        out_data = out_data + bias.data.reshape(1, c_out, 1, 1)

    def backward(grad):
        g = grad[None] if squeeze else grad
        if bias is not None and (bias.requires_grad or bias._parents):
            bias._accumulate(g.sum(axis=(0, 2, 3)).reshape(bias.shape))
        if kernel.requires_grad or kernel._parents:
            kernel._accumulate(np.einsum("nchwab,nohw->ocab", cols, g, optimize=True))
        if x.requires_grad or x._parents:
            col_grad = np.einsum("nohw,ocab->nchwab", g, kernel.data, optimize=True)
            gx = np.zeros_like(xp)
            for a in range(kh):
                for b in range(kw):
                    gx[:, :, a : a + stride * out_h : stride, b : b + stride * out_w : stride] += col_grad[:, :, :, :, a, b]
            if padding:
                gx = gx[:, :, padding:-padding, padding:-padding]
            x._accumulate(gx[0] if squeeze else gx)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    out_data = out_data[0] if squeeze else out_data
    return Tensor._from_op(out_data, parents, backward)


def maxpool2d(x, window=2):
    """Non-overlapping max pooling; gradient routes to the first max per window."""
    x = _wrap(x)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    n, c, h, w = xd.shape
    if h % window or w % window:
        raise ShapeError(f"maxpool2d requires dims divisible by {window}, got {x.shape}")
    oh, ow = h // window, w // window
    tiles = xd.reshape(n, c, oh, window, ow, window).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, window * window)
    arg = tiles.argmax(axis=-1)
    out_data = np.take_along_axis(tiles, arg[..., None], axis=-1)[..., 0]

    def backward(grad):
        g = grad[None] if squeeze else grad
        gt = np.zeros_like(tiles)
        np.put_along_axis(gt, arg[..., None], g[..., None], axis=-1)
        gx = gt.reshape(n, c, oh, ow, window, window).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        x._accumulate(gx[0] if squeeze else gx)

    out_data = out_data[0] if squeeze else out_data
    return Tensor._from_op(out_data, (x,), backward)


def avgpool2d(x, window):
    """Non-overlapping average pooling over ``window`` x ``window`` tiles."""
    x = _wrap(x)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    n, c, h, w = xd.shape
    if h % window or w % window:
        raise ShapeError(f"avgpool2d requires dims divisible by {window}, got {x.shape}")
    oh, ow = h // window, w // window
    out_data = xd.reshape(n, c, oh, window, ow, window).mean(axis=(3, 5))

    def backward(grad):
        g = grad[None] if squeeze else grad
        gx = np.broadcast_to(
            g[:, :, :, None, :, None] / (window * window), (n, c, oh, window, ow, window)
        ).reshape(n, c, h, w)
        x._accumulate(gx.copy()[0] if squeeze else gx.copy())

    out_data = out_data[0] if squeeze else out_data
    return Tensor._from_op(out_data, (x,), backward)


def _interp_1d(x, out_len, axis):
    in_len = x.shape[axis]
    if out_len == in_len:
        return x
    pos = (np.arange(out_len) + 0.5) * (in_len / out_len) - 0.5
    pos = np.clip(pos, 0.0, in_len - 1.0)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, in_len - 1)
    frac = (pos - i0).astype(x.dtype)
    bshape = [1] * x.ndim
    bshape[axis] = out_len
    frac = frac.reshape(bshape)
    return add(mul(take(x, i0, axis), 1.0 - frac), mul(take(x, i1, axis), frac))


def bilinear_resize(x, out_h, out_w):
    """Resize the trailing two axes with half-pixel-centered bilinear sampling."""
    x = _wrap(x)
    if x.ndim < 2:
        raise ShapeError(f"bilinear_resize needs at least 2 dims, got {x.shape}")
    return _interp_1d(_interp_1d(x, out_h, x.ndim - 2), out_w, x.ndim - 1)


# -- gradient checking --------------------------------------------------------


def finite_difference_check(f, params, eps=1e-4, samples_per_param=None, rng=None):
    """Max relative error between analytic and central-difference gradients.

    ``f`` is a nullary callable returning a scalar Tensor and closing over
    ``params``. When ``samples_per_param`` is given, only that many randomly
    chosen coordinates per parameter are probed (needed for whole networks).
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = f()
    if loss.data.size != 1:
        raise GradientError(f"finite_difference_check needs scalar f, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise GradientError("f produced a non-finite value at the base point")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    if rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    for p, ana in zip(params, analytic):
        ana_flat = ana.reshape(-1)
        if samples_per_param is None or samples_per_param >= p.data.size:
            idxs = range(p.data.size)
        else:
            idxs = rng.choice(p.data.size, size=samples_per_param, replace=False)
        for i in idxs:
            where = np.unravel_index(i, p.data.shape)
            saved = p.data[where]
            p.data[where] = saved + eps
            f_plus = f().data.item()
            p.data[where] = saved - eps
            f_minus = f().data.item()
            p.data[where] = saved
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise GradientError(f"f produced NaN/inf while perturbing coordinate {i}")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            rel = abs(float(ana_flat[i]) - numeric) / (abs(float(ana_flat[i])) + eps)
            worst = max(worst, rel)
    return worst

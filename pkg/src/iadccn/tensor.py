"""Dense N-d tensors with reverse-mode differentiation.

Every op in this module produces a new :class:`Tensor` whose ``_backward``
closure maps the output gradient to one gradient per parent.  Calling
:meth:`Tensor.backward` on a scalar walks the recorded graph in reverse
topological order, so each node is visited once and gradients accumulate
additively at fan-out points.

Feature maps are always laid out N x C x H x W.

Precision is a process-wide switch: 64-bit for verification (gradient
checks, oracles), 32-bit for training runs.  See :func:`set_precision`.
"""

import contextlib
import logging

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ConfigurationError, DimensionError, GraphError, NumericError

logger = logging.getLogger(__name__)

_DTYPES = {32: np.float32, 64: np.float64}

_state = {"dtype": np.float64, "debug": False, "grad_enabled": True}


def set_precision(bits):
    if bits not in _DTYPES:
        raise ConfigurationError(f"precision must be 32 or 64 bits, got {bits!r}")
    _state["dtype"] = _DTYPES[bits]


def get_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(bits):
    """Temporarily switch the global precision."""
    old = _state["dtype"]
    set_precision(bits)
    try:
        yield
    finally:
        _state["dtype"] = old


def set_debug(flag):
    """When on, every op asserts that its output is finite."""
    _state["debug"] = bool(flag)


@contextlib.contextmanager
def no_grad():
    old = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = old


class Tensor:
    """Dense array plus an optional gradient slot."""

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=_state["dtype"], copy=None)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = "leaf"
        self._parents = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self):
        return reduce_sum(self)

    def mean(self):
        return reduce_mean(self)

    def backward(self):
        """Populate ``grad`` on every tensor that requires it along the graph."""
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("loss is detached: no input on its path requires grad")
        if self._consumed:
            raise GraphError("backward already ran on this loss; rebuild the graph first")

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node))
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        self._consumed = True


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def custom_op(data, parents, backward, name):
    """Wrap ``data`` as the output of a differentiable op.

    ``backward(g)`` receives the output gradient and must return one array
    (or ``None``) per parent, shaped like that parent.
    """
    out = Tensor(data)
    out.op = name
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    if _state["debug"] and not np.all(np.isfinite(out.data)):
        raise NumericError(f"non-finite values produced by {name}")
    return out


def _check_4d(x, what):
    if x.ndim != 4:
        raise DimensionError(f"{what} must be 4-D (N, C, H, W), got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution


def _pad_nhwc(x, pad):
    """N x C x H x W -> zero-padded, contiguous N x (H+2p) x (W+2p) x C."""
    n, c, h, w = x.shape
    out = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=x.dtype)
    out[:, pad:pad + h, pad:pad + w, :] = x.transpose(0, 2, 3, 1)
    return out


def _im2col(xh, k, stride, out_h, out_w):
    """Padded N x Hp x Wp x C -> (N * out_h * out_w, k * k * C), rows in N,y,x order.

    Windows are gathered channel-last so the innermost copy is contiguous.
    """
    n, _, _, c = xh.shape
    if k == 1 and stride == 1:
        return xh.reshape(n * out_h * out_w, c)
    sn, sh, sw, sc = xh.strides
    win = as_strided(
        xh,
        shape=(n, out_h, out_w, k, k, c),
        strides=(sn, sh * stride, sw * stride, sh, sw, sc),
        writeable=False,
    )
    return win.reshape(n * out_h * out_w, k * k * c)


def conv_output_size(size, k, stride, pad):
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ConfigurationError(
            f"extent {size} with kernel {k}, stride {stride}, pad {pad} "
            "does not give an integer output size"
        )
    return span // stride + 1


def _nchw(mat, n, h, w):
    return np.ascontiguousarray(mat.reshape(n, h, w, -1).transpose(0, 3, 1, 2))


def conv2d(x, weight, bias=None, stride=1, pad=0):
    """Cross-correlation of ``x`` with ``weight`` plus a per-channel bias."""
    _check_4d(x, "conv2d input")
    _check_4d(weight, "conv2d weight")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise DimensionError(f"conv2d channel axis (1): input has {cin}, weight expects {wcin}")
    if kh != kw:
        raise DimensionError(f"conv2d kernel axes (2, 3) must be square, got {kh}x{kw}")
    if kh % 2 == 0:
        raise ConfigurationError(f"conv2d kernel size must be odd, got {kh}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d bias axis (0): expected ({cout},), got {bias.shape}")
    if stride < 1 or pad < 0:
        raise ConfigurationError("conv2d needs stride >= 1 and pad >= 0")
    k = kh
    out_h = conv_output_size(h, k, stride, pad)
    out_w = conv_output_size(w, k, stride, pad)

    wmat = weight.data.transpose(0, 2, 3, 1).reshape(cout, -1)
    cols = _im2col(_pad_nhwc(x.data, pad), k, stride, out_h, out_w)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = _nchw(out, n, out_h, out_w)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = None
        if weight.requires_grad:
            gw = (gmat.T @ cols).reshape(cout, k, k, cin).transpose(0, 3, 1, 2)
        gb = gmat.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            if stride == 1 and pad <= k - 1:
                # full correlation with the flipped, channel-transposed kernel
                wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(cin, -1)
                gcols = _im2col(_pad_nhwc(g, k - 1 - pad), k, 1, h, w)
                gx = _nchw(gcols @ wflip.T, n, h, w)
            else:
                gcols = (gmat @ wmat).reshape(n, out_h, out_w, k, k, cin)
                gxp = np.zeros((n, cin, h + 2 * pad, w + 2 * pad), dtype=g.dtype)
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += (
                            gcols[:, :, :, i, j, :].transpose(0, 3, 1, 2)
                        )
                gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return custom_op(out, parents, backward, "conv2d")


# ---------------------------------------------------------------------------
# activations


def relu(x):
    mask = x.data > 0
    return custom_op(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def _stable_sigmoid(v):
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x):
    s = _stable_sigmoid(x.data).astype(x.data.dtype, copy=False)
    return custom_op(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


# ---------------------------------------------------------------------------
# resampling


def maxpool2d(x):
    """2x2 max-pool, stride 2; ties go to the first element in row-major order."""
    _check_4d(x, "maxpool2d input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ConfigurationError(f"maxpool2d needs even extents, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)[..., None]
    out = np.take_along_axis(win, arg, axis=-1)[..., 0]

    def backward(g):
        gwin = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gwin, arg, g[..., None], axis=-1)
        gwin = gwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gwin.reshape(n, c, h, w),)

    return custom_op(out, (x,), backward, "maxpool2d")


def _bilinear_taps(size, factor):
    """Source indices and weights for half-pixel-centre upsampling of one axis."""
    src = (np.arange(size * factor) + 0.5) / factor - 0.5
    src = np.maximum(src, 0.0)
    lo = np.minimum(np.floor(src).astype(np.intp), size - 1)
    hi = np.minimum(lo + 1, size - 1)
    frac = src - lo
    mat = np.zeros((size * factor, size))
    rows = np.arange(size * factor)
    np.add.at(mat, (rows, lo), 1.0 - frac)
    np.add.at(mat, (rows, hi), frac)
    return lo, hi, frac, mat


def upsample_bilinear(x, factor):
    """Bilinear upsampling by an integer factor, half-pixel centres, edges clamped."""
    _check_4d(x, "upsample_bilinear input")
    if int(factor) != factor or factor < 1:
        raise ConfigurationError(f"upsample factor must be an integer >= 1, got {factor}")
    factor = int(factor)
    if factor == 1:
        return custom_op(x.data.copy(), (x,), lambda g: (g,), "upsample_bilinear")
    dt = x.data.dtype
    h, w = x.shape[2:]
    lo_h, hi_h, fr_h, mat_h = _bilinear_taps(h, factor)
    lo_w, hi_w, fr_w, mat_w = _bilinear_taps(w, factor)
    fr_h = fr_h.astype(dt)[:, None]
    fr_w = fr_w.astype(dt)
    # lerp form a + t * (b - a) keeps constant maps exactly constant
    a = x.data[:, :, lo_h, :]
    rows = a + fr_h * (x.data[:, :, hi_h, :] - a)
    a = rows[:, :, :, lo_w]
    out = a + fr_w * (rows[:, :, :, hi_w] - a)
    mat_h = mat_h.astype(dt)
    mat_w = mat_w.astype(dt)

    def backward(g):
        return (mat_h.T @ (g @ mat_w),)

    return custom_op(out, (x,), backward, "upsample_bilinear")


def crop(x, height, width):
    """Keep the top-left ``height`` x ``width`` window of a feature map."""
    _check_4d(x, "crop input")
    h, w = x.shape[2:]
    if height > h or width > w:
        raise DimensionError(f"cannot crop {h}x{w} to {height}x{width}")
    if (height, width) == (h, w):
        return x

    def backward(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[:, :, :height, :width] = g
        return (full,)

    return custom_op(x.data[:, :, :height, :width].copy(), (x,), backward, "crop")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _broadcast_axis(a_shape, b_shape):
    """Return the broadcast summary: None (equal), 'scalar_a', 'scalar_b', 'chan_a', 'chan_b'."""
    if a_shape == b_shape:
        return None
    if b_shape == () or b_shape == (1,):
        return "scalar_b"
    if a_shape == () or a_shape == (1,):
        return "scalar_a"
    if len(a_shape) == 4 and len(b_shape) == 4:
        same_rest = a_shape[0] == b_shape[0] and a_shape[2:] == b_shape[2:]
        if same_rest and b_shape[1] == 1:
            return "chan_b"
        if same_rest and a_shape[1] == 1:
            return "chan_a"
    raise DimensionError(f"incompatible shapes for elementwise op: {a_shape} and {b_shape}")


def _reduce_to(g, mode, side):
    if mode is None:
        return g
    if mode == f"scalar_{side}":
        return np.asarray(g.sum())
    if mode == f"chan_{side}":
        return g.sum(axis=1, keepdims=True)
    return g


def elementwise(a, b, kind):
    """``a (kind) b`` for kind in {'add', 'sub', 'mul'}.

    ``b`` (or ``a``) may be a scalar or an N x 1 x H x W map broadcast across
    the channels of the other operand.
    """
    a = _as_tensor(a)
    b = _as_tensor(b)
    mode = _broadcast_axis(a.shape, b.shape)
    if kind == "add":
        out = a.data + b.data

        def backward(g):
            return _fit(_reduce_to(g, mode, "a"), a), _fit(_reduce_to(g, mode, "b"), b)
    elif kind == "sub":
        out = a.data - b.data

        def backward(g):
            return _fit(_reduce_to(g, mode, "a"), a), _fit(_reduce_to(-g, mode, "b"), b)
    elif kind == "mul":
        out = a.data * b.data

        def backward(g):
            ga = _fit(_reduce_to(g * b.data, mode, "a"), a) if a.requires_grad else None
            gb = _fit(_reduce_to(g * a.data, mode, "b"), b) if b.requires_grad else None
            return ga, gb
    else:
        raise ConfigurationError(f"unknown elementwise kind {kind!r}")
    return custom_op(out, (a, b), backward, kind)


def _fit(g, t):
    return g.reshape(t.shape)


def add(a, b):
    return elementwise(a, b, "add")


def sub(a, b):
    return elementwise(a, b, "sub")


def mul(a, b):
    return elementwise(a, b, "mul")


# ---------------------------------------------------------------------------
# reductions


def reduce_sum(x):
    shape = x.shape
    return custom_op(
        np.asarray(x.data.sum(), dtype=x.data.dtype),
        (x,),
        lambda g: (np.broadcast_to(g, shape).copy(),),
        "sum",
    )


def reduce_mean(x):
    shape = x.shape
    n = x.data.size
    return custom_op(
        np.asarray(x.data.mean(), dtype=x.data.dtype),
        (x,),
        lambda g: (np.broadcast_to(g / n, shape).copy(),),
        "mean",
    )


# ---------------------------------------------------------------------------
# verification


def grad_check(f, inputs, eps=1e-5, max_coords=None, rng=None):
    """Largest relative error between backprop and central differences.

    ``f(*inputs)`` must return a scalar tensor.  Relative error per
    coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.  With ``max_coords``,
    only that many randomly chosen coordinates per input are probed.
    """
    if get_dtype() is not np.float64:
        raise ConfigurationError("grad_check requires 64-bit precision")
    for t in inputs:
        t.grad = None
        t.requires_grad = True
    out = f(*inputs)
    out.backward()
    analytic = [
        np.zeros(t.shape) if t.grad is None else np.array(t.grad, dtype=np.float64) for t in inputs
    ]
    rng = rng if rng is not None else np.random.default_rng(0)

    worst = 0.0
    with no_grad():
        for t, a in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            if not np.shares_memory(flat, t.data):
                raise ConfigurationError("grad_check needs contiguous input buffers")
            idx = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            a_flat = a.reshape(-1)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                fp = f(*inputs).item()
                flat[i] = orig - eps
                fm = f(*inputs).item()
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                err = abs(a_flat[i] - num) / max(abs(a_flat[i]), abs(num), 1e-8)
                worst = max(worst, err)
    return worst

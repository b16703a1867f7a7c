"""Dense float64 tensor engine with taped reverse-mode differentiation.

Every forward op eagerly records its inputs and a backward closure on the
produced tensor; ``backward(loss)`` walks the recorded graph once in reverse
topological order and frees it afterwards (graphs are single-use).

All math is 64-bit. Operations are deliberately restricted to what the depth
models and losses need: same-shape elementwise ops, scalar broadcasting, a
channel-bias add, conv2d, bilinear roi resampling, channel concat, flat
gather, and full reductions.
"""

import numpy as np

from .errors import ShapeError


class Tensor:
    """Multi-dimensional float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, _parents=(), _backward_fn=None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = tuple(_parents)
        self._backward_fn = _backward_fn

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are accepted on either side
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _make(data, parents, backward_fn):
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=parents if req else (),
                  _backward_fn=backward_fn if req else None)


def _check_same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a, b):
    if not isinstance(b, Tensor):
        a = _as_tensor(a)
        return _make(a.data + float(b), (a,), lambda g: _accumulate(a, g))
    a = _as_tensor(a)
    _check_same_shape(a, b, "add")

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b):
    if not isinstance(b, Tensor):
        a = _as_tensor(a)
        return _make(a.data - float(b), (a,), lambda g: _accumulate(a, g))
    a = _as_tensor(a)
    _check_same_shape(a, b, "sub")

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b):
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        s = float(b)
        return _make(a.data * s, (a,), lambda g: _accumulate(a, g * s))
    _check_same_shape(a, b, "mul")

    def bw(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _make(a.data * b.data, (a, b), bw)


def div(a, b):
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        s = float(b)
        return _make(a.data / s, (a,), lambda g: _accumulate(a, g / s))
    _check_same_shape(a, b, "div")

    def bw(g):
        _accumulate(a, g / b.data)
        _accumulate(b, -g * a.data / (b.data * b.data))

    return _make(a.data / b.data, (a, b), bw)


def square(a):
    a = _as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: _accumulate(a, 2.0 * a.data * g))


def log(a):
    a = _as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: _accumulate(a, g / a.data))


def exp(a):
    a = _as_tensor(a)
    out_data = np.exp(a.data)
    return _make(out_data, (a,), lambda g: _accumulate(a, g * out_data))


def sqrt(a):
    """Elementwise square root; derivative is guarded near 0 (subgradient)."""
    a = _as_tensor(a)
    root = np.sqrt(a.data)
    denom = np.maximum(2.0 * root, 1e-12)
    return _make(root, (a,), lambda g: _accumulate(a, g / denom))


def absolute(a):
    """|x| with sign subgradient (0 at exactly 0)."""
    a = _as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: _accumulate(a, g * np.sign(a.data)))


def clamp_min(a, floor):
    a = _as_tensor(a)
    floor = float(floor)
    keep = a.data > floor
    return _make(np.maximum(a.data, floor), (a,),
                 lambda g: _accumulate(a, g * keep))


def leaky_relu(a, slope=0.01):
    a = _as_tensor(a)
    factor = np.where(a.data >= 0.0, 1.0, slope)
    return _make(a.data * factor, (a,), lambda g: _accumulate(a, g * factor))


def softplus(a):
    """log(1 + e^x) via logaddexp; derivative is the logistic sigmoid."""
    a = _as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    sig = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: _accumulate(a, g * sig))


# ---------------------------------------------------------------------------
# reductions, reshaping, indexing
# ---------------------------------------------------------------------------

def _scalar(g):
    return float(np.asarray(g).reshape(-1)[0])


def sum_all(a):
    a = _as_tensor(a)
    return _make(np.array(np.sum(a.data)), (a,),
                 lambda g: _accumulate(a, np.full(a.data.shape, _scalar(g))))


def mean_all(a):
    a = _as_tensor(a)
    n = a.data.size
    return _make(np.array(np.mean(a.data)), (a,),
                 lambda g: _accumulate(a, np.full(a.data.shape, _scalar(g) / n)))


def sub_broadcast(a, s):
    """a - s with s a scalar tensor, broadcast over a's shape."""
    a = _as_tensor(a)
    s = _as_tensor(s)
    if s.data.size != 1:
        raise ShapeError("sub_broadcast expects a scalar second argument")

    def bw(g):
        g = np.asarray(g)
        _accumulate(a, g)
        _accumulate(s, np.array(-g.sum()).reshape(s.data.shape))

    return _make(a.data - s.data.reshape(-1)[0], (a, s), bw)


def reshape(a, shape):
    a = _as_tensor(a)
    out_data = a.data.reshape(shape)
    return _make(out_data, (a,),
                 lambda g: _accumulate(a, np.asarray(g).reshape(a.data.shape)))


def gather_flat(a, indices):
    """out[i] = flat(a)[indices[i]]; gradient scatter-adds back."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.size):
        raise ShapeError("gather_flat: index out of range")
    flat = a.data.reshape(-1)

    def bw(g):
        acc = np.zeros(a.data.size, dtype=np.float64)
        np.add.at(acc, idx, np.asarray(g).reshape(-1))
        _accumulate(a, acc.reshape(a.data.shape))

    return _make(flat[idx], (a,), bw)


def add_channel_bias(x, b):
    """x[C,H,W] + b[C] broadcast over the spatial axes."""
    x = _as_tensor(x)
    b = _as_tensor(b)
    if x.data.ndim != 3 or b.data.ndim != 1 or b.data.shape[0] != x.data.shape[0]:
        raise ShapeError(f"add_channel_bias: got {x.data.shape} and {b.data.shape}")

    def bw(g):
        _accumulate(x, g)
        _accumulate(b, np.asarray(g).sum(axis=(1, 2)))

    return _make(x.data + b.data[:, None, None], (x, b), bw)


# ---------------------------------------------------------------------------
# structured ops: concat, conv2d, bilinear resampling
# ---------------------------------------------------------------------------

def concat_channels(a, b):
    """Stack [C1,H,W] and [C2,H,W] along channels; gradient splits back."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ShapeError("concat_channels expects rank-3 tensors")
    if a.data.shape[1:] != b.data.shape[1:]:
        raise ShapeError(
            f"concat_channels: spatial shapes {a.data.shape[1:]} vs {b.data.shape[1:]}")
    c1 = a.data.shape[0]

    def bw(g):
        g = np.asarray(g)
        _accumulate(a, g[:c1])
        _accumulate(b, g[c1:])

    return _make(np.concatenate([a.data, b.data], axis=0), (a, b), bw)


def _im2col(xp, ks, stride, h_out, w_out):
    c = xp.shape[0]
    s0, s1, s2 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(c, ks, ks, h_out, w_out),
        strides=(s0, s1, s2, s1 * stride, s2 * stride),
        writeable=False,
    )
    return np.ascontiguousarray(windows).reshape(c * ks * ks, h_out * w_out)


def conv2d(x, kernel, stride=1, pad=0):
    """2-D cross-correlation of x[C_in,H,W] with kernel[C_out,C_in,k,k].

    Output spatial size is (H + 2*pad - k)/stride + 1, which must be an exact
    integer. Differentiable w.r.t. both the input and the kernel.
    """
    x = _as_tensor(x)
    kernel = _as_tensor(kernel)
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ShapeError("conv2d expects x[C,H,W] and kernel[C_out,C_in,k,k]")
    c_in, h, w = x.data.shape
    c_out, c_k, kh, kw = kernel.data.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd size, got {kh}x{kw}")
    if c_k != c_in:
        raise ShapeError(f"conv2d: kernel expects {c_k} input channels, input has {c_in}")
    if stride < 1 or pad < 0:
        raise ShapeError("conv2d: stride must be >= 1 and pad >= 0")
    ks = kh
    span_h = h + 2 * pad - ks
    span_w = w + 2 * pad - ks
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ShapeError(
            f"conv2d: spatial extent {h}x{w} with k={ks} pad={pad} stride={stride} "
            "does not divide into an integer output size")
    h_out = span_h // stride + 1
    w_out = span_w // stride + 1

    if ks == 1 and pad == 0 and stride == 1:
        # pointwise conv: plain channel-mixing gemm
        kmat = kernel.data.reshape(c_out, c_in)
        out = (kmat @ x.data.reshape(c_in, h * w)).reshape(c_out, h, w)

        def bw_pointwise(g):
            gm = np.asarray(g).reshape(c_out, h * w)
            if kernel.requires_grad:
                _accumulate(kernel,
                            (gm @ x.data.reshape(c_in, h * w).T)
                            .reshape(kernel.data.shape))
            if x.requires_grad:
                _accumulate(x, (kmat.T @ gm).reshape(c_in, h, w))

        return _make(out, (x, kernel), bw_pointwise)

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    cols = _im2col(xp, ks, stride, h_out, w_out)
    kmat = kernel.data.reshape(c_out, c_in * ks * ks)
    out = (kmat @ cols).reshape(c_out, h_out, w_out)

    def bw(g):
        gm = np.asarray(g).reshape(c_out, h_out * w_out)
        if kernel.requires_grad:
            _accumulate(kernel, (gm @ cols.T).reshape(kernel.data.shape))
        if x.requires_grad:
            gcols = (kmat.T @ gm).reshape(c_in, ks, ks, h_out, w_out)
            gxp = np.zeros_like(xp)
            for i in range(ks):
                for j in range(ks):
                    gxp[:, i:i + stride * h_out:stride,
                        j:j + stride * w_out:stride] += gcols[:, i, j]
            if pad:
                gxp = gxp[:, pad:-pad, pad:-pad]
            _accumulate(x, gxp)

    return _make(out, (x, kernel), bw)


def _sample_axis(n_in, start, length, n_out):
    """Center positions for align-corners-false sampling, snapped to the grid.

    Snapping keeps pixel-aligned rois exact (crops equal subarrays bitwise).
    """
    centers = start * n_in + (np.arange(n_out) + 0.5) * (length * n_in / n_out) - 0.5
    rounded = np.round(centers)
    snap = np.abs(centers - rounded) < 1e-9
    centers = np.where(snap, rounded, centers)
    lo = np.floor(centers)
    frac = centers - lo
    i0 = np.clip(lo, 0, n_in - 1).astype(np.intp)
    i1 = np.clip(lo + 1, 0, n_in - 1).astype(np.intp)
    return i0, i1, frac


_AXIS_WEIGHT_CACHE = {}


def _axis_weights(n_in, start, length, n_out):
    """Sparse-as-dense interpolation matrix (n_out x n_in), two taps per row.

    Rows with an exactly snapped center are one-hot, which keeps identity
    resamples and pixel-aligned crops bit-exact. Matrices are memoized: the
    same rois recur every training step.
    """
    key = (n_in, float(start), float(length), n_out)
    cached = _AXIS_WEIGHT_CACHE.get(key)
    if cached is not None:
        return cached
    i0, i1, frac = _sample_axis(n_in, start, length, n_out)
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    m.setflags(write=False)
    if len(_AXIS_WEIGHT_CACHE) < 4096:
        _AXIS_WEIGHT_CACHE[key] = m
    return m


def bilinear_resample(x, roi, out_h, out_w):
    """Sample x[C,H,W] over roi=(top,left,height,width) in [0,1] normalized
    coordinates onto a regular out_h x out_w grid, bilinearly.

    Sample centers sit at (i+0.5)/n inside the roi (align-corners-false), so a
    full-image roi at the native size is an exact identity and constants are
    preserved at borders. Differentiable w.r.t. x only. Implemented as a
    separable pair of interpolation matrices applied by matmul.
    """
    x = _as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeError("bilinear_resample expects x[C,H,W]")
    top, left, rh, rw = (float(v) for v in roi)
    eps = 1e-9
    if not (-eps <= top and -eps <= left and rh > 0 and rw > 0
            and top + rh <= 1.0 + eps and left + rw <= 1.0 + eps):
        raise ShapeError(f"roi {roi!r} is not inside the unit square")
    if out_h < 1 or out_w < 1:
        raise ShapeError("output size must be >= 1")
    c, h, w = x.data.shape

    wy = _axis_weights(h, top, rh, out_h)    # (out_h, h)
    wx = _axis_weights(w, left, rw, out_w)   # (out_w, w)
    out = (wy @ x.data) @ wx.T               # broadcast matmul over channels

    def bw(g):
        g = np.asarray(g)
        _accumulate(x, (wy.T @ g) @ wx)

    return _make(out, (x,), bw)


FULL_ROI = (0.0, 0.0, 1.0, 1.0)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss):
    """Reverse sweep from a scalar loss; fills .grad on trainable leaves.

    The taped graph is released afterwards: calling backward twice on the
    same graph is an error by construction.
    """
    if not isinstance(loss, Tensor):
        raise ShapeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.data.shape}")

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)
        if node._parents:
            node._parents = ()
            node._backward_fn = None
            if node is not loss:
                node.grad = None


def assert_finite(t, context=""):
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if not np.all(np.isfinite(data)):
        from .errors import NumericalError
        raise NumericalError(f"non-finite value detected {context}".strip())


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

def finite_difference_grads(func, leaves, h=1e-5):
    """Central finite differences of a scalar func w.r.t. each leaf tensor."""
    grads = []
    for leaf in leaves:
        g = np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = func().item()
            flat[i] = orig - h
            f_minus = func().item()
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * h)
        grads.append(g)
    return grads


def max_relative_error(analytic, numeric, floor=1e-3):
    """max |a-n| / max(|a|, |n|, floor) over all components of all tensors."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def gradcheck(build_loss, leaves, h=1e-5):
    """Compare taped gradients against central differences.

    build_loss() must rebuild the loss from the *current* leaf data each call.
    Returns the max relative error across all leaves.
    """
    for leaf in leaves:
        leaf.zero_grad()
    loss = build_loss()
    backward(loss)
    analytic = [np.zeros_like(l.data) if l.grad is None else l.grad.copy()
                for l in leaves]
    numeric = finite_difference_grads(build_loss, leaves, h=h)
    return max_relative_error(analytic, numeric)

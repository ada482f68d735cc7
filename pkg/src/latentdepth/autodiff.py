"""Reverse-mode autodiff over dense numpy arrays.

Only the operator set the depth networks need: conv2d, batch norm, relu,
add, factor-2 bilinear upsampling, forward-difference spatial gradients,
and scalar reductions. All arithmetic is float64; no broadcasting anywhere,
shape agreement is always explicit.
"""

import numpy as np

DTYPE = np.float64


class ShapeMismatchError(ValueError):
    """Raised when operand shapes disagree (no silent broadcasting)."""


class GraphError(RuntimeError):
    """Misuse of the recorded computation graph."""


_GRAD_ENABLED = True


class no_grad:
    """Context manager disabling graph recording (inference mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._saved = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._saved
        return False


class Tensor:
    """Dense array with an optional gradient slot and a recorded parent op."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn",
                 "_backward_done")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward_fn = None
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def item(self):
        if self.data.shape != ():
            raise ShapeMismatchError("item() on non-scalar tensor of shape %s"
                                     % (self.data.shape,))
        return float(self.data)

    def __repr__(self):
        return "Tensor(shape=%s, requires_grad=%s)" % (self.shape,
                                                       self.requires_grad)


def _result(data, parents, backward_fn):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def check_finite(t, label="tensor"):
    if not np.all(np.isfinite(t.data)):
        raise ValueError("non-finite values in %s" % label)
    return t


def _require_same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeMismatchError("%s: shape %s vs %s" % (op, a.shape, b.shape))


# ---------------------------------------------------------------------------
# elementwise / structural ops

def add(a, b):
    _require_same_shape("add", a, b)

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    return _result(a.data + b.data, (a, b), bwd)


def sub(a, b):
    _require_same_shape("sub", a, b)

    def bwd(g):
        _accum(a, g)
        _accum(b, -g)

    return _result(a.data - b.data, (a, b), bwd)


def scale(a, c):
    c = float(c)

    def bwd(g):
        _accum(a, c * g)

    return _result(a.data * c, (a,), bwd)


def mul_const(a, arr):
    """Elementwise product with a constant array (no gradient to arr)."""
    arr = np.asarray(arr, dtype=DTYPE)
    if arr.shape != a.shape:
        raise ShapeMismatchError("mul_const: shape %s vs %s"
                                 % (a.shape, arr.shape))

    def bwd(g):
        _accum(a, g * arr)

    return _result(a.data * arr, (a,), bwd)


def relu(a):
    mask = a.data > 0  # subgradient at 0 is 0

    def bwd(g):
        _accum(a, g * mask)

    return _result(np.where(mask, a.data, 0.0), (a,), bwd)


# ---------------------------------------------------------------------------
# convolution ("same" zero padding of (k-1)/2, stride 1 or 2)

# patch matrices above this element count switch to the offset-accumulation
# path, which never materializes O(C*K^2*H*W) memory
_IM2COL_LIMIT = 1 << 24

def _im2col(x, kh, kw, stride, ph, pw, oh, ow):
    c = x.shape[0]
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    cols = np.empty((c, kh, kw, oh, ow), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i:i + stride * oh:stride,
                               j:j + stride * ow:stride]
    return cols.reshape(c * kh * kw, oh * ow)


def _col2im(cols, c, h, w, kh, kw, stride, ph, pw, oh, ow):
    cols = cols.reshape(c, kh, kw, oh, ow)
    xp = np.zeros((c, h + 2 * ph, w + 2 * pw), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            xp[:, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                cols[:, i, j]
    return xp[:, ph:ph + h, pw:pw + w]


def conv2d(x, weight, bias, stride=1):
    """2-D convolution of a CxHxW image, output ceil(H/stride) x ceil(W/stride)."""
    if x.data.ndim != 3:
        raise ShapeMismatchError("conv2d: input must be CxHxW, got %s"
                                 % (x.shape,))
    if weight.data.ndim != 4:
        raise ShapeMismatchError("conv2d: weight must be OxIxKhxKw, got %s"
                                 % (weight.shape,))
    cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin_w != cin:
        raise ShapeMismatchError(
            "conv2d: input has %d channels but weight expects %d"
            % (cin, cin_w))
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeMismatchError("conv2d: kernel dims must be odd, got %dx%d"
                                 % (kh, kw))
    if stride not in (1, 2):
        raise ShapeMismatchError("conv2d: stride must be 1 or 2, got %d"
                                 % stride)
    if bias.shape != (cout,):
        raise ShapeMismatchError("conv2d: bias shape %s, expected (%d,)"
                                 % (bias.shape, cout))

    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    oh, ow = -(-h // stride), -(-w // stride)

    if cin * kh * kw * oh * ow <= _IM2COL_LIMIT:
        cols = _im2col(x.data, kh, kw, stride, ph, pw, oh, ow)
        wmat = weight.data.reshape(cout, -1)
        out = (wmat @ cols + bias.data[:, None]).reshape(cout, oh, ow)

        def bwd(g):
            gmat = g.reshape(cout, -1)
            if weight.requires_grad:
                _accum(weight, (gmat @ cols.T).reshape(weight.shape))
            if bias.requires_grad:
                _accum(bias, gmat.sum(axis=1))
            if x.requires_grad:
                dcols = wmat.T @ gmat
                _accum(x, _col2im(dcols, cin, h, w, kh, kw, stride,
                                  ph, pw, oh, ow))

        return _result(out, (x, weight, bias), bwd)

    # large inputs: accumulate per kernel offset instead of materializing
    # the full patch matrix
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw)))
    out = np.empty((cout, oh * ow), dtype=DTYPE)
    out[:] = bias.data[:, None]
    for i in range(kh):
        for j in range(kw):
            sl = xp[:, i:i + stride * oh:stride,
                    j:j + stride * ow:stride].reshape(cin, -1)
            out += weight.data[:, :, i, j] @ sl
    out = out.reshape(cout, oh, ow)

    def bwd_big(g):
        gmat = g.reshape(cout, -1)
        if bias.requires_grad:
            _accum(bias, gmat.sum(axis=1))
        if weight.requires_grad or x.requires_grad:
            dxp = np.zeros_like(xp) if x.requires_grad else None
            dw = np.zeros(weight.shape, dtype=DTYPE) \
                if weight.requires_grad else None
            for i in range(kh):
                for j in range(kw):
                    sl = xp[:, i:i + stride * oh:stride,
                            j:j + stride * ow:stride].reshape(cin, -1)
                    if dw is not None:
                        dw[:, :, i, j] = gmat @ sl.T
                    if dxp is not None:
                        dxp[:, i:i + stride * oh:stride,
                            j:j + stride * ow:stride] += \
                            (weight.data[:, :, i, j].T @ gmat).reshape(
                                cin, oh, ow)
            if dw is not None:
                _accum(weight, dw)
            if dxp is not None:
                _accum(x, dxp[:, ph:ph + h, pw:pw + w])

    return _result(out, (x, weight, bias), bwd_big)


# ---------------------------------------------------------------------------
# batch normalization

def batch_norm2d(x, gamma, beta, running_mean, running_var, eps,
                 training, momentum=0.1, update_stats=True):
    """Per-channel batch norm; x is CxHxW (batch of one) or NxCxHxW.

    Train mode normalizes by batch statistics and, unless update_stats is
    off, updates running_mean / running_var in place; eval mode uses the
    running stats.
    """
    if eps <= 0:
        raise ValueError("batch_norm2d: eps must be positive")
    if x.data.ndim == 3:
        c = x.shape[0]
        axes = (1, 2)
        bshape = (c, 1, 1)
    elif x.data.ndim == 4:
        c = x.shape[1]
        axes = (0, 2, 3)
        bshape = (1, c, 1, 1)
    else:
        raise ShapeMismatchError("batch_norm2d: input must be CxHxW or "
                                 "NxCxHxW, got %s" % (x.shape,))
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatchError("batch_norm2d: gamma/beta must be (%d,)" % c)

    m = x.data.size // c
    if training:
        if m < 2:
            raise ValueError("batch_norm2d: train mode needs at least 2 "
                             "elements per channel, got %d" % m)
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if update_stats:
            running_mean *= (1.0 - momentum)
            running_mean += momentum * mean
            running_var *= (1.0 - momentum)
            running_var += momentum * var
    else:
        mean = np.asarray(running_mean, dtype=DTYPE)
        var = np.asarray(running_var, dtype=DTYPE)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def bwd(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=axes))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=axes))
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(bshape)
            if training:
                s1 = dxhat.sum(axis=axes).reshape(bshape)
                s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
                dx = (inv_std.reshape(bshape) / m) * \
                    (m * dxhat - s1 - xhat * s2)
            else:
                dx = dxhat * inv_std.reshape(bshape)
            _accum(x, dx)

    return _result(out, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# bilinear x2 upsampling (half-pixel-centered sampling)

def _up_indices(n):
    dst = np.arange(2 * n)
    src = np.clip((dst + 0.5) / 2.0 - 0.5, 0.0, n - 1.0)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n - 1)
    frac = src - i0
    return i0, i1, frac


def bilinear_upsample_x2(x):
    if x.data.ndim != 3:
        raise ShapeMismatchError("bilinear_upsample_x2: input must be CxHxW, "
                                 "got %s" % (x.shape,))
    c, h, w = x.shape
    ri0, ri1, rf = _up_indices(h)
    ci0, ci1, cf = _up_indices(w)
    rf_ = rf[None, :, None]
    cf_ = cf[None, None, :]

    rows = x.data[:, ri0, :] * (1.0 - rf_) + x.data[:, ri1, :] * rf_
    out = rows[:, :, ci0] * (1.0 - cf_) + rows[:, :, ci1] * cf_

    def bwd(g):
        if not x.requires_grad:
            return
        # transpose of the interpolation: scatter-add the same weights
        drows = np.zeros((c, 2 * h, w), dtype=DTYPE)
        np.add.at(drows, (slice(None), slice(None), ci0), g * (1.0 - cf_))
        np.add.at(drows, (slice(None), slice(None), ci1), g * cf_)
        dx = np.zeros((c, h, w), dtype=DTYPE)
        np.add.at(dx, (slice(None), ri0), drows * (1.0 - rf_))
        np.add.at(dx, (slice(None), ri1), drows * rf_)
        _accum(x, dx)

    return _result(out, (x,), bwd)


# ---------------------------------------------------------------------------
# spatial forward differences (zero trailing column / row)

def spatial_gradients(x):
    """Forward differences of a CxHxW map; returns (horizontal, vertical)."""
    if x.data.ndim != 3:
        raise ShapeMismatchError("spatial_gradients: input must be CxHxW, "
                                 "got %s" % (x.shape,))
    c, h, w = x.shape
    if h < 2 or w < 2:
        raise ShapeMismatchError("spatial_gradients: need H, W >= 2, got "
                                 "%dx%d" % (h, w))

    hdiff = np.zeros((c, h, w), dtype=DTYPE)
    hdiff[:, :, :-1] = x.data[:, :, 1:] - x.data[:, :, :-1]
    vdiff = np.zeros((c, h, w), dtype=DTYPE)
    vdiff[:, :-1, :] = x.data[:, 1:, :] - x.data[:, :-1, :]

    def bwd_h(g):
        dx = np.zeros((c, h, w), dtype=DTYPE)
        dx[:, :, 1:] += g[:, :, :-1]
        dx[:, :, :-1] -= g[:, :, :-1]
        _accum(x, dx)

    def bwd_v(g):
        dx = np.zeros((c, h, w), dtype=DTYPE)
        dx[:, 1:, :] += g[:, :-1, :]
        dx[:, :-1, :] -= g[:, :-1, :]
        _accum(x, dx)

    return _result(hdiff, (x,), bwd_h), _result(vdiff, (x,), bwd_v)


# ---------------------------------------------------------------------------
# reductions

_REDUCE_KINDS = ("sum", "mean", "l1", "l2sq")


def reduce(x, kind):
    if kind not in _REDUCE_KINDS:
        raise ValueError("reduce: unknown kind %r" % (kind,))
    if x.data.size == 0:
        raise ShapeMismatchError("reduce: empty tensor")

    if kind == "sum":
        val = x.data.sum()

        def bwd(g):
            _accum(x, np.full_like(x.data, g))
    elif kind == "mean":
        n = x.data.size
        val = x.data.sum() / n

        def bwd(g):
            _accum(x, np.full_like(x.data, g / n))
    elif kind == "l1":
        val = np.abs(x.data).sum()
        sign = np.sign(x.data)

        def bwd(g):
            _accum(x, g * sign)
    else:  # l2sq
        val = (x.data * x.data).sum()

        def bwd(g):
            _accum(x, 2.0 * g * x.data)

    return _result(np.asarray(val, dtype=DTYPE), (x,), bwd)


# ---------------------------------------------------------------------------
# backward pass

def backward(out):
    """Populate grads of everything reachable from a scalar output."""
    if out.data.shape != ():
        raise GraphError("backward: output must be scalar, got shape %s"
                         % (out.shape,))
    if out._backward_done:
        raise GraphError("backward: repeated backward on the same graph "
                         "without grad reset")
    out._backward_done = True
    if not out.requires_grad:
        return

    # iterative topological order (graphs can be deep)
    order = []
    seen = set()
    stack = [(out, False)]
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

    out.grad = np.ones((), dtype=DTYPE)
    for node in reversed(order):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


# ---------------------------------------------------------------------------
# finite-difference gradient checker

def finite_diff_check(f, x, eps=1e-6, floor=1e-6):
    """Max relative error between analytic grad of f at x and central
    differences. f maps a Tensor to a scalar Tensor and must be pure."""
    probe = Tensor(x.data.copy(), requires_grad=True)
    backward(f(probe))
    analytic = probe.grad if probe.grad is not None \
        else np.zeros_like(probe.data)

    numeric = np.zeros_like(x.data)
    flat = numeric.reshape(-1)
    base = x.data.copy()
    for i in range(base.size):
        bumped = base.reshape(-1).copy()
        bumped[i] += eps
        hi = f(Tensor(bumped.reshape(base.shape))).item()
        bumped[i] -= 2 * eps
        lo = f(Tensor(bumped.reshape(base.shape))).item()
        flat[i] = (hi - lo) / (2 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))

"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything runs in double precision on numpy arrays. Ops execute eagerly and
record themselves on a tape (each result tensor keeps its parents and a
backward closure), so the recorded graph of any output is immutable once
built and `backward` replays it in reverse topological order.

Shape discipline: binary elementwise ops require equal shapes or a scalar
operand. Anything else goes through an explicit `reshape` / `expand`.
"""

import math

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NumericFault",
    "GraphError",
    "no_grad",
    "finite_checks",
    "constant",
    "parameter",
    "concat",
    "matmul",
    "grid_sample_2d",
    "grid_sample_3d",
    "conv2d",
    "conv3d",
    "topo_order",
]


class ShapeError(ValueError):
    """Operand shapes incompatible for an op; message names both."""


class NumericFault(ArithmeticError):
    """An op produced NaN/Inf, or was fed non-finite data."""


class GraphError(RuntimeError):
    """Autodiff misuse, e.g. backward on a tensor with no recorded graph."""


# Module switches. `no_grad` suppresses tape recording; `finite_checks`
# toggles the per-op NaN/Inf scan (training disables it in the hot loop and
# re-checks loss/gradients explicitly).
_grad_enabled = True
_finite_enabled = True


class no_grad:
    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class finite_checks:
    def __init__(self, enabled):
        self.enabled = enabled

    def __enter__(self):
        global _finite_enabled
        self._prev = _finite_enabled
        _finite_enabled = self.enabled
        return self

    def __exit__(self, *exc):
        global _finite_enabled
        _finite_enabled = self._prev
        return False


def _assert_finite(arr, op):
    if not _finite_enabled:
        return
    # One-pass reduction; fall back to a full scan only when the cheap sum
    # is non-finite (catches the rare finite-values-overflowing-sum case).
    s = float(np.sum(arr))
    if not math.isfinite(s):
        if np.isfinite(arr).all():
            return
        raise NumericFault(f"non-finite values in output of '{op}'")


def _as_array(data):
    arr = np.asarray(data, dtype=np.float64)
    return arr


class Tensor:
    """A float64 array plus the tape entry that produced it."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    # -- construction helpers ------------------------------------------------

    @staticmethod
    def _result(data, op, parents, backward):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.op = op
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- basic introspection ---------------------------------------------------

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
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # -- autodiff ----------------------------------------------------------------

    def backward(self, seed=None):
        """Accumulate gradients of this tensor into every reachable
        requires_grad leaf. `seed` defaults to ones (use 1 for scalar
        losses); its shape must match this tensor."""
        if not self.requires_grad or self._backward is None and not self._parents:
            raise GraphError("backward called on a tensor with no recorded graph")
        if seed is None:
            seed_arr = np.ones_like(self.data)
        else:
            seed_arr = seed.data if isinstance(seed, Tensor) else _as_array(seed)
            if seed_arr.shape != self.data.shape:
                raise ShapeError(
                    f"backward seed shape {seed_arr.shape} does not match output {self.data.shape}"
                )
        order = topo_order(self)
        # Stored gradient arrays may be shared between entries (ops like add
        # hand the same array to several parents), so accumulation always
        # allocates instead of writing in place.
        grads = {id(self): seed_arr.copy()}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is not None:
                parent_grads = node._backward(g)
                for parent, pg in zip(node._parents, parent_grads):
                    if pg is None or not parent.requires_grad:
                        continue
                    acc = grads.get(id(parent))
                    grads[id(parent)] = pg if acc is None else acc + pg
            elif node.requires_grad:
                # leaf: retain the accumulated gradient
                node.grad = g if node.grad is None else node.grad + g

    # -- operator sugar -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return narrow(self, index)

    # method forms used heavily downstream
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(data):
    return Tensor(data)


def parameter(data):
    return Tensor(data, requires_grad=True)


def topo_order(output):
    """Operation records reachable from `output`, inputs before users."""
    order = []
    seen = set()
    stack = [(output, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


# -- elementwise binary ops ----------------------------------------------------


def _binary_shapes(a, b, op):
    if a.data.shape == b.data.shape:
        return
    if a.data.size == 1 or b.data.size == 1:
        return
    raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ (and neither is scalar)")


def _reduce_to(shape, g):
    """Sum a gradient down to `shape` (covers the scalar-operand case)."""
    if g.shape == shape:
        return g
    out = np.sum(g)
    return np.asarray(out, dtype=np.float64).reshape(shape)


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    _binary_shapes(a, b, "add")
    out = a.data + b.data
    _assert_finite(out, "add")

    def backward(g):
        return _reduce_to(a.data.shape, g), _reduce_to(b.data.shape, g)

    return Tensor._result(out, "add", (a, b), backward)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    _binary_shapes(a, b, "sub")
    out = a.data - b.data
    _assert_finite(out, "sub")

    def backward(g):
        return _reduce_to(a.data.shape, g), _reduce_to(b.data.shape, -g)

    return Tensor._result(out, "sub", (a, b), backward)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    _binary_shapes(a, b, "mul")
    out = a.data * b.data
    _assert_finite(out, "mul")

    def backward(g):
        return _reduce_to(a.data.shape, g * b.data), _reduce_to(b.data.shape, g * a.data)

    return Tensor._result(out, "mul", (a, b), backward)


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    _binary_shapes(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    _assert_finite(out, "div")

    def backward(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _reduce_to(a.data.shape, ga), _reduce_to(b.data.shape, gb)

    return Tensor._result(out, "div", (a, b), backward)


def neg(a):
    a = _wrap(a)
    out = -a.data

    def backward(g):
        return (-g,)

    return Tensor._result(out, "neg", (a,), backward)


# -- matmul ---------------------------------------------------------------------


def matmul(a, b):
    """Matrix product with numpy's stacked semantics, restricted to equal
    batch dims or a plain 2-D right operand (the weight-matrix case)."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ, {a.shape} @ {b.shape}")
    out = a.data @ b.data
    _assert_finite(out, "matmul")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            gb = np.tensordot(a.data, g, axes=(tuple(range(a.ndim - 1)), tuple(range(g.ndim - 1))))
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return Tensor._result(out, "matmul", (a, b), backward)


# -- unary math -------------------------------------------------------------------


def exp(a):
    a = _wrap(a)
    out = np.exp(a.data)
    _assert_finite(out, "exp")

    def backward(g):
        return (g * out,)

    return Tensor._result(out, "exp", (a,), backward)


def log(a):
    a = _wrap(a)
    out = np.log(a.data)
    _assert_finite(out, "log")

    def backward(g):
        return (g / a.data,)

    return Tensor._result(out, "log", (a,), backward)


def sqrt(a):
    a = _wrap(a)
    out = np.sqrt(a.data)
    _assert_finite(out, "sqrt")

    def backward(g):
        return (g * (0.5 / out),)

    return Tensor._result(out, "sqrt", (a,), backward)


def absolute(a):
    a = _wrap(a)
    out = np.abs(a.data)

    def backward(g):
        return (g * np.sign(a.data),)

    return Tensor._result(out, "abs", (a,), backward)


def sigmoid(a):
    a = _wrap(a)
    # numerically stable split form
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    _assert_finite(out, "sigmoid")

    def backward(g):
        return (g * out * (1.0 - out),)

    return Tensor._result(out, "sigmoid", (a,), backward)


def elu(a):
    a = _wrap(a)
    x = a.data
    neg_part = np.expm1(np.minimum(x, 0.0))
    out = np.where(x > 0, x, neg_part)
    _assert_finite(out, "elu")

    def backward(g):
        return (g * np.where(x > 0, 1.0, neg_part + 1.0),)

    return Tensor._result(out, "elu", (a,), backward)


def relu(a):
    a = _wrap(a)
    out = np.maximum(a.data, 0.0)

    def backward(g):
        return (g * (a.data > 0),)

    return Tensor._result(out, "relu", (a,), backward)


def clamp(a, lo=None, hi=None):
    a = _wrap(a)
    out = np.clip(a.data, lo, hi)
    inside = np.ones_like(a.data, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi

    def backward(g):
        return (g * inside,)

    return Tensor._result(out, "clamp", (a,), backward)


# -- softmax / layer norm (fused primitives over the last axis) --------------------


def softmax(a):
    a = _wrap(a)
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    _assert_finite(out, "softmax")

    def backward(g):
        dot = np.sum(g * out, axis=-1, keepdims=True)
        return (out * (g - dot),)

    return Tensor._result(out, "softmax", (a,), backward)


def layer_norm(a, eps=1e-6):
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    a = _wrap(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv
    _assert_finite(out, "layer_norm")
    n = x.shape[-1]

    def backward(g):
        # d/dx of (x - mu) * inv with mu, inv functions of x
        gy = g * inv
        mean_g = g.mean(axis=-1, keepdims=True)
        mean_gy_y = np.mean(g * out, axis=-1, keepdims=True)
        return (gy - inv * mean_g - out * inv * mean_gy_y,)

    del n
    return Tensor._result(out, "layer_norm", (a,), backward)


# -- shape ops -----------------------------------------------------------------------


def reshape(a, shape):
    a = _wrap(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as err:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from err

    def backward(g):
        return (g.reshape(a.data.shape),)

    return Tensor._result(out, "reshape", (a,), backward)


def moveaxis(a, src, dst):
    a = _wrap(a)
    out = np.moveaxis(a.data, src, dst)

    def backward(g):
        return (np.moveaxis(g, dst, src),)

    return Tensor._result(out, "moveaxis", (a,), backward)


def swapaxes(a, ax1, ax2):
    a = _wrap(a)
    out = np.swapaxes(a.data, ax1, ax2)

    def backward(g):
        return (np.swapaxes(g, ax1, ax2),)

    return Tensor._result(out, "swapaxes", (a,), backward)


def expand(a, shape):
    """Broadcast size-1 axes of `a` up to `shape` (explicit, no silent rules)."""
    a = _wrap(a)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as err:
        raise ShapeError(f"expand: cannot broadcast {a.shape} to {shape}") from err
    out = np.ascontiguousarray(out)
    a_shape = a.data.shape

    def backward(g):
        extra = g.ndim - len(a_shape)
        axes = tuple(range(extra)) + tuple(
            i + extra for i, d in enumerate(a_shape) if d == 1 and g.shape[i + extra] != 1
        )
        gg = g.sum(axis=axes, keepdims=False) if axes else g
        return (gg.reshape(a_shape),)

    return Tensor._result(out, "expand", (a,), backward)


def concat(tensors, axis=-1):
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        pieces = []
        for i in range(len(tensors)):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(np.ascontiguousarray(g[tuple(idx)]))
        return tuple(pieces)

    return Tensor._result(out, "concat", tuple(tensors), backward)


def narrow(a, index):
    """Basic slicing (slices / ints / ellipsis); gradients scatter back."""
    a = _wrap(a)
    out = a.data[index]
    if np.isscalar(out) or out.ndim == 0:
        out = np.asarray(out, dtype=np.float64)

    def backward(g):
        buf = np.zeros_like(a.data)
        buf[index] = g
        return (buf,)

    return Tensor._result(out, "slice", (a,), backward)


# -- reductions ------------------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims=False):
    a = _wrap(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    out = np.asarray(out, dtype=np.float64)

    def backward(g):
        gg = g
        if not keepdims:
            for ax in sorted(axes):
                gg = np.expand_dims(gg, ax)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return Tensor._result(out, "sum", (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = _wrap(a)
    axes = _norm_axis(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    out = a.data.mean(axis=axes, keepdims=keepdims)
    out = np.asarray(out, dtype=np.float64)

    def backward(g):
        gg = g
        if not keepdims:
            for ax in sorted(axes):
                gg = np.expand_dims(gg, ax)
        return (np.broadcast_to(gg / count, a.data.shape).copy(),)

    return Tensor._result(out, "mean", (a,), backward)


def tvar(a, axis=None, keepdims=False):
    """Biased (1/N) variance."""
    a = _wrap(a)
    axes = _norm_axis(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    mu = a.data.mean(axis=axes, keepdims=True)
    xc = a.data - mu
    out = np.asarray((xc * xc).mean(axis=axes, keepdims=keepdims), dtype=np.float64)

    def backward(g):
        gg = g
        if not keepdims:
            for ax in sorted(axes):
                gg = np.expand_dims(gg, ax)
        return (2.0 / count * xc * np.broadcast_to(gg, a.data.shape),)

    return Tensor._result(out, "var", (a,), backward)


def sorted_sum(a, axis):
    """Sum along `axis` accumulating values in ascending order.

    Bitwise invariant to permutations along the reduced axis, which plain
    np.sum is not; the gradient is the ordinary broadcast of ones.
    """
    a = _wrap(a)
    ax = axis % a.ndim
    s = np.sort(a.data, axis=ax)
    out = np.cumsum(s, axis=ax).take([-1], axis=ax).squeeze(ax)
    out = np.asarray(out, dtype=np.float64)

    def backward(g):
        gg = np.expand_dims(g, ax)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return Tensor._result(out, "sorted_sum", (a,), backward)


def cumprod_exclusive(a):
    """y_j = prod_{k<j} x_k along the last axis (y_0 = 1).

    Backward uses the suffix recurrence S_k = g_{k+1} + x_{k+1} S_{k+1},
    grad_k = y_k S_k, which is exact even with zeros in x.
    """
    a = _wrap(a)
    x = a.data
    m = x.shape[-1]
    y = np.ones_like(x)
    if m > 1:
        np.cumprod(x[..., :-1], axis=-1, out=y[..., 1:])
    _assert_finite(y, "cumprod_exclusive")

    def backward(g):
        grad = np.empty_like(x)
        s = np.zeros(x.shape[:-1], dtype=np.float64)
        for k in range(m - 1, -1, -1):
            grad[..., k] = y[..., k] * s
            if k > 0:
                s = g[..., k] + x[..., k] * s
        return (grad,)

    return Tensor._result(y, "cumprod_exclusive", (a,), backward)


# -- differentiable interpolation -----------------------------------------------------


def grid_sample_2d(grid, uv):
    """Bilinear lookup of `grid` (H, W, C) at continuous pixel coords
    `uv` (..., 2) with (u, v) = (column, row) and the origin at the center
    of the top-left pixel.

    Out-of-bounds coordinates are clamped to the border; the returned
    `valid` mask (numpy bool, same leading shape) records which lookups
    were inside. Gradients flow to both the grid and the coordinates
    (zero where clamped).
    """
    grid = _wrap(grid)
    uv = _wrap(uv)
    if grid.ndim != 3:
        raise ShapeError(f"grid_sample_2d: grid must be (H, W, C), got {grid.shape}")
    if uv.shape[-1] != 2:
        raise ShapeError(f"grid_sample_2d: uv must have trailing dim 2, got {uv.shape}")
    if _finite_enabled and not np.isfinite(uv.data).all():
        raise NumericFault("grid_sample_2d: non-finite coordinates")
    h, w, c = grid.shape
    lead = uv.shape[:-1]
    u = uv.data[..., 0].reshape(-1)
    v = uv.data[..., 1].reshape(-1)
    valid = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    uc = np.clip(u, 0.0, w - 1.0)
    vc = np.clip(v, 0.0, h - 1.0)
    x0 = np.clip(np.floor(uc).astype(np.int64), 0, w - 2) if w > 1 else np.zeros_like(uc, dtype=np.int64)
    y0 = np.clip(np.floor(vc).astype(np.int64), 0, h - 2) if h > 1 else np.zeros_like(vc, dtype=np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (uc - x0)[:, None]
    fy = (vc - y0)[:, None]
    g = grid.data
    g00 = g[y0, x0]
    g01 = g[y0, x1]
    g10 = g[y1, x0]
    g11 = g[y1, x1]
    top = g00 * (1 - fx) + g01 * fx
    bot = g10 * (1 - fx) + g11 * fx
    out = (top * (1 - fy) + bot * fy).reshape(lead + (c,))
    _assert_finite(out, "grid_sample_2d")
    if not (uv.requires_grad and _grad_enabled):
        # drop references the uv-gradient branch would otherwise pin
        g00 = g01 = g10 = g11 = top = bot = None
        in_u = in_v = None
    else:
        # clamped coords are constant w.r.t. uv, so their derivative is 0
        in_u = ((u >= 0) & (u <= w - 1))[:, None]
        in_v = ((v >= 0) & (v <= h - 1))[:, None]

    def backward(gout):
        gflat = gout.reshape(-1, c)
        ggrid = None
        guv = None
        if grid.requires_grad:
            ggrid = np.zeros_like(g)
            w00 = ((1 - fx) * (1 - fy))
            w01 = (fx * (1 - fy))
            w10 = ((1 - fx) * fy)
            w11 = (fx * fy)
            flat = ggrid.reshape(h * w, c)
            np.add.at(flat, y0 * w + x0, gflat * w00)
            np.add.at(flat, y0 * w + x1, gflat * w01)
            np.add.at(flat, y1 * w + x0, gflat * w10)
            np.add.at(flat, y1 * w + x1, gflat * w11)
        if uv.requires_grad:
            dods_u = ((g01 - g00) * (1 - fy) + (g11 - g10) * fy) * in_u
            dods_v = (bot - top) * in_v
            gu = np.sum(gflat * dods_u, axis=-1)
            gv = np.sum(gflat * dods_v, axis=-1)
            guv = np.stack([gu, gv], axis=-1).reshape(uv.data.shape)
        return ggrid, guv

    out_t = Tensor._result(out, "grid_sample_2d", (grid, uv), backward)
    return out_t, valid.reshape(lead)


def grid_sample_3d(volume, xyz):
    """Trilinear lookup of `volume` (K0, K1, K2, C) at normalized coords
    `xyz` (..., 3) in [0, 1]^3 (align-corners: 0 -> first cell, 1 -> last).

    Same clamp-and-flag border policy as grid_sample_2d.
    """
    volume = _wrap(volume)
    xyz = _wrap(xyz)
    if volume.ndim != 4:
        raise ShapeError(f"grid_sample_3d: volume must be (K0, K1, K2, C), got {volume.shape}")
    if xyz.shape[-1] != 3:
        raise ShapeError(f"grid_sample_3d: xyz must have trailing dim 3, got {xyz.shape}")
    if _finite_enabled and not np.isfinite(xyz.data).all():
        raise NumericFault("grid_sample_3d: non-finite coordinates")
    k0, k1, k2, c = volume.shape
    lead = xyz.shape[:-1]
    pts = xyz.data.reshape(-1, 3)
    valid = np.all((pts >= 0.0) & (pts <= 1.0), axis=-1)
    scale = np.array([k0 - 1, k1 - 1, k2 - 1], dtype=np.float64)
    q = np.clip(pts, 0.0, 1.0) * scale
    i0 = np.minimum(np.floor(q).astype(np.int64), np.maximum(scale.astype(np.int64) - 1, 0))
    i1 = np.minimum(i0 + 1, scale.astype(np.int64))
    f = q - i0
    vdat = volume.data
    flat = vdat.reshape(-1, c)

    def lin(a, b, ccc):
        return (a * (k1 * k2) + b * k2 + ccc)

    idx = {}
    corners = {}
    for da in (0, 1):
        for db in (0, 1):
            for dc in (0, 1):
                ia = i1[:, 0] if da else i0[:, 0]
                ib = i1[:, 1] if db else i0[:, 1]
                ic = i1[:, 2] if dc else i0[:, 2]
                key = (da, db, dc)
                idx[key] = lin(ia, ib, ic)
                corners[key] = flat[idx[key]]

    fa = f[:, 0:1]
    fb = f[:, 1:2]
    fc = f[:, 2:3]
    wts = {}
    for da in (0, 1):
        for db in (0, 1):
            for dc in (0, 1):
                wa = fa if da else (1 - fa)
                wb = fb if db else (1 - fb)
                wc = fc if dc else (1 - fc)
                wts[(da, db, dc)] = wa * wb * wc
    out = sum(corners[k] * wts[k] for k in corners).reshape(lead + (c,))
    _assert_finite(out, "grid_sample_3d")
    if not (xyz.requires_grad and _grad_enabled):
        corners = None
        inside = None
    else:
        inside = (pts >= 0.0) & (pts <= 1.0)

    def backward(gout):
        gflat = gout.reshape(-1, c)
        gvol = None
        gxyz = None
        if volume.requires_grad:
            gvol = np.zeros_like(flat)
            for k in wts:
                np.add.at(gvol, idx[k], gflat * wts[k])
            gvol = gvol.reshape(vdat.shape)
        if xyz.requires_grad:
            # derivative of trilinear weights w.r.t. fractional coords
            d = np.zeros_like(pts)
            for axis, (fw, sc) in enumerate(zip((fa, fb, fc), scale)):
                acc = np.zeros_like(gflat[:, 0])
                for key, val in corners.items():
                    sign = 1.0 if key[axis] else -1.0
                    others = 1.0
                    for oax, of in enumerate((fa, fb, fc)):
                        if oax == axis:
                            continue
                        others = others * (of if key[oax] else (1 - of))
                    acc += np.sum(gflat * val * (sign * others), axis=-1)
                d[:, axis] = acc * sc * inside[:, axis]
            gxyz = d.reshape(xyz.data.shape)
        return gvol, gxyz

    out_t = Tensor._result(out, "grid_sample_3d", (volume, xyz), backward)
    return out_t, valid.reshape(lead)


# -- convolutions -------------------------------------------------------------------


def conv2d(x, weight, bias=None, stride=1):
    """2-D convolution, channels-last: x (H, W, Cin), weight (kh, kw, Cin, Cout),
    zero padding chosen so out = ceil(in / stride)."""
    x = _wrap(x)
    weight = _wrap(weight)
    if x.ndim != 3 or weight.ndim != 4:
        raise ShapeError(f"conv2d: x (H,W,C) and weight (kh,kw,Cin,Cout) required, got {x.shape}, {weight.shape}")
    if x.shape[2] != weight.shape[2]:
        raise ShapeError(f"conv2d: channel mismatch {x.shape} vs {weight.shape}")
    kh, kw, cin, cout = weight.shape
    h, w, _ = x.shape
    oh = -(-h // stride)
    ow = -(-w // stride)
    ph = max((oh - 1) * stride + kh - h, 0)
    pw = max((ow - 1) * stride + kw - w, 0)
    pt, pl = ph // 2, pw // 2
    pad = ((pt, ph - pt), (pl, pw - pl), (0, 0))
    xp = np.pad(x.data, pad)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(0, 1))
    win = win[::stride, ::stride]  # (oh, ow, Cin, kh, kw)
    col = win.transpose(0, 1, 3, 4, 2).reshape(oh * ow, kh * kw * cin)
    wmat = weight.data.reshape(kh * kw * cin, cout)
    out = col @ wmat
    if bias is not None:
        bias = _wrap(bias)
        out = out + bias.data
    out = out.reshape(oh, ow, cout)
    _assert_finite(out, "conv2d")
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gmat = g.reshape(oh * ow, cout)
        gx = None
        gw = None
        gb = None
        if weight.requires_grad:
            gw = (col.T @ gmat).reshape(kh, kw, cin, cout)
        if x.requires_grad:
            gcol = gmat @ wmat.T  # (oh*ow, kh*kw*cin)
            gcol = gcol.reshape(oh, ow, kh, kw, cin)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[i : i + oh * stride : stride, j : j + ow * stride : stride] += gcol[:, :, i, j]
            gx = gxp[pt : pt + h, pl : pl + w]
            gx = np.ascontiguousarray(gx)
        if bias is not None and parents[2].requires_grad:
            gb = gmat.sum(axis=0)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return Tensor._result(out, "conv2d", parents, backward)


def conv3d(x, weight, bias=None, stride=1):
    """3-D convolution, channels-last: x (D, H, W, Cin), weight (kd, kh, kw, Cin, Cout)."""
    x = _wrap(x)
    weight = _wrap(weight)
    if x.ndim != 4 or weight.ndim != 5:
        raise ShapeError(f"conv3d: x (D,H,W,C) and weight (kd,kh,kw,Cin,Cout) required, got {x.shape}, {weight.shape}")
    if x.shape[3] != weight.shape[3]:
        raise ShapeError(f"conv3d: channel mismatch {x.shape} vs {weight.shape}")
    kd, kh, kw, cin, cout = weight.shape
    d, h, w, _ = x.shape
    od = -(-d // stride)
    oh = -(-h // stride)
    ow = -(-w // stride)
    pd = max((od - 1) * stride + kd - d, 0)
    ph = max((oh - 1) * stride + kh - h, 0)
    pw = max((ow - 1) * stride + kw - w, 0)
    pf, pt, pl = pd // 2, ph // 2, pw // 2
    pad = ((pf, pd - pf), (pt, ph - pt), (pl, pw - pl), (0, 0))
    xp = np.pad(x.data, pad)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kd, kh, kw), axis=(0, 1, 2))
    win = win[::stride, ::stride, ::stride]  # (od, oh, ow, Cin, kd, kh, kw)
    col = win.transpose(0, 1, 2, 4, 5, 6, 3).reshape(od * oh * ow, kd * kh * kw * cin)
    wmat = weight.data.reshape(kd * kh * kw * cin, cout)
    out = col @ wmat
    if bias is not None:
        bias = _wrap(bias)
        out = out + bias.data
    out = out.reshape(od, oh, ow, cout)
    _assert_finite(out, "conv3d")
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gmat = g.reshape(od * oh * ow, cout)
        gx = None
        gw = None
        gb = None
        if weight.requires_grad:
            gw = (col.T @ gmat).reshape(kd, kh, kw, cin, cout)
        if x.requires_grad:
            gcol = (gmat @ wmat.T).reshape(od, oh, ow, kd, kh, kw, cin)
            gxp = np.zeros_like(xp)
            for i in range(kd):
                for j in range(kh):
                    for k in range(kw):
                        gxp[
                            i : i + od * stride : stride,
                            j : j + oh * stride : stride,
                            k : k + ow * stride : stride,
                        ] += gcol[:, :, :, i, j, k]
            gx = np.ascontiguousarray(gxp[pf : pf + d, pt : pt + h, pl : pl + w])
        if bias is not None and parents[2].requires_grad:
            gb = gmat.sum(axis=0)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return Tensor._result(out, "conv3d", parents, backward)

"""Dense tensor container with reverse-mode automatic differentiation.

Tensors wrap a numpy array (float32 or float64) and record the operations
applied to them; ``backward`` walks the recorded graph in reverse
topological order and accumulates gradients on every leaf that was created
with ``requires_grad=True``.  All operations are pure functions of their
inputs, so replaying a forward pass with identical inputs is bit-identical.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ContractError, NumericError, ShapeError

# Finite stand-in for log(0).  Using a true -inf poisons gradients with NaN
# (inf - inf inside logaddexp); -1e30 behaves identically in log-space
# arithmetic because exp(-1e30 - x) underflows to exactly 0.0.
NEG_INF = -1.0e30

_ALLOWED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Tensor:
    """N-dimensional float array with optional gradient tracking.

    data is a flat row-major numpy buffer viewed with its shape; rank is
    always >= 1 (scalars are stored with shape ``(1,)``).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph plumbing ------------------------------------------------------

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other, self.dtype))

    def __radd__(self, other):
        return add(_coerce(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _coerce(other, self.dtype))

    def __rsub__(self, other):
        return sub(_coerce(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self.dtype))

    def __rmul__(self, other):
        return mul(_coerce(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _coerce(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_coerce(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    # -- method sugar ----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and not isinstance(shape[0], int):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int]):
        return transpose(self, axes)


def _coerce(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _make(data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    if data.ndim == 0:
        data = data.reshape(1)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _check_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.dtype != b.dtype:
        raise ContractError(f"{op}: dtype mismatch {a.dtype.name} vs {b.dtype.name}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (the inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _check_axis(axis: int, ndim: int, op: str) -> None:
    if not 0 <= axis < ndim:
        raise ContractError(f"{op}: axis {axis} out of range for rank {ndim} (negative axes disallowed)")


def backward(loss: Tensor) -> None:
    """Accumulate gradients of ``loss`` onto every reachable gradient leaf.

    Gradients add across multiple uses of a tensor and across repeated
    backward calls; use ``zero_grad`` between optimization steps.
    """
    if loss.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited and parent.requires_grad:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# -- elementwise arithmetic ---------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "add")
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "sub")
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "mul")
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "div")
    out = a.data / b.data

    def bwd(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _make(out, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    out = a.data**p

    def bwd(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make(out, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _make(out, (a,), bwd)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def bwd(g):
        return (g / a.data,)

    return _make(out, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    # exp(-|x|) never overflows; both branches share it.
    z = np.exp(-np.abs(a.data))
    out = np.where(a.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(a.dtype)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)

    def bwd(g):
        return (g * (a.data > 0),)

    return _make(out, (a,), bwd)


def swish(a: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    return mul(a, sigmoid(a))


# -- reductions and shaping ---------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        axes: tuple[int, ...] = tuple(range(a.ndim))
    elif isinstance(axis, int):
        axes = (axis,)
    else:
        axes = tuple(axis)
    for ax in axes:
        _check_axis(ax, a.ndim, "sum")
    out = a.data.sum(axis=axes, keepdims=keepdims)
    keep_shape = tuple(1 if ax in axes else ext for ax, ext in enumerate(a.shape))

    def bwd(g):
        return (np.broadcast_to(g.reshape(keep_shape), a.shape).copy(),)

    return _make(np.asarray(out), (a,), bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    elif isinstance(axis, int):
        n = a.shape[axis]
    else:
        n = 1
        for ax in axis:
            n *= a.shape[ax]
    return mul(sum_(a, axis=axis, keepdims=keepdims), _coerce(1.0 / n, a.dtype))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape) if not isinstance(shape, int) else (shape,)
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), bwd)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ContractError(f"transpose: {axes} is not a permutation of rank {a.ndim}")
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def bwd(g):
        return (g.transpose(inv),)

    return _make(out, (a,), bwd)


def getitem(a: Tensor, key) -> Tensor:
    out = a.data[key]
    if np.isscalar(out) or out.ndim == 0:
        out = np.asarray(out).reshape(1)

        def bwd0(g):
            gx = np.zeros_like(a.data)
            gx[key] = g.reshape(())
            return (gx,)

        return _make(out, (a,), bwd0)

    def bwd(g):
        gx = np.zeros_like(a.data)
        gx[key] = g
        return (gx,)

    return _make(out.copy(), (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    _check_axis(axis, tensors[0].ndim, "concat")
    for t in tensors[1:]:
        _check_same_dtype(tensors[0], t, "concat")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        pieces = []
        sl = [slice(None)] * g.ndim
        for i in range(len(sizes)):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(sl)])
        return tuple(pieces)

    return _make(out, tuple(tensors), bwd)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


def take(a: Tensor, indices) -> Tensor:
    """Select rows along axis 0 with an integer index array (gather)."""
    idx = np.asarray(indices)
    out = a.data[idx]

    def bwd(g):
        gx = np.zeros_like(a.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(out.copy(), (a,), bwd)


def take_along_last(a: Tensor, indices: np.ndarray) -> Tensor:
    """Gather along the last axis: out[..., k] = a[..., indices[..., k]]."""
    idx = np.asarray(indices)
    if idx.shape[:-1] != a.shape[:-1]:
        raise ShapeError(f"take_along_last: leading dims differ: {a.shape} vs index {idx.shape}")
    out = np.take_along_axis(a.data, idx, axis=a.ndim - 1)
    grids = np.indices(idx.shape)[:-1] if idx.ndim > 1 else ()

    def bwd(g):
        gx = np.zeros_like(a.data)
        key = tuple(grids) + (idx,)
        np.add.at(gx, key, g)
        return (gx,)

    return _make(out, (a,), bwd)


# -- stable softmax family ------------------------------------------------------


def _detached_max(a: Tensor, axis: int) -> np.ndarray:
    return np.max(a.data, axis=axis, keepdims=True)


def log_softmax(a: Tensor, axis: int) -> Tensor:
    """Log-probabilities along ``axis``; stable via max subtraction."""
    _check_axis(axis, a.ndim, "log_softmax")
    if np.isnan(a.data).any():
        raise NumericError("log_softmax: NaN in input")
    m = Tensor(_detached_max(a, axis))
    shifted = sub(a, m)
    lse = log(sum_(exp(shifted), axis=axis, keepdims=True))
    return sub(shifted, lse)


def softmax(a: Tensor, axis: int) -> Tensor:
    _check_axis(axis, a.ndim, "softmax")
    m = Tensor(_detached_max(a, axis))
    e = exp(sub(a, m))
    return div(e, sum_(e, axis=axis, keepdims=True))


def logsumexp(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    _check_axis(axis, a.ndim, "logsumexp")
    m_np = _detached_max(a, axis)
    m = Tensor(m_np)
    lse = add(log(sum_(exp(sub(a, m)), axis=axis, keepdims=True)), m)
    if not keepdims:
        lse = reshape(lse, lse.shape[:axis] + lse.shape[axis + 1 :])
    return lse


def logaddexp(a: Tensor, b: Tensor) -> Tensor:
    return logsumexp(stack([a, b], axis=0), axis=0)


# -- normalization and gating -----------------------------------------------


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance over the last axis, then affine."""
    ax = x.ndim - 1
    mu = mean(x, axis=ax, keepdims=True)
    centered = sub(x, mu)
    var = mean(mul(centered, centered), axis=ax, keepdims=True)
    inv = power(add(var, _coerce(eps, x.dtype)), -0.5)
    return add(mul(mul(centered, inv), gain), bias)


def glu(x: Tensor) -> Tensor:
    """Gated linear unit over the last axis: first half * sigmoid(second half)."""
    width = x.shape[-1]
    if width % 2 != 0:
        raise ShapeError(f"glu: last extent must be even, got {width}")
    half = width // 2
    lead = (slice(None),) * (x.ndim - 1)
    a = getitem(x, lead + (slice(0, half),))
    b = getitem(x, lead + (slice(half, width),))
    return mul(a, sigmoid(b))


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: scales kept activations by 1/(1-rate)."""
    if rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype.type) / (1.0 - rate)

    def bwd(g):
        return (g * keep,)

    return _make(x.data * keep, (x,), bwd)


# -- matrix multiplication ------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "matmul")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as err:
        raise ShapeError(f"matmul: batch dims not broadcastable: {a.shape} @ {b.shape}") from err

    def bwd(g):
        ga = np.matmul(g, b.data.swapaxes(-1, -2))
        gb = np.matmul(a.data.swapaxes(-1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bwd)


# -- convolutions and pooling -----------------------------------------------


def conv_output_length(length: int, kernel: int, stride: int, pad: int) -> int:
    """Closed-form output length of a strided cross-correlation."""
    return (length + pad - kernel) // stride + 1


def conv1d(x: Tensor, w: Tensor, stride: int = 1, padding: tuple[int, int] = (0, 0)) -> Tensor:
    """Cross-correlation over the first axis: x [T, Cin], w [K, Cin, Cout]."""
    t_in, c_in = x.shape
    k, c_in2, c_out = w.shape
    if c_in != c_in2:
        raise ShapeError(f"conv1d: channel mismatch: input {x.shape} vs kernel {w.shape}")
    pl, pr = padding
    xp = np.pad(x.data, ((pl, pr), (0, 0)))
    t_pad = t_in + pl + pr
    if k > t_pad:
        raise ShapeError(f"conv1d: kernel {k} larger than padded input {t_pad}")
    t_out = (t_pad - k) // stride + 1
    s0, s1 = xp.strides
    windows = as_strided(xp, shape=(t_out, k, c_in), strides=(stride * s0, s0, s1))
    cols = windows.reshape(t_out, k * c_in)
    out = cols @ w.data.reshape(k * c_in, c_out)

    def bwd(g):
        gw = (cols.T @ g).reshape(k, c_in, c_out)
        gxp = np.zeros_like(xp)
        for kk in range(k):
            gxp[kk : kk + stride * t_out : stride] += g @ w.data[kk].T
        gx = gxp[pl : t_pad - pr] if pr else gxp[pl:]
        return gx.copy(), gw

    return _make(out, (x, w), bwd)


def conv2d(
    x: Tensor,
    w: Tensor,
    stride: tuple[int, int] = (1, 1),
    padding: tuple[int, int] = (0, 0),
) -> Tensor:
    """Batched 2D cross-correlation: x [N, H, W, Cin], w [Kh, Kw, Cin, Cout]."""
    n, h_in, w_in, c_in = x.shape
    kh, kw, c_in2, c_out = w.shape
    if c_in != c_in2:
        raise ShapeError(f"conv2d: channel mismatch: input {x.shape} vs kernel {w.shape}")
    sh, sw = stride
    ph, pw = padding
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    hp, wp = h_in + 2 * ph, w_in + 2 * pw
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {(kh, kw)} larger than padded input {(hp, wp)}")
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    sn, s0, s1, s2 = xp.strides
    windows = as_strided(
        xp,
        shape=(n, ho, wo, kh, kw, c_in),
        strides=(sn, sh * s0, sw * s1, s0, s1, s2),
    )
    cols = windows.reshape(n * ho * wo, kh * kw * c_in)
    out = (cols @ w.data.reshape(kh * kw * c_in, c_out)).reshape(n, ho, wo, c_out)

    def bwd(g):
        gmat = g.reshape(n * ho * wo, c_out)
        gw = (cols.T @ gmat).reshape(kh, kw, c_in, c_out)
        gxp = np.zeros_like(xp)
        for ih in range(kh):
            for iw in range(kw):
                gxp[:, ih : ih + sh * ho : sh, iw : iw + sw * wo : sw, :] += g @ w.data[ih, iw].T
        gx = gxp[:, ph : hp - ph if ph else hp, pw : wp - pw if pw else wp, :]
        return gx.copy(), gw

    return _make(out, (x, w), bwd)


def conv3d(
    x: Tensor,
    w: Tensor,
    stride: tuple[int, int, int] = (1, 1, 1),
    padding: tuple[int, int, int] = (0, 0, 0),
) -> Tensor:
    """3D cross-correlation: x [T, H, W, Cin], w [Kt, Kh, Kw, Cin, Cout]."""
    t_in, h_in, w_in, c_in = x.shape
    kt, kh, kw, c_in2, c_out = w.shape
    if c_in != c_in2:
        raise ShapeError(f"conv3d: channel mismatch: input {x.shape} vs kernel {w.shape}")
    st, sh, sw = stride
    pt, ph, pw = padding
    xp = np.pad(x.data, ((pt, pt), (ph, ph), (pw, pw), (0, 0)))
    tp, hp, wp = t_in + 2 * pt, h_in + 2 * ph, w_in + 2 * pw
    if kt > tp or kh > hp or kw > wp:
        raise ShapeError(f"conv3d: kernel {(kt, kh, kw)} larger than padded input {(tp, hp, wp)}")
    to = (tp - kt) // st + 1
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    s0, s1, s2, s3 = xp.strides
    windows = as_strided(
        xp,
        shape=(to, ho, wo, kt, kh, kw, c_in),
        strides=(st * s0, sh * s1, sw * s2, s0, s1, s2, s3),
    )
    cols = windows.reshape(to * ho * wo, kt * kh * kw * c_in)
    out = (cols @ w.data.reshape(kt * kh * kw * c_in, c_out)).reshape(to, ho, wo, c_out)

    def bwd(g):
        gmat = g.reshape(to * ho * wo, c_out)
        gw = (cols.T @ gmat).reshape(kt, kh, kw, c_in, c_out)
        gxp = np.zeros_like(xp)
        for it in range(kt):
            for ih in range(kh):
                for iw in range(kw):
                    gxp[
                        it : it + st * to : st,
                        ih : ih + sh * ho : sh,
                        iw : iw + sw * wo : sw,
                        :,
                    ] += g @ w.data[it, ih, iw].T
        gx = gxp[
            pt : tp - pt if pt else tp,
            ph : hp - ph if ph else hp,
            pw : wp - pw if pw else wp,
            :,
        ]
        return gx.copy(), gw

    return _make(out, (x, w), bwd)


def depthwise_conv1d(x: Tensor, w: Tensor) -> Tensor:
    """Per-channel temporal convolution with same-padding: x [T, C], w [K, C]."""
    t_in, c = x.shape
    k, c2 = w.shape
    if c != c2:
        raise ShapeError(f"depthwise_conv1d: channel mismatch: input {x.shape} vs kernel {w.shape}")
    if k % 2 == 0:
        raise ShapeError(f"depthwise_conv1d: even kernel {k} has no center under same-padding")
    pad = (k - 1) // 2
    xp = np.pad(x.data, ((pad, pad), (0, 0)))
    s0, s1 = xp.strides
    windows = as_strided(xp, shape=(t_in, k, c), strides=(s0, s0, s1))
    out = np.einsum("tkc,kc->tc", windows, w.data)

    def bwd(g):
        gw = np.einsum("tkc,tc->kc", windows, g)
        gxp = np.zeros_like(xp)
        for kk in range(k):
            gxp[kk : kk + t_in] += g * w.data[kk]
        return gxp[pad : pad + t_in].copy(), gw

    return _make(out, (x, w), bwd)


def maxpool2d(
    x: Tensor,
    kernel: tuple[int, int],
    stride: tuple[int, int],
    padding: tuple[int, int] = (0, 0),
) -> Tensor:
    """Batched 2D max pooling: x [N, H, W, C]."""
    n, h_in, w_in, c = x.shape
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)), constant_values=-np.inf)
    hp, wp = h_in + 2 * ph, w_in + 2 * pw
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    sn, s0, s1, s2 = xp.strides
    windows = as_strided(
        xp,
        shape=(n, ho, wo, kh, kw, c),
        strides=(sn, sh * s0, sw * s1, s0, s1, s2),
    ).reshape(n, ho, wo, kh * kw, c)
    arg = windows.argmax(axis=3)
    out = np.take_along_axis(windows, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]

    grid_n, grid_h, grid_w, grid_c = np.indices((n, ho, wo, c))
    row = grid_h * sh + arg // kw
    col = grid_w * sw + arg % kw

    def bwd(g):
        gxp = np.zeros((n, hp, wp, c), dtype=x.dtype)
        np.add.at(gxp, (grid_n, row, col, grid_c), g)
        return (gxp[:, ph : hp - ph if ph else hp, pw : wp - pw if pw else wp, :].copy(),)

    return _make(out.copy(), (x,), bwd)


def avgpool1d(x: Tensor, kernel: int) -> Tensor:
    """Non-overlapping temporal average pooling; trailing remainder dropped."""
    t_in, c = x.shape
    if kernel > t_in:
        raise ShapeError(f"avgpool1d: kernel {kernel} larger than input length {t_in}")
    t_out = t_in // kernel
    out = x.data[: t_out * kernel].reshape(t_out, kernel, c).mean(axis=1)

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[: t_out * kernel] = np.repeat(g / kernel, kernel, axis=0)
        return (gx,)

    return _make(out, (x,), bwd)

"""Reverse-mode automatic differentiation over dense float64 tensors.

A ``Tensor`` is both the value and its node in the computation graph: it
caches the forward result, holds a gradient accumulator of the same shape,
and carries the closure that propagates gradients to its parents.
``backward`` walks the graph once in reverse topological order.

Every operation validates that the values it stores are finite; a NaN or
Inf anywhere raises ``NonFiniteError`` naming the producing operation.
"""

import numpy as np

from . import kernels


class EngineError(Exception):
    pass


class DimensionError(EngineError):
    """Operand shapes are incompatible."""


class ConfigurationError(EngineError):
    """An operation was set up with invalid fixed settings."""


class ContractError(EngineError):
    """A caller broke an operation's contract (e.g. non-scalar loss)."""


class NonFiniteError(EngineError):
    """An operation produced NaN or Inf."""


def _check_finite(data, op):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by op '{op}'")


class Tensor:
    """Float64 array (row-major) plus its place in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_op", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, _op="leaf", _parents=()):
        data = np.asarray(data, dtype=np.float64)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = np.ascontiguousarray(data) if data.ndim else data
        _check_finite(self.data, _op)
        self.grad = None
        self.requires_grad = requires_grad
        self._op = _op
        self._parents = _parents
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        ``self`` must hold a single value. Each graph node's backward
        closure runs exactly once, in reverse topological order, so
        repeated calls after zeroing reproduce identical gradients.
        """
        if self.data.size != 1:
            raise ContractError(f"backward requires a scalar, got shape {self.data.shape}")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None:
                node._backward_fn()

    # arithmetic sugar
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


def parameter(data):
    """A learnable leaf tensor."""
    return Tensor(data, requires_grad=True, _op="parameter")


def constant(data):
    return Tensor(data, requires_grad=False, _op="constant")


def _lift(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64), _op="constant")


def _accumulate(t, g, op):
    if not t.requires_grad:
        return
    _check_finite(g, op + ".backward")
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g, shape):
    """Sum gradient g down to the given operand shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _make(data, op, parents):
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _op=op, _parents=tuple(parents) if req else ())


# ---------------------------------------------------------------------------
# elementwise and structural primitives
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _lift(a), _lift(b)
    out = _make(a.data + b.data, "add", (a, b))
    if out.requires_grad:
        def _bwd():
            _accumulate(a, _unbroadcast(out.grad, a.data.shape), "add")
            _accumulate(b, _unbroadcast(out.grad, b.data.shape), "add")
        out._backward_fn = _bwd
    return out


def sub(a, b):
    a, b = _lift(a), _lift(b)
    out = _make(a.data - b.data, "sub", (a, b))
    if out.requires_grad:
        def _bwd():
            _accumulate(a, _unbroadcast(out.grad, a.data.shape), "sub")
            _accumulate(b, _unbroadcast(-out.grad, b.data.shape), "sub")
        out._backward_fn = _bwd
    return out


def mul(a, b):
    a, b = _lift(a), _lift(b)
    out = _make(a.data * b.data, "mul", (a, b))
    if out.requires_grad:
        def _bwd():
            if a.requires_grad:
                _accumulate(a, _unbroadcast(out.grad * b.data, a.data.shape), "mul")
            if b.requires_grad:
                _accumulate(b, _unbroadcast(out.grad * a.data, b.data.shape), "mul")
        out._backward_fn = _bwd
    return out


def neg(a):
    a = _lift(a)
    out = _make(-a.data, "neg", (a,))
    if out.requires_grad:
        def _bwd():
            _accumulate(a, -out.grad, "neg")
        out._backward_fn = _bwd
    return out


def matmul(a, b):
    """Matrix product with numpy batching; 1-D operands are promoted."""
    a, b = _lift(a), _lift(b)
    A, B = a.data, b.data
    a_vec = A.ndim == 1
    b_vec = B.ndim == 1
    if a_vec:
        A = A[None, :]
    if b_vec:
        B = B[:, None]
    if A.shape[-1] != B.shape[-2]:
        raise DimensionError(f"matmul inner dims disagree: {a.data.shape} x {b.data.shape}")
    data = A @ B
    if a_vec:
        data = np.squeeze(data, axis=-2)
    if b_vec:
        data = np.squeeze(data, axis=-1)
    out = _make(data, "matmul", (a, b))
    if out.requires_grad:
        def _bwd():
            g = out.grad
            if a_vec:
                g = np.expand_dims(g, axis=-2)
            if b_vec:
                g = np.expand_dims(g, axis=-1)
            if a.requires_grad:
                ga = g @ np.swapaxes(B, -1, -2)
                if a_vec:
                    ga = np.squeeze(ga, axis=-2)
                _accumulate(a, _unbroadcast(ga, a.data.shape), "matmul")
            if b.requires_grad:
                gb = np.swapaxes(A, -1, -2) @ g
                if b_vec:
                    gb = np.squeeze(gb, axis=-1)
                _accumulate(b, _unbroadcast(gb, b.data.shape), "matmul")
        out._backward_fn = _bwd
    return out


def dot(a, b):
    """Inner product along the last axis."""
    return sum_(mul(a, b), axis=-1)


def transpose(a, axes=None):
    a = _lift(a)
    if axes is None:
        axes = list(range(a.data.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = _make(np.transpose(a.data, axes), "transpose", (a,))
    if out.requires_grad:
        def _bwd():
            _accumulate(a, np.transpose(out.grad, inv), "transpose")
        out._backward_fn = _bwd
    return out


def reshape(a, shape):
    a = _lift(a)
    src = a.data.shape
    out = _make(a.data.reshape(shape), "reshape", (a,))
    if out.requires_grad:
        def _bwd():
            _accumulate(a, out.grad.reshape(src), "reshape")
        out._backward_fn = _bwd
    return out


def concat(tensors, axis=-1):
    tensors = [_lift(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    out = _make(data, "concat", tuple(tensors))
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]
        def _bwd():
            for t, piece in zip(tensors, np.split(out.grad, splits, axis=axis)):
                _accumulate(t, piece, "concat")
        out._backward_fn = _bwd
    return out


def narrow(a, axis, start, length):
    """Contiguous slice of ``length`` entries along ``axis``."""
    a = _lift(a)
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = _make(a.data[sl], "narrow", (a,))
    if out.requires_grad:
        def _bwd():
            g = np.zeros_like(a.data)
            g[sl] = out.grad
            _accumulate(a, g, "narrow")
        out._backward_fn = _bwd
    return out


def sum_(a, axis=None, keepdims=False):
    a = _lift(a)
    out = _make(a.data.sum(axis=axis, keepdims=keepdims), "sum", (a,))
    if out.requires_grad:
        def _bwd():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(g, a.data.shape).copy(), "sum")
        out._backward_fn = _bwd
    return out


def mean_(a, axis=None, keepdims=False):
    a = _lift(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def sigmoid(a):
    a = _lift(a)
    x = a.data
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = _make(s, "sigmoid", (a,))
    if out.requires_grad:
        def _bwd():
            _accumulate(a, out.grad * s * (1.0 - s), "sigmoid")
        out._backward_fn = _bwd
    return out


# ---------------------------------------------------------------------------
# normalization, convolution, attention plumbing
# ---------------------------------------------------------------------------

def row_softmax(a, mask=None):
    """Softmax over the last axis; rows are positive and sum to 1.

    ``mask`` is an optional boolean array of the same shape; False entries
    receive weight exactly 0 and pass no gradient.
    """
    a = _lift(a)
    shp = a.data.shape
    x2 = a.data.reshape(-1, shp[-1])
    m2 = None if mask is None else np.broadcast_to(mask, shp).reshape(-1, shp[-1])
    s2 = kernels.softmax_fwd(x2, m2)
    out = _make(s2.reshape(shp), "row_softmax", (a,))
    if out.requires_grad:
        def _bwd():
            g2 = out.grad.reshape(-1, shp[-1])
            _accumulate(a, kernels.softmax_bwd(g2, s2).reshape(shp), "row_softmax")
        out._backward_fn = _bwd
    return out


def layernorm_leakyrelu(x, gain, bias, slope=0.01, eps=1e-5):
    """Per-position normalization over the last axis, affine, then leaky ReLU."""
    x, gain, bias = _lift(x), _lift(gain), _lift(bias)
    c = x.data.shape[-1]
    if gain.data.shape != (c,) or bias.data.shape != (c,):
        raise DimensionError(f"gain/bias must have shape ({c},)")
    shp = x.data.shape
    x2 = x.data.reshape(-1, c)
    out2, xhat, rstd, pos = kernels.layernorm_fwd(x2, gain.data, bias.data, slope, eps)
    out = _make(out2.reshape(shp), "layernorm_leakyrelu", (x, gain, bias))
    if out.requires_grad:
        def _bwd():
            g2 = out.grad.reshape(-1, c)
            dx, dgain, dbias = kernels.layernorm_bwd(g2, xhat, rstd, gain.data, pos, slope)
            _accumulate(x, dx.reshape(shp), "layernorm_leakyrelu")
            _accumulate(gain, dgain, "layernorm_leakyrelu")
            _accumulate(bias, dbias, "layernorm_leakyrelu")
        out._backward_fn = _bwd
    return out


def conv1d_same(x, kernel):
    """Same-length 1-D convolution over the second-to-last axis.

    x is (..., T, C_in), kernel (k, C_out, C_in) with odd k; both ends are
    zero padded by (k-1)/2.
    """
    x, kernel = _lift(x), _lift(kernel)
    k, c_out, c_in = kernel.data.shape
    if k % 2 == 0:
        raise ConfigurationError(f"conv1d_same kernel size must be odd, got {k}")
    if x.data.shape[-1] != c_in:
        raise DimensionError(f"conv input channels {x.data.shape[-1]} != kernel C_in {c_in}")
    shp = x.data.shape
    t_len = shp[-2]
    x3 = x.data.reshape(-1, t_len, c_in)
    half = (k - 1) // 2
    out3 = np.zeros((x3.shape[0], t_len, c_out))
    for tap in range(k):
        # output position t reads input position t + tap - half
        lo = max(0, half - tap)
        hi = min(t_len, t_len + half - tap)
        if lo >= hi:
            continue
        out3[:, lo:hi] += x3[:, lo + tap - half:hi + tap - half] @ kernel.data[tap].T
    out = _make(out3.reshape(shp[:-2] + (t_len, c_out)), "conv1d_same", (x, kernel))
    if out.requires_grad:
        def _bwd():
            g3 = out.grad.reshape(-1, t_len, c_out)
            if x.requires_grad:
                dx = np.zeros_like(x3)
                for tap in range(k):
                    lo = max(0, half - tap)
                    hi = min(t_len, t_len + half - tap)
                    if lo >= hi:
                        continue
                    dx[:, lo + tap - half:hi + tap - half] += g3[:, lo:hi] @ kernel.data[tap]
                _accumulate(x, dx.reshape(shp), "conv1d_same")
            if kernel.requires_grad:
                dk = np.zeros_like(kernel.data)
                for tap in range(k):
                    lo = max(0, half - tap)
                    hi = min(t_len, t_len + half - tap)
                    if lo >= hi:
                        continue
                    dk[tap] = np.einsum("nto,nti->oi", g3[:, lo:hi], x3[:, lo + tap - half:hi + tap - half])
                _accumulate(kernel, dk, "conv1d_same")
        out._backward_fn = _bwd
    return out


def dropout(x, rate, rng, training):
    """Bernoulli drop with inverted scaling in training; identity in eval."""
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must be in [0, 1), got {rate}")
    x = _lift(x)
    if not training or rate == 0.0:
        return x
    keep = 1.0 - rate
    mask = (rng.random(x.data.shape) >= rate) / keep
    out = _make(x.data * mask, "dropout", (x,))
    if out.requires_grad:
        def _bwd():
            _accumulate(x, out.grad * mask, "dropout")
        out._backward_fn = _bwd
    return out


def take_rows(a, idx):
    """Gather rows along axis -2: a (..., K, C), idx (..., M) -> (..., M, C)."""
    a = _lift(a)
    shp = a.data.shape
    n_rows = shp[-2]
    a3 = a.data.reshape(-1, n_rows, shp[-1])
    idx2 = np.ascontiguousarray(idx.reshape(a3.shape[0], -1))
    out3 = a3[np.arange(a3.shape[0])[:, None], idx2]
    out = _make(out3.reshape(shp[:-2] + (idx.shape[-1], shp[-1])), "take_rows", (a,))
    if out.requires_grad:
        def _bwd():
            g3 = out.grad.reshape(out3.shape)
            _accumulate(a, kernels.scatter_rows_add(g3, idx2, n_rows).reshape(shp), "take_rows")
        out._backward_fn = _bwd
    return out


def take_last(a, idx):
    """Gather along the last axis: a (..., K), idx (..., M) -> (..., M)."""
    a = _lift(a)
    shp = a.data.shape
    a2 = a.data.reshape(-1, shp[-1])
    idx2 = np.ascontiguousarray(idx.reshape(a2.shape[0], -1))
    out2 = np.take_along_axis(a2, idx2, axis=1)
    out = _make(out2.reshape(shp[:-1] + (idx.shape[-1],)), "take_last", (a,))
    if out.requires_grad:
        def _bwd():
            g2 = out.grad.reshape(out2.shape)
            _accumulate(a, kernels.scatter_last_add(g2, idx2, shp[-1]).reshape(shp), "take_last")
        out._backward_fn = _bwd
    return out


def topk_indices(scores, k):
    """Indices of the k largest entries along the last axis of a plain array.

    Ties are broken toward the lower index (stable sort on negated scores).
    """
    order = np.argsort(-scores, axis=-1, kind="stable")
    return order[..., :k]


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of integer labels under softmax of logits (..., n)."""
    logits = _lift(logits)
    shp = logits.data.shape
    z2 = logits.data.reshape(-1, shp[-1])
    y = np.asarray(labels).reshape(-1)
    if y.shape[0] != z2.shape[0]:
        raise DimensionError(f"labels {y.shape} do not match logits {shp}")
    zmax = z2.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z2 - zmax).sum(axis=1))
    n = z2.shape[0]
    loss = (lse - z2[np.arange(n), y]).mean()
    out = _make(np.asarray(loss), "softmax_cross_entropy", (logits,))
    if out.requires_grad:
        def _bwd():
            p = np.exp(z2 - zmax)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(n), y] -= 1.0
            _accumulate(logits, (out.grad * p / n).reshape(shp), "softmax_cross_entropy")
        out._backward_fn = _bwd
    return out

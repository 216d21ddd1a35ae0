"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything runs on a single explicit tape: ops record themselves while a
``Tape`` is active, ``backward`` replays it once in reverse, and the tape
is then consumed.  Tensors created outside a tape are plain numpy wrappers,
so evaluation-only code pays no graph overhead.

All data is float64; the CTC recursions and finite-difference checks need
the headroom and desk-scale speed does not suffer.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_active_tape: "Tape | None" = None


class Tape:
    """Ordered record of primitive ops for one forward pass.

    Single-use: one forward, one backward.  A second ``backward`` on the
    same tape raises.  Use as a context manager to activate recording.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        global _active_tape
        if _active_tape is not None:
            raise ContractError("a tape is already recording")
        _active_tape = self
        return self

    def __exit__(self, *exc):
        global _active_tape
        _active_tape = None
        return False


class _Node:
    __slots__ = ("tape", "inputs", "output", "backward_fn")

    def __init__(self, tape, inputs, output, backward_fn):
        self.tape = tape
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tensor:
    """Row-major float64 array, optionally participating in the tape."""

    __slots__ = ("data", "requires_grad", "grad", "tape_node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tape_node: _Node | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; every branch routes through a recorded primitive
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def register(out_data: np.ndarray, inputs, backward_fn) -> Tensor:
    """Wrap ``out_data`` as the output of a primitive op.

    ``backward_fn(grad_out)`` must return per-input gradients (or None for
    inputs that need none), aligned with ``inputs``.  Recording happens only
    when a tape is active and some input requires grad; otherwise this is a
    plain wrapper.  Custom primitives (e.g. the CTC loss) use this hook.
    """
    out = Tensor(out_data)
    if _active_tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = _Node(_active_tape, tuple(inputs), out, backward_fn)
        out.tape_node = node
        _active_tape.nodes.append(node)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` for every requires_grad tensor on the loss's tape.

    Seeds with 1.0, visits each node exactly once in reverse topological
    order, and *accumulates* into pre-existing ``grad`` buffers so per-example
    gradients can be summed across calls.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    node = loss.tape_node
    if node is None:
        raise ContractError("loss is not on the active tape")
    tape = node.tape
    if tape.consumed:
        raise ContractError("tape already consumed by a previous backward")
    tape.consumed = True

    on_tape: dict[int, Tensor] = {}
    for n in tape.nodes:
        for t in (n.output, *n.inputs):
            if t.requires_grad:
                on_tape[id(t)] = t

    # working buffers are separate from .grad so earlier accumulated grads
    # never leak into this tape's propagation
    buf: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    done: dict[int, np.ndarray] = {}
    for n in reversed(tape.nodes):
        g = buf.pop(id(n.output), None)
        if g is None:
            continue  # off the path to the loss; zero-filled below
        done[id(n.output)] = g
        for t, ig in zip(n.inputs, n.backward_fn(g)):
            if ig is None or not t.requires_grad:
                continue
            k = id(t)
            if k in buf:
                buf[k] = buf[k] + ig
            else:
                buf[k] = ig
    done.update(buf)

    for k, t in on_tape.items():
        g = done.get(k)
        if g is None:
            g = np.zeros_like(t.data)
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / broadcasting primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return register(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return register(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return register(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return register(
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    return register(out_data, (a,), lambda g: (g * out_data,))


def log(a: Tensor) -> Tensor:
    return register(np.log(a.data), (a,), lambda g: (g / a.data,))


def sigmoid(a: Tensor) -> Tensor:
    # stable two-sided form
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return register(out_data, (a,), lambda g: (g * out_data * (1.0 - out_data),))


def swish(a: Tensor) -> Tensor:
    return mul(a, sigmoid(a))


# ---------------------------------------------------------------------------
# shape and indexing primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.data.shape} x {b.data.shape}")
    return register(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over a shared leading axis: (B,n,k)@(B,k,m)."""
    if (a.data.ndim != 3 or b.data.ndim != 3
            or a.data.shape[0] != b.data.shape[0]
            or a.data.shape[2] != b.data.shape[1]):
        raise ShapeError(f"bmm shapes incompatible: {a.data.shape} x {b.data.shape}")
    return register(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.swapaxes(1, 2), a.data.swapaxes(1, 2) @ g),
    )


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.data.shape}")
    return register(a.data.T.copy(), (a,), lambda g: (g.T,))


def transpose_axes(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return register(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                    lambda g: (g.transpose(inverse),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    return register(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return register(out_data, tuple(tensors), bwd)


def slice_(a: Tensor, key) -> Tensor:
    out_data = a.data[key]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return register(np.ascontiguousarray(out_data), (a,), bwd)


def take(a: Tensor, idx, axis: int = 0) -> Tensor:
    """Gather along axis 0 with an integer index array (embedding lookup)."""
    if axis != 0:
        raise ShapeError("take supports axis 0 only")
    idx = np.asarray(idx, dtype=np.int64)
    out_data = a.data[idx]

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return register(out_data, (a,), bwd)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, a.data.shape).copy(),)

    return register(out_data, (a,), bwd)


def mean_(a: Tensor) -> Tensor:
    return mul(sum_(a), Tensor(1.0 / a.data.size))


# ---------------------------------------------------------------------------
# fused layers recorded as single primitives
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int) -> Tensor:
    """Max-shifted softmax along ``axis``; rows sum to 1 within 1e-12."""
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.data.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return register(y, (x,), bwd)


def log_softmax(x: Tensor, axis: int) -> Tensor:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"log_softmax axis {axis} invalid for shape {x.data.shape}")
    out_data = log_softmax_np(x.data, axis)
    y = np.exp(out_data)

    def bwd(g):
        return (g - y * g.sum(axis=axis, keepdims=True),)

    return register(out_data, (x,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.data.shape[-1] if x.data.ndim else 0
    if d == 0:
        raise ShapeError("layer_norm over an empty last axis")
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.data.shape}/{beta.data.shape} "
            f"do not match width {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    istd = 1.0 / np.sqrt(var + eps)
    xhat = xc * istd
    out_data = xhat * gamma.data + beta.data

    def bwd(g):
        dxhat = g * gamma.data
        dx = istd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        red = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=red) if red else g * xhat
        dbeta = g.sum(axis=red) if red else g.copy()
        return dx, dgamma, dbeta

    return register(out_data, (x, gamma, beta), bwd)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate is 0."""
    if rate <= 0.0:
        return x
    if rate >= 1.0:
        raise ContractError(f"dropout rate {rate} out of range [0, 1)")
    keep = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    return register(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# convolutions (time axis first, channels last)
# ---------------------------------------------------------------------------

def conv1d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """Valid (no padding) 1-D convolution: (T, Cin) * (k, Cin, Cout) -> (L, Cout)."""
    T, cin = x.data.shape
    k, wcin, cout = w.data.shape
    if wcin != cin:
        raise ShapeError(f"conv1d channel mismatch: input {cin}, kernel {wcin}")
    if T < k:
        raise ShapeError(f"conv1d input too short: {T} frames for kernel {k}")
    L = (T - k) // stride + 1
    out_data = np.tile(b.data, (L, 1))
    for tau in range(k):
        seg = x.data[tau:tau + (L - 1) * stride + 1:stride]
        out_data += seg @ w.data[tau]

    def bwd(g):
        dx = np.zeros_like(x.data)
        dw = np.zeros_like(w.data)
        for tau in range(k):
            sl = slice(tau, tau + (L - 1) * stride + 1, stride)
            dx[sl] += g @ w.data[tau].T
            dw[tau] = x.data[sl].T @ g
        return dx, dw, g.sum(axis=0)

    return register(out_data, (x, w, b), bwd)


def depthwise_conv1d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Per-channel same-padded convolution: (T, C) * (k, C) -> (T, C), k odd."""
    T, c = x.data.shape
    k, wc = w.data.shape
    if wc != c:
        raise ShapeError(f"depthwise channel mismatch: input {c}, kernel {wc}")
    if k % 2 == 0:
        raise ShapeError(f"depthwise kernel must be odd, got {k}")
    p = (k - 1) // 2
    xp = np.zeros((T + 2 * p, c))
    xp[p:p + T] = x.data
    out_data = np.tile(b.data, (T, 1))
    for tau in range(k):
        out_data += xp[tau:tau + T] * w.data[tau]

    def bwd(g):
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(w.data)
        for tau in range(k):
            dxp[tau:tau + T] += g * w.data[tau]
            dw[tau] = (xp[tau:tau + T] * g).sum(axis=0)
        return dxp[p:p + T], dw, g.sum(axis=0)

    return register(out_data, (x, w, b), bwd)


# ---------------------------------------------------------------------------
# helpers and verification oracle
# ---------------------------------------------------------------------------

def log_softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def logsumexp(values) -> float:
    """Max-shifted log-sum-exp; -inf for empty input (CTC DP helper)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return -np.inf
    m = v.max()
    if m == -np.inf:
        return -np.inf
    return float(m + np.log(np.exp(v - m).sum()))


def grad_check(f, inputs, eps: float = 1e-5) -> float:
    """Compare tape gradients of ``f(*inputs)`` against central differences.

    Returns max over elements of |g_fd - g_ad| / max(1, |g_fd|, |g_ad|).
    ``f`` must be a pure function returning a scalar Tensor.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"grad_check eps {eps} out of [1e-7, 1e-3]")
    inputs = [_as_tensor(t) for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = None

    with Tape():
        loss = f(*inputs)
        if loss.data.size != 1:
            raise ContractError("grad_check target must be scalar")
        if loss.tape_node is not None:
            backward(loss)
    ad = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    def eval_scalar():
        out = f(*inputs)
        return float(out.data.reshape(()))

    worst = 0.0
    for t, g_ad in zip(inputs, ad):
        flat = t.data.reshape(-1)
        g_flat = g_ad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = eval_scalar()
            flat[i] = orig - eps
            lo = eval_scalar()
            flat[i] = orig
            g_fd = (hi - lo) / (2.0 * eps)
            if not (np.isfinite(g_fd) and np.isfinite(g_flat[i])):
                raise NumericError("non-finite value in grad_check")
            err = abs(g_fd - g_flat[i]) / max(1.0, abs(g_fd), abs(g_flat[i]))
            worst = max(worst, err)
    return worst

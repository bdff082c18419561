"""Minimal reverse-mode automatic differentiation over float64 arrays.

A :class:`Tape` is activated as a context manager. While it is active every
primitive whose inputs include a tape-registered tensor appends a node
holding its vector-Jacobian product; :meth:`Tape.backward` replays the nodes
in reverse. Without an active tape the primitives just compute values.

There is no implicit broadcasting. Row-wise bias addition and scalar
multiplication are explicit primitives.
"""

import math
import threading
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ShapeError",
    "TapeError",
    "Tensor",
    "Tape",
    "Parameter",
    "active_tape",
    "constant",
    "backward",
    "grad_check",
    "grad_check_detail",
    # primitives
    "add",
    "subtract",
    "multiply",
    "scale",
    "add_bias",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "slice_axis",
    "mean",
    "sum",
    "exp",
    "log",
    "tanh",
    "relu",
    "softplus",
    "sigmoid",
    "log_softmax",
    "logaddexp",
    "logsumexp",
    "conv1d",
    "layer_norm",
    "position_table",
]


class ShapeError(ValueError):
    """Input shapes do not conform to a primitive."""

    def __init__(self, op, *shapes, detail=""):
        shown = " vs ".join(str(tuple(s)) for s in shapes)
        msg = f"{op}: incompatible shapes {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)


class TapeError(RuntimeError):
    pass


class Tensor:
    """Dense float64 array, optionally registered on a tape."""

    __slots__ = ("data", "node", "tape")

    def __init__(self, data, node=None, tape=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.node = node
        self.tape = tape

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def is_valid(self):
        """True when the shape has positive extents and every value is finite."""
        return all(d > 0 for d in self.data.shape) and bool(np.isfinite(self.data).all())

    def numpy(self):
        return self.data

    def __repr__(self):
        where = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{where})"

    # operator sugar for the primitives
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return subtract(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return multiply(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def constant(data):
    return Tensor(data)


@dataclass
class _Node:
    op: str
    inputs: tuple
    vjp: object
    shape: tuple


class Tape:
    """Append-only record of primitive applications."""

    def __init__(self):
        self.nodes = []
        self.gradients = {}
        self._prev = None

    def __enter__(self):
        self._prev = getattr(_state, "tape", None)
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._prev
        self._prev = None
        return False

    def __len__(self):
        return len(self.nodes)

    def watch(self, data):
        """Register ``data`` as a leaf and return its tensor."""
        arr = data.data if isinstance(data, Tensor) else data
        arr = np.asarray(arr, dtype=np.float64)
        return Tensor(arr, self._push("leaf", (), None, arr.shape), self)

    def _push(self, op, inputs, vjp, shape):
        self.nodes.append(_Node(op, inputs, vjp, shape))
        return len(self.nodes) - 1

    def backward(self, root):
        """Populate :attr:`gradients` for every node reachable from ``root``."""
        if not isinstance(root, Tensor) or root.size != 1:
            shape = getattr(root, "shape", None)
            raise TapeError(f"backward root must be a scalar tensor, got shape {shape}")
        if root.tape is not self or root.node is None:
            raise TapeError("backward root was not recorded on this tape")
        grads = [None] * (root.node + 1)
        grads[root.node] = np.ones(root.shape)
        nodes = self.nodes
        for i in range(root.node, -1, -1):
            g = grads[i]
            if g is None:
                continue
            node = nodes[i]
            if node.vjp is None:
                continue
            for j, gj in zip(node.inputs, node.vjp(g)):
                if j is None or gj is None:
                    continue
                if grads[j] is None:
                    grads[j] = gj
                else:
                    grads[j] = grads[j] + gj
        self.gradients = {i: g for i, g in enumerate(grads) if g is not None}
        return self.gradients

    def grad(self, tensor):
        """Gradient for ``tensor`` after :meth:`backward`; zeros if unreachable."""
        if tensor.tape is not self or tensor.node is None:
            raise TapeError("tensor is not recorded on this tape")
        g = self.gradients.get(tensor.node)
        return np.zeros(tensor.shape) if g is None else g


_state = threading.local()


def active_tape():
    return getattr(_state, "tape", None)


def backward(tape, root):
    return tape.backward(root)


def record(op, out, inputs, vjp):
    """Wrap ``out`` as a tensor, recording ``vjp`` if any input is on the tape.

    ``vjp(g)`` returns one gradient (or None) per input, in order.
    """
    tape = active_tape()
    if tape is None:
        return Tensor(out)
    ids = tuple(x.node if x.tape is tape else None for x in inputs)
    if all(i is None for i in ids):
        return Tensor(out)
    return Tensor(out, tape._push(op, ids, vjp, out.shape), tape)


@dataclass
class Parameter:
    name: str
    value: np.ndarray
    trainable: bool = True
    _shape: tuple = field(init=False, repr=False)

    def __post_init__(self):
        self.value = np.array(self.value, dtype=np.float64)
        self._shape = self.value.shape

    @property
    def shape(self):
        return self._shape

    def assign(self, value):
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self._shape:
            raise ShapeError("assign", self._shape, value.shape, detail=self.name)
        self.value = value.copy()


# ---------------------------------------------------------------------------
# elementwise


def _same(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


def add(a, b):
    _same("add", a, b)
    return record("add", a.data + b.data, (a, b), lambda g: (g, g))


def subtract(a, b):
    _same("subtract", a, b)
    return record("subtract", a.data - b.data, (a, b), lambda g: (g, -g))


def multiply(a, b):
    _same("multiply", a, b)
    ad, bd = a.data, b.data
    return record("multiply", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a, s):
    """Multiply by a Python number or by a single-element tensor."""
    if isinstance(s, Tensor):
        if s.size != 1:
            raise ShapeError("scale", a.shape, s.shape, detail="scale factor must have one element")
        ad, sv = a.data, s.data.reshape(-1)[0]
        return record(
            "scale",
            ad * sv,
            (a, s),
            lambda g: (g * sv, np.full(s.shape, np.sum(g * ad))),
        )
    s = float(s)
    return record("scale", a.data * s, (a,), lambda g: (g * s,))


def add_bias(x, b):
    """Add a vector ``b[n]`` to every row of ``x[..., n]``."""
    if b.data.ndim != 1 or x.shape[-1:] != b.shape:
        raise ShapeError("add_bias", x.shape, b.shape)
    lead = x.data.ndim - 1
    return record(
        "add_bias",
        x.data + b.data,
        (x, b),
        lambda g: (g, g.sum(axis=tuple(range(lead))) if lead else g),
    )


def exp(a):
    out = np.exp(a.data)
    return record("exp", out, (a,), lambda g: (g * out,))


def log(a):
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return record("log", out, (a,), lambda g: (g / ad,))


def tanh(a):
    out = np.tanh(a.data)
    return record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a):
    mask = a.data > 0
    return record("relu", a.data * mask, (a,), lambda g: (g * mask,))


def _sigmoid(x):
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a):
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = _sigmoid(x)
    return record("softplus", out, (a,), lambda g: (g * sig,))


def sigmoid(a):
    out = _sigmoid(a.data)
    return record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def logaddexp(a, b):
    _same("logaddexp", a, b)
    out = np.logaddexp(a.data, b.data)
    ad, bd = a.data, b.data
    return record(
        "logaddexp",
        out,
        (a, b),
        lambda g: (g * np.exp(ad - out), g * np.exp(bd - out)),
    )


# ---------------------------------------------------------------------------
# reductions and normalisers


def _axis(op, a, axis):
    nd = a.data.ndim
    if not -nd <= axis < nd:
        raise ShapeError(op, a.shape, detail=f"axis {axis} out of range")
    return axis % nd


def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    if axis is None:
        shape = a.shape
        return record("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, g.reshape(-1)[0]),))
    ax = _axis("sum", a, axis)
    return record(
        "sum",
        a.data.sum(axis=ax),
        (a,),
        lambda g: (np.broadcast_to(np.expand_dims(g, ax), a.shape).copy(),),
    )


def mean(a, axis=None):
    if axis is None:
        n = a.size
        shape = a.shape
        return record("mean", np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, g.reshape(-1)[0] / n),))
    ax = _axis("mean", a, axis)
    n = a.shape[ax]
    return record(
        "mean",
        a.data.mean(axis=ax),
        (a,),
        lambda g: (np.broadcast_to(np.expand_dims(g, ax) / n, a.shape).copy(),),
    )


def log_softmax(a):
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return record(
        "log_softmax",
        out,
        (a,),
        lambda g: (g - soft * g.sum(axis=-1, keepdims=True),),
    )


def logsumexp(a, axis=-1):
    ax = _axis("logsumexp", a, axis)
    x = a.data
    m = x.max(axis=ax, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=ax, keepdims=True))
    weights = np.exp(x - lse)
    return record(
        "logsumexp",
        np.squeeze(lse, axis=ax),
        (a,),
        lambda g: (np.expand_dims(g, ax) * weights,),
    )


def layer_norm(x, gain, bias, eps=1e-5):
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gain.shape, bias.shape)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    lead = tuple(range(xd.ndim - 1))

    def vjp(g):
        gx_hat = g * gd
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return record("layer_norm", xhat * gd + bias.data, (x, gain, bias), vjp)


# ---------------------------------------------------------------------------
# structural


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return record("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a):
    if a.data.ndim != 2:
        raise ShapeError("transpose", a.shape, detail="expects a 2-D tensor")
    return record("transpose", a.data.T.copy(), (a,), lambda g: (g.T.copy(),))


def reshape(a, shape):
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError("reshape", a.shape, shape)
    src = a.shape
    return record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def concat(tensors, axis=-1):
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat", detail="no inputs")
    ref = tensors[0]
    ax = _axis("concat", ref, axis)
    for t in tensors[1:]:
        if t.data.ndim != ref.data.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.data.ndim) if i != ax
        ):
            raise ShapeError("concat", ref.shape, t.shape)
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def vjp(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return record("concat", out, tuple(tensors), vjp)


def slice_axis(a, start, stop, axis=-1):
    """Contiguous slice ``[start, stop)`` along ``axis``."""
    ax = _axis("slice", a, axis)
    n = a.shape[ax]
    if not 0 <= start < stop <= n:
        raise ShapeError("slice", a.shape, detail=f"range [{start}, {stop}) on axis {ax}")
    index = [slice(None)] * a.data.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)
    src = a.shape

    def vjp(g):
        full = np.zeros(src)
        full[index] = g
        return (full,)

    return record("slice", a.data[index].copy(), (a,), vjp)


def conv1d(x, w, b, stride=1):
    """Valid-padding 1-D convolution.

    ``x`` is time-major ``[L, C_in]``, ``w`` is ``[K, C_in, C_out]`` and
    ``b`` is ``[C_out]``. Output length is ``(L - K) // stride + 1``.
    """
    if x.data.ndim != 2 or w.data.ndim != 3 or w.shape[1] != x.shape[1] or b.shape != (w.shape[2],):
        raise ShapeError("conv1d", x.shape, w.shape, b.shape)
    L, c_in = x.shape
    K, _, c_out = w.shape
    if L < K:
        raise ShapeError("conv1d", x.shape, w.shape, detail=f"input length {L} below kernel {K}")
    t_out = (L - K) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(x.data, K, axis=0)[::stride]
    # windows: [T', C_in, K] -> columns ordered (K, C_in) to match w
    cols = np.ascontiguousarray(windows.transpose(0, 2, 1)).reshape(t_out, K * c_in)
    wmat = w.data.reshape(K * c_in, c_out)
    out = cols @ wmat + b.data
    need_x = x.node is not None

    def vjp(g):
        gw = (cols.T @ g).reshape(K, c_in, c_out)
        gb = g.sum(axis=0)
        gx = None
        if need_x:
            gcols = (g @ wmat.T).reshape(t_out, K, c_in)
            gx = np.zeros((L, c_in))
            span = stride * (t_out - 1) + 1
            for k in range(K):
                gx[k : k + span : stride] += gcols[:, k, :]
        return gx, gw, gb

    return record("conv1d", out, (x, w, b), vjp)


def position_table(length, dim):
    """Sinusoidal table: even columns sin, odd columns cos (not differentiable)."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(dim)
    rates = 1.0 / np.power(10000.0, (2 * (i // 2)) / dim)
    angles = pos * rates[None, :]
    table = np.where(i % 2 == 0, np.sin(angles), np.cos(angles))
    return Tensor(table)


# ---------------------------------------------------------------------------
# verification


def grad_check_detail(f, params, eps=1e-5, corrupt=0.0):
    """Per-entry comparison of tape gradients against central differences.

    ``f`` maps ``{name: Tensor}`` to a scalar tensor. Returns
    ``{name: max relative error}`` over trainable parameters, with relative
    error ``|a - n| / max(1, |a|, |n|)``. ``corrupt`` is added to every
    analytic gradient entry (negative-control hook).
    """
    if not 0 < eps <= 1e-3:
        raise ValueError(f"eps must lie in (0, 1e-3], got {eps}")
    params = list(params.values()) if isinstance(params, dict) else list(params)
    values = {p.name: p.value for p in params}

    with Tape() as tape:
        leaves = {name: tape.watch(v) for name, v in values.items()}
        root = f(leaves)
        if not np.isfinite(root.data).all():
            raise FloatingPointError("grad_check: objective is not finite")
        tape.backward(root)
    analytic = {name: tape.grad(t) + corrupt for name, t in leaves.items()}

    def evaluate(name, arr):
        consts = {n: Tensor(v) for n, v in values.items()}
        consts[name] = Tensor(arr)
        val = f(consts).item()
        if not math.isfinite(val):
            raise FloatingPointError(f"grad_check: objective not finite when perturbing {name}")
        return val

    report = {}
    for p in params:
        if not p.trainable:
            continue
        base = p.value
        worst = 0.0
        flat_a = analytic[p.name].reshape(-1)
        for idx in range(base.size):
            plus = base.copy().reshape(-1)
            minus = base.copy().reshape(-1)
            plus[idx] += eps
            minus[idx] -= eps
            num = (evaluate(p.name, plus.reshape(base.shape)) - evaluate(p.name, minus.reshape(base.shape))) / (2 * eps)
            a = flat_a[idx]
            err = abs(a - num) / max(1.0, abs(a), abs(num))
            worst = max(worst, err)
        report[p.name] = worst
    return report


def grad_check(f, params, eps=1e-5):
    """Max relative error between tape gradients and central differences."""
    report = grad_check_detail(f, params, eps)
    return max(report.values(), default=0.0)

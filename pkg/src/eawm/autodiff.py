"""Minimal dense reverse-mode automatic differentiation on top of numpy.

Every value is a float64 ``Tensor``. Operations record their parents and a
backward closure; :func:`backward` walks the resulting graph once in reverse
topological order (the "tape") and accumulates gradients additively.

Broadcasting follows numpy's trailing-dimension alignment. Anything numpy
would reject is reported as :class:`ContractViolation` instead.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

from .errors import ContractViolation, DomainError

__all__ = [
    "Tensor",
    "ComputationTape",
    "DIFFERENTIABLE_OPS",
    "as_tensor",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "pow",
    "exp",
    "log",
    "sigmoid",
    "tanh",
    "silu",
    "clip",
    "matmul",
    "reduce",
    "sum",
    "mean",
    "max",
    "softmax",
    "log_softmax",
    "layer_norm",
    "norm_silu",
    "gru_cell",
    "stop_gradient",
    "reshape",
    "concat",
    "index",
    "backward",
    "no_grad",
    "corrupt_gradient",
    "frozen_stop_gradients",
]

# Names of every op with a backward rule; grad-check covers each exactly once.
DIFFERENTIABLE_OPS = (
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "pow",
    "exp",
    "log",
    "sigmoid",
    "tanh",
    "silu",
    "clip",
    "matmul",
    "sum",
    "mean",
    "max",
    "softmax",
    "log_softmax",
    "layer_norm",
    "norm_silu",
    "gru_cell",
    "stop_gradient",
    "reshape",
    "concat",
    "index",
)

_state = threading.local()


def _grad_enabled():
    return getattr(_state, "enabled", True)


def _corruptions():
    return getattr(_state, "corrupt", None)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values only)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextlib.contextmanager
def corrupt_gradient(op_name, factor=1.5):
    """Test hook: scale every gradient produced by ``op_name``'s backward rule.

    Used as a negative control for the finite-difference suite.
    """
    if op_name not in DIFFERENTIABLE_OPS:
        raise ContractViolation(f"unknown op {op_name!r}")
    prev = _corruptions()
    _state.corrupt = dict(prev or {}, **{op_name: factor})
    try:
        yield
    finally:
        _state.corrupt = prev


@contextlib.contextmanager
def frozen_stop_gradients(values, record):
    """Test hook: with ``record`` append every stop_gradient output to ``values``;
    otherwise replay them in order.

    Finite differences taken under replay differentiate the same surrogate
    objective that backward does, since stopped values stay constant.
    """
    prev = getattr(_state, "frozen", None)
    _state.frozen = (values, "record" if record else [])
    try:
        yield
    finally:
        _state.frozen = prev


class Tensor:
    """A dense float64 array with an optional gradient.

    Leaf tensors created with ``requires_grad=True`` start with a zero
    gradient buffer; intermediate tensors receive one during backward.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64, copy=True) if not isinstance(data, np.ndarray) \
            else np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self._parents = ()
        self._backward = None
        self._op = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def values(self):
        return self.data.ravel()

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __rtruediv__ = lambda self, other: div(other, self)
    __neg__ = lambda self: neg(self)
    __pow__ = lambda self, other: pow(self, other)
    __matmul__ = lambda self, other: matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractViolation(
            f"{op}: shapes {a.shape} and {b.shape} are not trailing-dimension compatible"
        ) from None


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# --- binary elementwise -------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return _make(out, (a, b), bw, "div")


def pow(a, b):
    """``a ** b``; a tensor exponent is differentiated only where ``a > 0``."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "pow")
    ad, bd = a.data, b.data
    out = np.power(ad, bd)

    def bw(g):
        ga = g * bd * np.power(ad, bd - 1.0)
        gb = None
        if b.requires_grad:
            safe = np.where(ad > 0, ad, 1.0)
            gb = _unbroadcast(np.where(ad > 0, g * out * np.log(safe), 0.0), bd.shape)
        return _unbroadcast(ga, ad.shape), gb

    return _make(out, (a, b), bw, "pow")


# --- unary elementwise --------------------------------------------------------


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log requires strictly positive input")
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def _sigmoid_np(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid_np(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def silu(a):
    a = as_tensor(a)
    x = a.data
    s = _sigmoid_np(x)
    return _make(x * s, (a,), lambda g: (g * s * (1.0 + x * (1.0 - s)),), "silu")


def clip(a, lo, hi):
    """Clamp to ``[lo, hi]``; the gradient is zero outside the interval."""
    a = as_tensor(a)
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _make(np.clip(x, lo, hi), (a,), lambda g: (g * inside,), "clip")


_UNARY = {"exp": exp, "log": log, "sigmoid": sigmoid, "tanh": tanh, "silu": silu, "neg": neg}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div, "pow": pow}


def elementwise(op_kind, a, b=None, lo=None, hi=None):
    """Dispatch an elementwise op by name (``clip`` takes ``lo``/``hi``)."""
    if op_kind in _UNARY:
        return _UNARY[op_kind](a)
    if op_kind in _BINARY:
        if b is None:
            raise ContractViolation(f"{op_kind} needs two operands")
        return _BINARY[op_kind](a, b)
    if op_kind == "clip":
        return clip(a, lo, hi)
    raise ContractViolation(f"unknown elementwise op {op_kind!r}")


# --- linear algebra -----------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractViolation(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return _make(ad @ bd, (a, b), bw, "matmul")


# --- reductions ---------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, (int, np.integer)) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ContractViolation(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ContractViolation(f"repeated axis in {axis}")
    return tuple(sorted(out))


def _expand(g, shape, axes, keepdims):
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def reduce(op_kind, a, axis=None, keepdims=False):
    """``sum``, ``mean`` or ``max`` over ``axis``.

    ``max`` routes the whole gradient to the lowest flat index among ties.
    """
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    x = a.data
    shape = x.shape
    if op_kind == "sum":
        return _make(x.sum(axis=axes, keepdims=keepdims), (a,),
                     lambda g: (_expand(g, shape, axes, keepdims).copy(),), "sum")
    if op_kind == "mean":
        count = int(np.prod([shape[i] for i in axes])) if axes else 1
        return _make(x.mean(axis=axes, keepdims=keepdims), (a,),
                     lambda g: (_expand(g, shape, axes, keepdims) / count,), "mean")
    if op_kind == "max":
        if x.size == 0:
            raise ContractViolation("max of empty tensor")
        keep = [i for i in range(x.ndim) if i not in axes]
        moved = np.transpose(x, keep + list(axes))
        flat = moved.reshape(moved.shape[: len(keep)] + (-1,))
        arg = np.argmax(flat, axis=-1)  # argmax returns the first maximal index
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        if keepdims:
            out = np.expand_dims(out, axes)

        def bw(g):
            gk = g if not keepdims else np.squeeze(g, axis=axes)
            gflat = np.zeros_like(flat)
            np.put_along_axis(gflat, arg[..., None], gk[..., None], axis=-1)
            gm = gflat.reshape(moved.shape)
            return (np.transpose(gm, np.argsort(keep + list(axes))),)

        return _make(np.asarray(out, dtype=np.float64), (a,), bw, "max")
    raise ContractViolation(f"unknown reduction {op_kind!r}")


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    return reduce("sum", a, axis, keepdims)


def mean(a, axis=None, keepdims=False):
    return reduce("mean", a, axis, keepdims)


def max(a, axis=None, keepdims=False):  # noqa: A001
    return reduce("max", a, axis, keepdims)


# --- normalisation ------------------------------------------------------------


def _check_axis(a, axis):
    if not -a.ndim <= axis < a.ndim:
        raise ContractViolation(f"axis {axis} out of range for {a.ndim}-d tensor")


def softmax(a, axis=-1):
    a = as_tensor(a)
    _check_axis(a, axis)
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    _check_axis(a, axis)
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bw, "log_softmax")


def layer_norm(a, axis=-1, eps=1e-5):
    """Normalise to zero mean / unit variance along ``axis`` (no affine part)."""
    if eps <= 0:
        raise ContractViolation("layer_norm eps must be positive")
    a = as_tensor(a)
    _check_axis(a, axis)
    x = a.data
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=axis, keepdims=True)
        gx = (g * xhat).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make(xhat, (a,), bw, "layer_norm")


# --- fused layers -------------------------------------------------------------
# Same maths as the composed ops; one tape node instead of five to twenty.


def _ln_forward(a, eps):
    mu = a.mean(axis=-1, keepdims=True)
    xc = a - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    return xc * inv, inv


def _ln_backward(g, xhat, inv):
    gm = g.mean(axis=-1, keepdims=True)
    gx = (g * xhat).mean(axis=-1, keepdims=True)
    return inv * (g - gm - xhat * gx)


def _check_layer(x, w, scale, shift, n_out, op):
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ContractViolation(f"{op}: input {x.shape} does not match weight {w.shape}")
    if scale.shape != (n_out,) or shift.shape != (n_out,):
        raise ContractViolation(f"{op}: scale/shift must have shape ({n_out},)")


def norm_silu(x, w, scale, shift, eps=1e-3):
    """``silu(layer_norm(x @ w) * scale + shift)`` for a batch ``x`` of shape ``(N, n_in)``."""
    x, w, scale, shift = (as_tensor(t) for t in (x, w, scale, shift))
    _check_layer(x, w, scale, shift, w.shape[1], "norm_silu")
    xd, wd, sd = x.data, w.data, scale.data
    xhat, inv = _ln_forward(xd @ wd, eps)
    u = xhat * sd + shift.data
    s = _sigmoid_np(u)
    out = u * s

    def bw(g):
        gu = g * (s + u * s * (1.0 - s))
        ga = _ln_backward(gu * sd, xhat, inv)
        return ga @ wd.T, xd.T @ ga, (gu * xhat).sum(axis=0), gu.sum(axis=0)

    return _make(out, (x, w, scale, shift), bw, "norm_silu")


def gru_cell(x, h, w, scale, shift, eps=1e-3):
    """Layer-normalised GRU update of ``h`` (N, n) from input ``x`` (N, m).

    ``[r, c, u] = layer_norm([h, x] @ w) * scale + shift``; the new state is
    ``sigmoid(u - 1) * tanh(sigmoid(r) * c) + (1 - sigmoid(u - 1)) * h``.
    """
    x, h, w, scale, shift = (as_tensor(t) for t in (x, h, w, scale, shift))
    if h.ndim != 2 or x.ndim != 2 or x.shape[0] != h.shape[0]:
        raise ContractViolation(f"gru_cell: input {x.shape} and state {h.shape} disagree")
    n = h.shape[1]
    if w.shape != (n + x.shape[1], 3 * n):
        raise ContractViolation(f"gru_cell: weight {w.shape} does not match ({n + x.shape[1]}, {3 * n})")
    if scale.shape != (3 * n,) or shift.shape != (3 * n,):
        raise ContractViolation(f"gru_cell: scale/shift must have shape ({3 * n},)")
    hd, wd, sd = h.data, w.data, scale.data
    cat = np.concatenate([hd, x.data], axis=-1)
    xhat, inv = _ln_forward(cat @ wd, eps)
    p = xhat * sd + shift.data
    r = _sigmoid_np(p[:, :n])
    c = np.tanh(r * p[:, n:2 * n])
    u = _sigmoid_np(p[:, 2 * n:] - 1.0)
    out = u * c + (1.0 - u) * hd

    def bw(g):
        gc = g * u * (1.0 - c * c)
        gp = np.concatenate([gc * p[:, n:2 * n] * r * (1.0 - r), gc * r,
                             g * (c - hd) * u * (1.0 - u)], axis=-1)
        ga = _ln_backward(gp * sd, xhat, inv)
        gcat = ga @ wd.T
        return (gcat[:, n:], gcat[:, :n] + g * (1.0 - u), cat.T @ ga,
                (gp * xhat).sum(axis=0), gp.sum(axis=0))

    return _make(out, (x, h, w, scale, shift), bw, "gru_cell")


# --- structural ---------------------------------------------------------------


def stop_gradient(a):
    """Identity forward; contributes no gradient to ``a``."""
    a = as_tensor(a)
    out = Tensor.__new__(Tensor)
    out.data = a.data
    frozen = getattr(_state, "frozen", None)
    if frozen is not None:
        values, mode = frozen
        if mode == "record":
            values.append(a.data.copy())
        else:
            out.data = values[len(mode)]
            mode.append(None)
    out.requires_grad = False
    out.grad = None
    out._parents = ()
    out._backward = None
    out._op = "stop_gradient"
    out.name = None
    return out


def reshape(a, shape):
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ContractViolation(f"cannot reshape {a.shape} to {shape}") from None
    src = a.shape
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractViolation("concat of nothing")
    ndim = tensors[0].ndim
    for t in tensors:
        if t.ndim != ndim:
            raise ContractViolation("concat: rank mismatch")
    ax = axis % ndim
    try:
        out = np.concatenate([t.data for t in tensors], axis=ax)
    except ValueError as exc:
        raise ContractViolation(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(out, tuple(tensors), bw, "concat")


def index(a, key):
    """Basic (slice / integer) indexing."""
    a = as_tensor(a)
    try:
        out = a.data[key]
    except IndexError as exc:
        raise ContractViolation(str(exc)) from None
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, key, g)
        return (full,)

    return _make(np.array(out, dtype=np.float64), (a,), bw, "index")


# --- backward -----------------------------------------------------------------


class ComputationTape:
    """Ordered record of the nodes reachable from a root, in topological order.

    Each node appears exactly once; iterating in reverse gives a valid
    backward schedule.
    """

    def __init__(self, root):
        self.nodes = self._topo(root)

    @staticmethod
    def _topo(root):
        order, seen = [], set()
        stack = [(root, False)]
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
        return order

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss):
    """Accumulate d(loss)/d(node) into ``.grad`` of every node that requires it."""
    loss = as_tensor(loss)
    if loss.size != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = ComputationTape(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    corrupt = _corruptions()
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        if corrupt and node._op in corrupt:
            parent_grads = tuple(None if pg is None else pg * corrupt[node._op]
                                 for pg in parent_grads)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg

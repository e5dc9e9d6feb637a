"""Dense tensors and a reverse-mode automatic differentiation tape

Every operation is a registered op kind with a forward rule and a vector-Jacobian product. Operations are
recorded on the innermost active :class:`Tape` whenever one of their inputs is tracked (a trainable leaf or
the output of an op already recorded on that tape). Values are identical with and without a tape.
"""
import threading
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

__all__ = ["Tensor", "Tape", "ShapeError", "forward_op", "backward", "register_op", "checked_mode",
           "is_checked", "add", "sub", "mul", "scale", "shift", "square", "matmul", "transpose", "reshape",
           "flatten", "row_scale", "relu", "tanh", "sigmoid", "batchnorm", "mean_pool", "conv2d",
           "softmax_cross_entropy", "reduce_sum", "reduce_mean", "astype"]


DEFAULT_DTYPE = np.float32

_state = threading.local()
_OPS = {}


class ShapeError(ValueError):
    """Raised when the shapes of the inputs of an op do not conform"""


def is_checked():
    """Whether checked mode (finiteness checks on construction) is enabled in this thread"""
    return getattr(_state, "checked", False)


@contextmanager
def checked_mode(enabled=True):
    """Context manager that enables checked mode for the current thread

    In checked mode every :class:`Tensor` verifies on construction that its values are finite.
    """
    previous = is_checked()
    _state.checked = enabled
    try:
        yield
    finally:
        _state.checked = previous


def _tape_stack():
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def current_tape():
    """The innermost active tape of this thread, or None"""
    stack = _tape_stack()
    return stack[-1] if len(stack) > 0 else None


class Tensor():
    def __init__(self, data, trainable=False, name=None, dtype=None):
        """A dense n-dimensional array of reals that can take part in automatic differentiation

        Parameters
        ----------
        data : array_like
            Values of the tensor (row-major)
        trainable : `bool`, optional
            Whether this is a leaf for which :func:`backward` should return a gradient, by default False
        name : `str`, optional
            A label for the tensor, by default None
        dtype : :class:`numpy.dtype`, optional
            Storage type, by default float32
        """
        self.data = np.asarray(data, dtype=DEFAULT_DTYPE if dtype is None else dtype)
        if is_checked() and not np.all(np.isfinite(self.data)):
            raise ValueError(f"Tensor '{name}' of shape {self.data.shape} contains non-finite values")
        self.trainable = trainable
        self.name = name
        self._tape = None

    def __repr__(self):
        label = "" if self.name is None else f" '{self.name}'"
        return f"<{self.__class__.__name__}{label}: shape {self.shape}, {self.dtype}>"

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

    def numpy(self):
        """The underlying array"""
        return self.data

    def item(self):
        """The value of a single-element tensor as a python float"""
        return float(self.data.reshape(-1)[0])

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
        return scale(self, -1.0)

    def __truediv__(self, other):
        assert np.isscalar(other), "Tensors can only be divided by scalars"
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self, (1, 0))

    def sum(self, axis=None):
        return reduce_sum(self, axis=axis)

    def mean(self):
        return reduce_mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and not np.isscalar(shape[0]):
            shape = tuple(shape[0])
        return reshape(self, shape)


class _Node():
    __slots__ = ("kind", "inputs", "ctx", "output")

    def __init__(self, kind, inputs, ctx, output):
        self.kind = kind
        self.inputs = inputs
        self.ctx = ctx
        self.output = output


class Tape():
    def __init__(self):
        """An append-only record of operations for reverse-mode differentiation

        Use as a context manager; ops executed inside the ``with`` block are recorded when they touch a
        trainable leaf. A tape can be differentiated exactly once.
        """
        self.nodes = []
        self.leaves = {}
        self.finished = False

    def __repr__(self):
        return f"<{self.__class__.__name__}: {len(self.nodes)} nodes, {len(self.leaves)} leaves>"

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        assert stack[-1] is self, "Tapes must be exited in the reverse order they were entered"
        stack.pop()
        return False

    def tracks(self, tensor):
        """Whether gradients should flow into ``tensor`` on this tape"""
        return tensor.trainable or tensor._tape is self

    def record(self, kind, inputs, ctx, output):
        for t in inputs:
            if t.trainable:
                self.leaves[id(t)] = t
        output._tape = self
        self.nodes.append(_Node(kind, inputs, ctx, output))


def register_op(kind):
    """Class decorator registering an op under ``kind``

    The class must provide ``forward(arrays, attrs) -> (out, ctx)`` and
    ``backward(ctx, grad, needs) -> sequence of input gradients``.
    """
    def wrap(cls):
        _OPS[kind] = cls()
        return cls
    return wrap


def forward_op(kind, inputs, attrs=None):
    """Evaluate an op and record it on the active tape if any of its inputs are tracked

    Parameters
    ----------
    kind : `str`
        Name of a registered op (e.g. "matmul", "conv2d", "svt")
    inputs : `list` of :class:`Tensor`
        Inputs of the op
    attrs : `dict`, optional
        Non-differentiable attributes of the op (stride, labels, ...), by default None

    Returns
    -------
    result : :class:`Tensor`
        Output of the op
    """
    if kind not in _OPS:
        raise ValueError(f"Unknown op kind '{kind}'")
    op = _OPS[kind]
    attrs = {} if attrs is None else dict(attrs)
    out, ctx = op.forward([t.data for t in inputs], attrs)
    dtype = attrs["dtype"] if kind == "astype" else np.result_type(*[t.dtype for t in inputs])
    result = Tensor(np.asarray(out, dtype=dtype), dtype=dtype)

    tape = current_tape()
    if tape is not None and any(tape.tracks(t) for t in inputs):
        tape.record(kind, list(inputs), ctx, result)
    return result


def backward(tape, loss):
    """Run the reverse pass of a tape

    Parameters
    ----------
    tape : :class:`Tape`
        Tape on which ``loss`` was computed
    loss : :class:`Tensor`
        Scalar output recorded on ``tape``

    Returns
    -------
    grads : `dict`
        Mapping from every trainable leaf used on the tape to its gradient (a :class:`Tensor`). Frozen
        tensors never appear.
    """
    if tape.finished:
        raise RuntimeError("backward has already been run on this tape")
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is not tape:
        raise RuntimeError("The loss was not recorded on this tape (does it depend on a trainable tensor?)")
    tape.finished = True

    grads = {id(loss): np.ones(loss.shape, dtype=np.float64)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        needs = [tape.tracks(t) for t in node.inputs]
        input_grads = _OPS[node.kind].backward(node.ctx, g, needs)
        for t, need, gi in zip(node.inputs, needs, input_grads):
            if not need or gi is None:
                continue
            # fan-out accumulates
            grads[id(t)] = gi if id(t) not in grads else grads[id(t)] + gi

    return {leaf: Tensor(grads.get(id(leaf), np.zeros(leaf.shape)), dtype=leaf.dtype,
                         name=None if leaf.name is None else f"grad/{leaf.name}")
            for leaf in tape.leaves.values()}


def _lift(value, like):
    """Turn python scalars and arrays into constant tensors matching the dtype of ``like``"""
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=like.dtype)


def _pair(value):
    return (int(value), int(value)) if np.isscalar(value) else tuple(int(v) for v in value)


def _unbroadcast(grad, shape):
    """Sum a gradient down to the shape of a broadcast input"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(kind, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} cannot be broadcast together") from None


@register_op("add")
class _Add():
    def forward(self, arrays, attrs):
        a, b = arrays
        _broadcast_check("add", a, b)
        return a + b, (a.shape, b.shape)

    def backward(self, ctx, g, needs):
        return _unbroadcast(g, ctx[0]), _unbroadcast(g, ctx[1])


@register_op("sub")
class _Sub():
    def forward(self, arrays, attrs):
        a, b = arrays
        _broadcast_check("sub", a, b)
        return a - b, (a.shape, b.shape)

    def backward(self, ctx, g, needs):
        return _unbroadcast(g, ctx[0]), -_unbroadcast(g, ctx[1])


@register_op("mul")
class _Mul():
    def forward(self, arrays, attrs):
        a, b = arrays
        _broadcast_check("mul", a, b)
        return a * b, (a, b)

    def backward(self, ctx, g, needs):
        a, b = ctx
        return (_unbroadcast(g * b, a.shape) if needs[0] else None,
                _unbroadcast(g * a, b.shape) if needs[1] else None)


@register_op("scale")
class _Scale():
    def forward(self, arrays, attrs):
        return arrays[0] * attrs["factor"], attrs["factor"]

    def backward(self, ctx, g, needs):
        return (g * ctx,)


@register_op("shift")
class _Shift():
    def forward(self, arrays, attrs):
        return arrays[0] + attrs["value"], None

    def backward(self, ctx, g, needs):
        return (g,)


@register_op("square")
class _Square():
    def forward(self, arrays, attrs):
        return arrays[0] ** 2, arrays[0]

    def backward(self, ctx, g, needs):
        return (2.0 * ctx * g,)


@register_op("matmul")
class _Matmul():
    def forward(self, arrays, attrs):
        a, b = arrays
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
        a, b = a.astype(np.float64), b.astype(np.float64)
        return a @ b, (a, b)

    def backward(self, ctx, g, needs):
        a, b = ctx
        return (g @ b.T if needs[0] else None,
                a.T @ g if needs[1] else None)


@register_op("transpose")
class _Transpose():
    def forward(self, arrays, attrs):
        axes = tuple(attrs["axes"])
        if sorted(axes) != list(range(arrays[0].ndim)):
            raise ShapeError(f"transpose: axes {axes} invalid for shape {arrays[0].shape}")
        return np.transpose(arrays[0], axes), np.argsort(axes)

    def backward(self, ctx, g, needs):
        return (np.transpose(g, ctx),)


@register_op("reshape")
class _Reshape():
    def forward(self, arrays, attrs):
        x = arrays[0]
        try:
            out = np.reshape(x, attrs["shape"])
        except ValueError:
            raise ShapeError(f"reshape: cannot reshape {x.shape} into {tuple(attrs['shape'])}") from None
        return out, x.shape

    def backward(self, ctx, g, needs):
        return (np.reshape(g, ctx),)


@register_op("row_scale")
class _RowScale():
    """Left multiplication by a diagonal matrix whose entries are each repeated ``repeats`` times"""
    def forward(self, arrays, attrs):
        x, d = arrays
        repeats = attrs.get("repeats", 1)
        if x.ndim != 2 or d.ndim != 1 or x.shape[0] != d.shape[0] * repeats:
            raise ShapeError(f"row_scale: diagonal of length {d.shape} (x{repeats}) does not match "
                             f"matrix of shape {x.shape}")
        d_rep = np.repeat(d, repeats)
        return x * d_rep[:, None], (x, d_rep, repeats)

    def backward(self, ctx, g, needs):
        x, d_rep, repeats = ctx
        gx = g * d_rep[:, None] if needs[0] else None
        gd = (g * x).sum(axis=1).reshape(-1, repeats).sum(axis=1) if needs[1] else None
        return gx, gd


@register_op("relu")
class _Relu():
    def forward(self, arrays, attrs):
        mask = arrays[0] > 0
        return np.where(mask, arrays[0], 0), mask

    def backward(self, ctx, g, needs):
        return (g * ctx,)


@register_op("tanh")
class _Tanh():
    def forward(self, arrays, attrs):
        y = np.tanh(arrays[0])
        return y, y

    def backward(self, ctx, g, needs):
        return (g * (1.0 - ctx.astype(np.float64) ** 2),)


@register_op("sigmoid")
class _Sigmoid():
    """1 / (1 + exp(-mu * (x - center)))"""
    def forward(self, arrays, attrs):
        mu, center = attrs.get("mu", 1.0), attrs.get("center", 0.0)
        y = expit(mu * (arrays[0].astype(np.float64) - center))
        return y, (y, mu)

    def backward(self, ctx, g, needs):
        y, mu = ctx
        return (g * mu * y * (1.0 - y),)


@register_op("batchnorm")
class _BatchNorm():
    """Inference-mode batch normalisation using stored statistics"""
    def forward(self, arrays, attrs):
        x, gamma, beta = arrays
        if x.ndim < 2 or x.shape[1] != gamma.shape[0] or gamma.shape != beta.shape:
            raise ShapeError(f"batchnorm: input {x.shape} incompatible with parameters {gamma.shape}")
        bshape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
        inv_std = 1.0 / np.sqrt(np.asarray(attrs["var"], dtype=np.float64) + attrs.get("eps", 1e-5))
        xhat = (x.astype(np.float64) - np.reshape(attrs["mean"], bshape)) * np.reshape(inv_std, bshape)
        out = xhat * np.reshape(gamma, bshape) + np.reshape(beta, bshape)
        return out, (xhat, gamma, inv_std, bshape)

    def backward(self, ctx, g, needs):
        xhat, gamma, inv_std, bshape = ctx
        axes = tuple(i for i in range(g.ndim) if i != 1)
        gx = g * np.reshape(gamma * inv_std, bshape) if needs[0] else None
        ggamma = (g * xhat).sum(axis=axes) if needs[1] else None
        gbeta = g.sum(axis=axes) if needs[2] else None
        return gx, ggamma, gbeta


@register_op("mean_pool")
class _MeanPool():
    """Non-overlapping average pooling with a square window, or global pooling when ``kernel`` is 0"""
    def forward(self, arrays, attrs):
        x = arrays[0]
        k = attrs.get("kernel", 0)
        if x.ndim != 4:
            raise ShapeError(f"mean_pool: expected a 4D input, got {x.shape}")
        n, c, h, w = x.shape
        if k == 0:
            return x.astype(np.float64).mean(axis=(2, 3)), (x.shape, k)
        if h % k != 0 or w % k != 0:
            raise ShapeError(f"mean_pool: spatial size {(h, w)} is not divisible by kernel {k}")
        out = x.astype(np.float64).reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))
        return out, (x.shape, k)

    def backward(self, ctx, g, needs):
        shape, k = ctx
        if k == 0:
            return (np.broadcast_to(g[:, :, None, None] / (shape[2] * shape[3]), shape).copy(),)
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k),)


@register_op("conv2d")
class _Conv2d():
    """Direct 2D cross-correlation (NCHW input, OIHW kernel) with stride and zero padding"""
    def forward(self, arrays, attrs):
        x, w = arrays
        if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
        sh, sw = _pair(attrs.get("stride", 1))
        ph, pw = _pair(attrs.get("padding", 0))
        kh, kw = w.shape[2:]
        xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        if xp.shape[2] < kh or xp.shape[3] < kw:
            raise ShapeError(f"conv2d: padded input {xp.shape} smaller than kernel {w.shape}")
        windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
        w64 = w.astype(np.float64)
        out = np.einsum("nchwij,ocij->nohw", windows, w64, optimize=True)
        return out, (windows, w64, x.shape, xp.shape, (sh, sw), (ph, pw))

    def backward(self, ctx, g, needs):
        windows, w64, x_shape, xp_shape, (sh, sw), (ph, pw) = ctx
        g = g.astype(np.float64)
        gx, gw = None, None
        if needs[1]:
            gw = np.einsum("nchwij,nohw->ocij", windows, g, optimize=True)
        if needs[0]:
            kh, kw = w64.shape[2:]
            ho, wo = g.shape[2:]
            cols = np.einsum("nohw,ocij->nchwij", g, w64, optimize=True)
            gxp = np.zeros(xp_shape)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += cols[..., i, j]
            gx = gxp[:, :, ph:ph + x_shape[2], pw:pw + x_shape[3]]
        return gx, gw


@register_op("softmax_cross_entropy")
class _SoftmaxCrossEntropy():
    """Mean softmax cross-entropy of (N, K) logits against integer labels"""
    def forward(self, arrays, attrs):
        logits = arrays[0].astype(np.float64)
        labels = np.asarray(attrs["labels"]).astype(np.int64)
        if logits.ndim != 2 or labels.shape != (logits.shape[0],):
            raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} and labels {labels.shape} "
                             "do not conform")
        if np.any(labels < 0) or np.any(labels >= logits.shape[1]):
            raise ValueError(f"softmax_cross_entropy: labels must lie in [0, {logits.shape[1]})")
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_norm = np.log(np.exp(shifted).sum(axis=1))
        n = logits.shape[0]
        loss = np.mean(log_norm - shifted[np.arange(n), labels])
        probs = np.exp(shifted - log_norm[:, None])
        return np.asarray(loss), (probs, labels)

    def backward(self, ctx, g, needs):
        probs, labels = ctx
        n = probs.shape[0]
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return (d * (float(np.reshape(g, -1)[0]) / n),)


@register_op("sum")
class _Sum():
    def forward(self, arrays, attrs):
        x = arrays[0]
        axis = attrs.get("axis", None)
        return x.astype(np.float64).sum(axis=axis), (x.shape, axis)

    def backward(self, ctx, g, needs):
        shape, axis = ctx
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)


@register_op("mean")
class _Mean():
    def forward(self, arrays, attrs):
        x = arrays[0]
        return x.astype(np.float64).mean(), x.shape

    def backward(self, ctx, g, needs):
        return (np.full(ctx, float(np.reshape(g, -1)[0]) / max(int(np.prod(ctx)), 1)),)


@register_op("astype")
class _AsType():
    def forward(self, arrays, attrs):
        return arrays[0].astype(attrs["dtype"]), None

    def backward(self, ctx, g, needs):
        return (g,)


def add(a, b):
    """Elementwise (broadcasting) sum"""
    a = _lift(a, b) if isinstance(b, Tensor) else a
    return forward_op("add", [a, _lift(b, a)])


def sub(a, b):
    """Elementwise (broadcasting) difference"""
    a = _lift(a, b) if isinstance(b, Tensor) else a
    return forward_op("sub", [a, _lift(b, a)])


def mul(a, b):
    """Elementwise (broadcasting) product"""
    a = _lift(a, b) if isinstance(b, Tensor) else a
    return forward_op("mul", [a, _lift(b, a)])


def scale(x, factor):
    """Multiply by a python scalar"""
    return forward_op("scale", [x], {"factor": float(factor)})


def shift(x, value):
    """Add a python scalar"""
    return forward_op("shift", [x], {"value": float(value)})


def square(x):
    return forward_op("square", [x])


def matmul(a, b):
    """Product of two matrices"""
    return forward_op("matmul", [a, b])


def transpose(x, axes):
    return forward_op("transpose", [x], {"axes": tuple(axes)})


def reshape(x, shape):
    return forward_op("reshape", [x], {"shape": tuple(shape)})


def flatten(x):
    """Collapse every axis but the first"""
    return reshape(x, (x.shape[0], -1))


def row_scale(x, d, repeats=1):
    """Compute ``diag(repeat(d, repeats)) @ x``"""
    return forward_op("row_scale", [x, d], {"repeats": int(repeats)})


def relu(x):
    return forward_op("relu", [x])


def tanh(x):
    return forward_op("tanh", [x])


def sigmoid(x, mu=1.0, center=0.0):
    """Logistic function with steepness ``mu`` centred on ``center``"""
    return forward_op("sigmoid", [x], {"mu": float(mu), "center": float(center)})


def batchnorm(x, gamma, beta, mean, var, eps=1e-5):
    """Inference-mode batch normalisation over axis 1"""
    return forward_op("batchnorm", [x, gamma, beta], {"mean": mean, "var": var, "eps": eps})


def mean_pool(x, kernel=0):
    """Average pooling with a non-overlapping ``kernel`` window (0 for global pooling)"""
    return forward_op("mean_pool", [x], {"kernel": int(kernel)})


def conv2d(x, w, stride=1, padding=0):
    """2D convolution of an NCHW input with an OIHW kernel"""
    return forward_op("conv2d", [x, w], {"stride": stride, "padding": padding})


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy between softmax(logits) and integer labels"""
    return forward_op("softmax_cross_entropy", [logits], {"labels": labels})


def reduce_sum(x, axis=None):
    return forward_op("sum", [x], {"axis": axis})


def reduce_mean(x):
    return forward_op("mean", [x])


def astype(x, dtype):
    """Differentiable change of storage type"""
    return forward_op("astype", [x], {"dtype": np.dtype(dtype)})

"""Minimal reverse-mode autodiff engine on top of numpy.

Every differentiable operation the model needs lives here: elementwise
arithmetic, matmul, conv2d/maxpool2d/batchnorm2d, activations, softmax,
embedding lookup, dropout and cross entropy.  Each op records itself on
the implicit tape (one `_OpRecord` per executed op, in execution order);
`backward()` replays the records in reverse and accumulates gradients
into every tensor that requires them.

Float64 is the default dtype and is what all gradient checks run in;
float32 is supported as a runtime mode for speed.
"""
from __future__ import annotations

import itertools

import numpy as np


class TensorError(Exception):
    """Base error for the numeric core."""


class ShapeError(TensorError):
    """Operands do not conform; message names the op and the shapes."""


_grad_enabled = True
_nan_checks = False
_op_counter = itertools.count()


def set_nan_checks(enabled: bool) -> None:
    """Debug mode: assert every op output is finite."""
    global _nan_checks
    _nan_checks = bool(enabled)


class no_grad:
    """Context manager that disables tape recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class _OpRecord:
    """One executed differentiable op: inputs, output and its vjp."""

    __slots__ = ("seq", "name", "inputs", "out", "backward_fn", "consumed")

    def __init__(self, name, inputs, out, backward_fn):
        self.seq = next(_op_counter)
        self.name = name
        self.inputs = inputs
        self.out = out
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    """N-dimensional real array with optional gradient accumulation."""

    __slots__ = ("data", "requires_grad", "grad", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._op = None

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

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        return multiply(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return negative(self)

    def __sub__(self, other):
        return add(self, negative(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), negative(self))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter:
    """Named trainable tensor; names are unique within a model."""

    def __init__(self, name: str, data):
        self.name = name
        self.tensor = data if isinstance(data, Tensor) else Tensor(data)
        self.tensor.requires_grad = True

    @property
    def data(self):
        return self.tensor.data

    @data.setter
    def data(self, value):
        self.tensor.data = value

    @property
    def grad(self):
        return self.tensor.grad

    def zero_grad(self):
        self.tensor.zero_grad()

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


class Tape:
    """Ordered record of the ops that produced a tensor.

    Replaying the records in reverse visits every op exactly once; a
    tape can be consumed by backward() only once.
    """

    def __init__(self, records):
        self.records = records

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
        records = []
        seen = set()
        stack = [root]
        while stack:
            t = stack.pop()
            rec = t._op
            if rec is None or id(rec) in seen:
                continue
            seen.add(id(rec))
            records.append(rec)
            stack.extend(rec.inputs)
        records.sort(key=lambda r: r.seq)
        return cls(records)


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad leaf reachable from loss.

    Intermediate tensors only hold their gradient transiently; the graph
    is torn down record by record as it is consumed.
    """
    if loss.size != 1:
        raise TensorError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = Tape.trace(loss)
    if any(rec.consumed for rec in tape.records):
        raise TensorError("tape already consumed; backward may run only once per forward pass")
    if loss.grad is None:
        loss.grad = np.ones_like(loss.data)
    for rec in reversed(tape.records):
        rec.consumed = True
        out_grad = rec.out.grad
        if out_grad is not None:
            grads = rec.backward_fn(out_grad)
            for inp, g in zip(rec.inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                # grads are never mutated in place, so aliasing upstream
                # arrays or views is safe here
                inp.grad = g if inp.grad is None else inp.grad + g
            rec.out.grad = None
        # Drop activations, closures and the record->tensor back edge the
        # moment the record is consumed.  The graph otherwise survives as
        # reference cycles until the cycle collector runs, and peak memory
        # grows by a full graph per training step.  Only leaf tensors
        # (parameters, user-created inputs) retain .grad.
        rec.out = None
        rec.inputs = ()
        rec.backward_fn = None


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _record(name, out: Tensor, inputs, backward_fn) -> Tensor:
    if _nan_checks and not np.all(np.isfinite(out.data)):
        raise TensorError(f"{name}: non-finite values in output")
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._op = _OpRecord(name, tuple(inputs), out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum out broadcast dimensions so grad matches the input shape."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = Tensor(a.data + b.data)
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    return _record("add", out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def multiply(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = Tensor(a.data * b.data)
    except ValueError:
        raise ShapeError(f"multiply: shapes {a.shape} and {b.shape} do not broadcast")
    ad, bd = a.data, b.data
    return _record(
        "multiply", out, (a, b),
        lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)),
    )


def negative(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _record("negative", out, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    ad, bd = a.data, b.data
    return _record("matmul", out, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: needs at least one tensor")
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
            i != axis % len(base) and other[i] != base[i] for i in range(len(base))
        ):
            raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} differ off axis {axis}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", out, tuple(tensors), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = Tensor(a.data.reshape(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    in_shape = a.shape
    return _record("reshape", out, (a,), lambda g: (g.reshape(in_shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for ndim {a.ndim}")
    out = Tensor(a.data.transpose(axes))
    inverse = tuple(np.argsort(axes))
    return _record("transpose", out, (a,), lambda g: (g.transpose(inverse),))


def repeat_rows(a: Tensor, times: int) -> Tensor:
    """Repeat each row of axis 0 `times` times; backward sums each group."""
    if times < 1:
        raise ShapeError(f"repeat_rows: times must be >= 1, got {times}")
    out = Tensor(np.repeat(a.data, times, axis=0))
    n = a.shape[0]

    def bwd(g):
        return (g.reshape((n, times) + g.shape[1:]).sum(axis=1),)

    return _record("repeat_rows", out, (a,), bwd)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    in_shape = a.shape

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, in_shape).astype(g.dtype, copy=False),)

    return _record("sum", out, (a,), bwd)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    in_shape = a.shape

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, in_shape).astype(g.dtype, copy=False),)

    return _record("mean", out, (a,), bwd)


# ---------------------------------------------------------------------
# activations and probability ops
# ---------------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0))
    mask = a.data > 0
    return _record("relu", out, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    # exp overflow on very negative inputs saturates to exactly 0, which
    # is the right limit; keep the one-branch form so values stay
    # bit-identical across runs
    with np.errstate(over="ignore"):
        y = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(y)
    return _record("sigmoid", out, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y)
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - y * y),))


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis; rows sum to 1."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((g - dot) * y,)

    return _record("softmax", out, (a,), bwd)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Rows of an embedding matrix selected by integer id."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding_lookup: id out of range [0, {table.shape[0]}), got {ids.min()}..{ids.max()}"
        )
    out = Tensor(table.data[ids])

    def bwd(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids, g)
        return (dt,)

    return _record("embedding_lookup", out, (table,), bwd)


def dropout(a: Tensor, rate: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: train-time rescale by 1/(1-rate), eval is identity."""
    if not 0.0 <= rate < 1.0:
        raise TensorError(f"dropout: rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return a
    if rng is None:
        raise TensorError("dropout: train mode requires an rng")
    keep = (rng.random(a.shape) >= rate).astype(a.dtype)
    scale = 1.0 / (1.0 - rate)
    out = Tensor(a.data * keep * scale)
    return _record("dropout", out, (a,), lambda g: (g * keep * scale,))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Per-row -log softmax(logits)[target]; shape (B,V) + (B,) -> (B,)."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-D, got {logits.shape}")
    targets = np.asarray(targets)
    if targets.shape != (logits.shape[0],):
        raise ShapeError(
            f"cross_entropy: targets shape {targets.shape} does not match batch {logits.shape[0]}"
        )
    z = logits.data
    m = z.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=-1))
    rows = np.arange(z.shape[0])
    out = Tensor(lse - z[rows, targets])
    sm = np.exp(z - m)
    sm /= sm.sum(axis=-1, keepdims=True)

    def bwd(g):
        dz = sm * g[:, None]
        dz[rows, targets] -= g
        return (dz,)

    return _record("cross_entropy", out, (logits,), bwd)


# ---------------------------------------------------------------------
# image ops
# ---------------------------------------------------------------------

def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride=1, padding=0) -> Tensor:
    """2-D convolution over (B, C, H, W) with an (O, C, kh, kw) kernel."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d: expects 4-D input/kernel, got {x.shape} and {kernel.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    B, C, H, W = x.shape
    O, Ck, kh, kw = kernel.shape
    if C != Ck:
        raise ShapeError(f"conv2d: input channels {C} != kernel channels {Ck}")
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: input {H}x{W} too small for k=({kh},{kw}) p=({ph},{pw}) s=({sh},{sw})")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = np.empty((B, C, kh, kw, Ho, Wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + sh * Ho:sh, j:j + sw * Wo:sw]
    mat = cols.transpose(0, 4, 5, 1, 2, 3).reshape(B * Ho * Wo, C * kh * kw)
    wmat = kernel.data.reshape(O, C * kh * kw)
    y = mat @ wmat.T
    if bias is not None:
        y += bias.data
    out = Tensor(y.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))
    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def bwd(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * Ho * Wo, O)
        dk = (gm.T @ mat).reshape(O, C, kh, kw)
        dmat = gm @ wmat
        dcols = dmat.reshape(B, Ho, Wo, C, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + sh * Ho:sh, j:j + sw * Wo:sw] += dcols[:, :, i, j]
        dx = dxp[:, :, ph:ph + H, pw:pw + W]
        if bias is None:
            return dx, dk
        return dx, dk, g.sum(axis=(0, 2, 3))

    return _record("conv2d", out, inputs, bwd)


def maxpool2d(x: Tensor, kernel, stride=None) -> Tensor:
    """Max pooling over (B, C, H, W); stride defaults to the kernel."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: expects 4-D input, got {x.shape}")
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride if stride is not None else (kh, kw))
    B, C, H, W = x.shape
    Ho = (H - kh) // sh + 1
    Wo = (W - kw) // sw + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"maxpool2d: input {H}x{W} too small for k=({kh},{kw}) s=({sh},{sw})")
    windows = np.empty((kh * kw, B, C, Ho, Wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            windows[i * kw + j] = x.data[:, :, i:i + sh * Ho:sh, j:j + sw * Wo:sw]
    arg = windows.argmax(axis=0)
    out = Tensor(windows.max(axis=0))

    def bwd(g):
        dx = np.zeros_like(x.data)
        for i in range(kh):
            for j in range(kw):
                mask = arg == (i * kw + j)
                dx[:, :, i:i + sh * Ho:sh, j:j + sw * Wo:sw] += g * mask
        return (dx,)

    return _record("maxpool2d", out, (x,), bwd)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                running_mean: np.ndarray, running_var: np.ndarray,
                momentum: float = 0.1, eps: float = 1e-5, train: bool = True) -> Tensor:
    """Per-channel batch norm over (B, H, W); eval uses running statistics.

    running_mean/running_var are plain arrays mutated in place during
    training (model buffers, saved with checkpoints).
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d: expects 4-D input, got {x.shape}")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batchnorm2d: gamma/beta must be ({C},), got {gamma.shape}/{beta.shape}")
    axes = (0, 2, 3)
    if train:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        # buffers stay float64 for accumulation accuracy; normalize in
        # the input dtype so float32 models do not promote downstream
        mean = running_mean.astype(x.dtype, copy=False)
        var = running_var.astype(x.dtype, copy=False)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype, copy=False)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = Tensor(gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None])

    def bwd(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        gs = g * gamma.data[None, :, None, None]
        if train:
            mg = gs.mean(axis=axes)
            mgx = (gs * xhat).mean(axis=axes)
            dx = inv_std[None, :, None, None] * (
                gs - mg[None, :, None, None] - xhat * mgx[None, :, None, None]
            )
        else:
            dx = gs * inv_std[None, :, None, None]
        return dx, dgamma, dbeta

    return _record("batchnorm2d", out, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------

def glorot_uniform(shape, fan_in: int, fan_out: int, rng: np.random.Generator,
                   dtype=np.float64) -> np.ndarray:
    """Uniform in [-a, a], a = sqrt(6 / (fan_in + fan_out))."""
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(dtype)

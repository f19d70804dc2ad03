"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every differentiable op records itself on a thread-local tape in creation
order (which is automatically topological).  ``backward`` on a scalar result
walks the tape in reverse, accumulating gradients into each leaf tensor that
requires them, then resets the tape.  Double precision throughout so
finite-difference checks can run at tight tolerances; there is no GPU path,
no mixed precision, and only the broadcasting the listed ops need.
"""

from __future__ import annotations

import json
import threading
from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Raised when op inputs have incompatible shapes."""


class GradError(RuntimeError):
    """Raised on backward/optimizer misuse (non-scalar root, missing grad)."""


# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------

class Tensor:
    """Dense float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        if self.size != 1:
            raise ShapeError(f"item: tensor has shape {self.shape}, expected scalar")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy(), requires_grad=False, name=self.name)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # small operator surface; everything else goes through the named ops
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


class TapeOp:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered op record; creation order doubles as a topological order."""

    def __init__(self):
        self.ops = []

    def record(self, inputs, output, backward_fn):
        self.ops.append(TapeOp(inputs, output, backward_fn))

    def reset(self):
        self.ops.clear()

    def __len__(self):
        return len(self.ops)


_STATE = threading.local()


def active_tape() -> Tape:
    tape = getattr(_STATE, "tape", None)
    if tape is None:
        tape = Tape()
        _STATE.tape = tape
    return tape


def _grad_enabled():
    return not getattr(_STATE, "no_grad", False)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (rollouts, evaluation)."""
    prev = getattr(_STATE, "no_grad", False)
    _STATE.no_grad = True
    try:
        yield
    finally:
        _STATE.no_grad = prev


def tensor(data, requires_grad=False, name=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def param(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(inputs, out_data, backward_fn) -> Tensor:
    needs = _grad_enabled() and any(
        isinstance(t, Tensor) and t.requires_grad for t in inputs
    )
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        active_tape().record(tuple(inputs), out, backward_fn)
    return out


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every requires_grad leaf, reset tape.

    ``root`` must be a scalar produced by a recorded op.
    """
    if root.size != 1:
        raise GradError(f"backward: root must be scalar, got shape {root.shape}")
    tape = active_tape()
    produced = {id(op.output) for op in tape.ops}
    if id(root) not in produced:
        raise GradError("backward: root is not on the active tape")
    grads = {id(root): np.ones_like(root.data)}
    for op in reversed(tape.ops):
        out_grad = grads.pop(id(op.output), None)
        if out_grad is None:
            continue
        for tin, gin in zip(op.inputs, op.backward_fn(out_grad)):
            if gin is None or not isinstance(tin, Tensor):
                continue
            key = id(tin)
            if key in produced:
                if key in grads:
                    grads[key] = grads[key] + gin
                else:
                    grads[key] = gin
            elif tin.requires_grad:
                tin.grad = gin if tin.grad is None else tin.grad + gin
    tape.reset()


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` back down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Pointwise and arithmetic ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} + {b.shape}") from None

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record((a, b), out, bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} * {b.shape}") from None

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record((a, b), out, bwd)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _record((a,), -a.data, lambda g: (-g,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    out = np.log(a.data)

    def bwd(g):
        return (g / a.data,)

    return _record((a,), out, bwd)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def bwd(g):
        return (g * (a.data > 0.0),)

    return _record((a,), out, bwd)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _record((a,), out, bwd)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return _record((a,), out, bwd)


def softmax_rows(a) -> Tensor:
    """Row-wise softmax of a 2-d tensor."""
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"softmax-rows: expected 2-d input, got shape {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - dot),)

    return _record((a,), out, bwd)


# ---------------------------------------------------------------------------
# Reductions and shape plumbing
# ---------------------------------------------------------------------------

def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis,)
    return tuple(axis)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    axes = _axis_tuple(axis, a.ndim)

    def bwd(g):
        gg = g if keepdims or axis is None else np.expand_dims(g, axes)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _record((a,), out, bwd)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    if a.size == 0:
        raise ShapeError("mean: empty tensor")
    out = a.data.mean(axis=axis, keepdims=keepdims)
    axes = _axis_tuple(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if a.ndim else 1

    def bwd(g):
        gg = g if keepdims or axis is None else np.expand_dims(g, axes)
        return (np.broadcast_to(gg, a.shape) / count,)

    return _record((a,), out, bwd)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.shape),)

    return _record((a,), out, bwd)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected 2-d input, got shape {a.shape}")
    return _record((a,), a.data.T.copy(), lambda g: (g.T.copy(),))


def concat(tensors, axis=0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: need at least one input")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _record(tuple(tensors), out, bwd)


def slice_(a, index) -> Tensor:
    """Basic (slice/int) indexing with gradient scatter on backward."""
    a = _as_tensor(a)
    out = a.data[index]

    def bwd(g):
        full = np.zeros(a.shape)
        full[index] = g
        return (full,)

    return _record((a,), np.ascontiguousarray(out), bwd)


# ---------------------------------------------------------------------------
# Linear algebra and convolution
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _record((a, b), out, bwd)


def _out_hw(h, w, kh, kw, stride, pad):
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    return oh, ow


def _im2col(xp, kh, kw, stride, oh, ow):
    n, c, _, _ = xp.shape
    cols = np.empty((n, c, kh, kw, oh, ow))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride,
                                  j : j + stride * ow : stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def _col2im(gcols, xp_shape, kh, kw, stride, oh, ow):
    n, c, _, _ = xp_shape
    gxp = np.zeros(xp_shape)
    gc = gcols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + stride * oh : stride,
                j : j + stride * ow : stride] += gc[:, :, i, j]
    return gxp


def conv2d(x, w, bias=None, stride=1, pad=0) -> Tensor:
    """2-d convolution, NCHW input, OIHW weights, zero padding."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input/weight, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"conv2d: input channels {x.shape[1]} != weight channels {w.shape[1]}"
        )
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: unsupported stride {stride}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    oh, ow = _out_hw(h, wd, kh, kw, stride, pad)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} too large for input {h}x{wd} pad {pad}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    wf = w.data.reshape(o, -1)
    out = np.einsum("ok,nkp->nop", wf, cols).reshape(n, o, oh, ow)
    b = _as_tensor(bias) if bias is not None else None
    if b is not None:
        if b.shape != (o,):
            raise ShapeError(f"conv2d: bias shape {b.shape} != ({o},)")
        out = out + b.data[None, :, None, None]

    def bwd(g):
        gf = g.reshape(n, o, oh * ow)
        gw = np.einsum("nop,nkp->ok", gf, cols).reshape(w.shape)
        gcols = np.einsum("ok,nop->nkp", wf, gf)
        gxp = _col2im(gcols, xp.shape, kh, kw, stride, oh, ow)
        gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        if b is not None:
            return gx, gw, g.sum(axis=(0, 2, 3))
        return gx, gw

    inputs = (x, w) if b is None else (x, w, b)
    return _record(inputs, out, bwd)


def avgpool2d(x, k, stride=None) -> Tensor:
    x = _as_tensor(x)
    stride = k if stride is None else stride
    if x.ndim != 4:
        raise ShapeError(f"avgpool2d: expected 4-d input, got shape {x.shape}")
    n, c, h, w = x.shape
    oh, ow = _out_hw(h, w, k, k, stride, 0)
    if oh < 1 or ow < 1:
        raise ShapeError(f"avgpool2d: window {k} too large for input {h}x{w}")
    acc = np.zeros((n, c, oh, ow))
    for i in range(k):
        for j in range(k):
            acc += x.data[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    out = acc / (k * k)

    def bwd(g):
        gx = np.zeros(x.shape)
        gs = g / (k * k)
        for i in range(k):
            for j in range(k):
                gx[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += gs
        return (gx,)

    return _record((x,), out, bwd)


def maxpool2d(x, k, stride=None) -> Tensor:
    x = _as_tensor(x)
    stride = k if stride is None else stride
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: expected 4-d input, got shape {x.shape}")
    n, c, h, w = x.shape
    oh, ow = _out_hw(h, w, k, k, stride, 0)
    if oh < 1 or ow < 1:
        raise ShapeError(f"maxpool2d: window {k} too large for input {h}x{w}")
    stack = np.empty((n, c, k * k, oh, ow))
    for i in range(k):
        for j in range(k):
            stack[:, :, i * k + j] = x.data[:, :, i : i + stride * oh : stride,
                                            j : j + stride * ow : stride]
    arg = stack.argmax(axis=2)
    out = np.take_along_axis(stack, arg[:, :, None], axis=2)[:, :, 0]

    def bwd(g):
        gx = np.zeros(x.shape)
        for i in range(k):
            for j in range(k):
                sel = (arg == i * k + j) * g
                gx[:, :, i : i + stride * oh : stride,
                   j : j + stride * ow : stride] += sel
        return (gx,)

    return _record((x,), out, bwd)


def pad2d(x, p: int) -> Tensor:
    """Zero padding of the two trailing spatial dims of an NCHW tensor."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"pad2d: expected 4-d input, got shape {x.shape}")
    if p < 0:
        raise ShapeError(f"pad2d: negative padding {p}")
    out = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))

    def bwd(g):
        return (g[:, :, p : p + x.shape[2], p : p + x.shape[3]],)

    return _record((x,), out, bwd)


def batchnorm_inference(x, gamma, beta, running_mean, running_var, eps=1e-5) -> Tensor:
    """Frozen-statistics batch normalization (channel axis 1 for 4-d, 1 for 2-d)."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    mean_a = np.asarray(running_mean, dtype=np.float64)
    var_a = np.asarray(running_var, dtype=np.float64)
    ch = x.shape[1]
    if gamma.shape != (ch,) or beta.shape != (ch,) or mean_a.shape != (ch,) or var_a.shape != (ch,):
        raise ShapeError(
            f"batchnorm-inference: per-channel params must have shape ({ch},), "
            f"got gamma {gamma.shape}, beta {beta.shape}"
        )
    expand = (None, slice(None), None, None) if x.ndim == 4 else (None, slice(None))
    inv = 1.0 / np.sqrt(var_a + eps)
    scale = (gamma.data * inv)[expand]
    xhat = (x.data - mean_a[expand]) * inv[expand]
    out = scale * x.data + (beta.data - gamma.data * inv * mean_a)[expand]

    def bwd(g):
        red = (0, 2, 3) if x.ndim == 4 else (0,)
        return g * scale, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _record((x, gamma, beta), out, bwd)


_OPS = {
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "softmax-rows": softmax_rows,
    "add": add,
    "mul": mul,
    "mean": mean,
    "sum": sum_,
    "log": log,
    "neg": neg,
    "concat": concat,
    "slice": slice_,
    "batchnorm-inference": batchnorm_inference,
    "avgpool2d": avgpool2d,
    "maxpool2d": maxpool2d,
    "pad2d": pad2d,
    "reshape": reshape,
    "transpose": transpose,
}


def forward_op(op: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a forward op by name."""
    fn = _OPS.get(op)
    if fn is None:
        raise ValueError(f"forward_op: unknown op {op!r}")
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

def _param_list(params):
    if isinstance(params, dict):
        return list(params.values())
    return list(params)


class Sgd:
    """Plain stochastic gradient descent."""

    def __init__(self, params, lr):
        self.params = _param_list(params)
        self.lr = float(lr)

    def step(self):
        for p in self.params:
            if p.grad is None:
                raise GradError(f"sgd: missing grad for parameter {p.name or p.shape}")
        for p in self.params:
            p.data -= self.lr * p.grad
            p.grad = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None


class Adam:
    """Adam with bias correction."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = _param_list(params)
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]

    def step(self):
        for p in self.params:
            if p.grad is None:
                raise GradError(f"adam: missing grad for parameter {p.name or p.shape}")
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            mhat = self.m[i] / b1c
            vhat = self.v[i] / b2c
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
            p.grad = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: dict) -> None:
    """Write a {name: {shape, row-major data}} JSON map. Round trip is bit-exact."""
    payload = {}
    for name in sorted(params):
        p = params[name]
        data = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
        payload[name] = {"shape": list(data.shape), "data": data.reshape(-1).tolist()}
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_checkpoint(path) -> dict:
    """Read a checkpoint into a {name: ndarray} map."""
    with open(path) as fh:
        payload = json.load(fh)
    out = {}
    for name, entry in payload.items():
        out[name] = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
    return out


def restore_params(params: dict, arrays: dict) -> None:
    """Copy checkpoint arrays into an existing parameter map, checking shapes."""
    for name, p in params.items():
        if name not in arrays:
            raise KeyError(f"checkpoint missing parameter {name!r}")
        arr = arrays[name]
        if tuple(arr.shape) != tuple(p.shape):
            raise ShapeError(f"checkpoint shape {arr.shape} != param {p.shape} for {name!r}")
        p.data = arr.copy()

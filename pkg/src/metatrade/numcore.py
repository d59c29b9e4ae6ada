"""Small float64 tensor library with a dynamic reverse-mode tape.

Only what the recurrent policy needs: elementwise arithmetic, matmul,
a handful of nonlinearities, reductions, slicing/concatenation, the LSTM
cell and Adam.  Broadcasting is limited to adding a bias vector to the
rows of a matrix; every other shape mismatch raises ``ShapeError``.
"""

from __future__ import annotations

import json
import struct
import threading
from contextlib import contextmanager
from pathlib import Path

import numpy as np

__all__ = [
    "Tensor", "ShapeError", "Tape", "tensor", "parameter", "no_grad",
    "add", "sub", "mul", "matmul", "tanh", "sigmoid", "exp", "log",
    "concat", "slice_", "sum_", "mean", "softmax", "stack", "reshape", "forward_op",
    "backward", "lstm_cell", "init_lstm_params", "AdamState", "adam_step",
    "Adam", "save_params", "load_params",
]


class ShapeError(ValueError):
    pass


_state = threading.local()


def _current_tape():
    return getattr(_state, "tape", None)


class Tensor:
    """Dense float64 array plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "__weakref__")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


def tensor(data):
    return Tensor(data)


def parameter(data):
    return Tensor(data, requires_grad=True)


class Tape:
    """Records differentiable ops executed inside its ``with`` block.

    Nodes are appended in execution order, which is already a topological
    order of the graph, so backward is a single reverse sweep.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        self._outer = _current_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._outer
        return False

    def backward(self, loss):
        return backward(loss, self)


@contextmanager
def no_grad():
    outer = _current_tape()
    _state.tape = None
    try:
        yield
    finally:
        _state.tape = outer


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out, op, parents, backward_fn):
    tape = _current_tape()
    out.op = op
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        tape.nodes.append(out)
    return out


def _check_binary(kind, a, b):
    """Return 'same', 'row_bias_b' or 'row_bias_a'; raise on anything else."""
    if a.shape == b.shape:
        return "same"
    if b.ndim == 0 or a.ndim == 0:
        return "scalar_b" if b.ndim == 0 else "scalar_a"
    if a.ndim >= 2 and b.ndim == 1 and a.shape[-1] == b.shape[0]:
        return "row_bias_b"
    if b.ndim >= 2 and a.ndim == 1 and b.shape[-1] == a.shape[0]:
        return "row_bias_a"
    raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    if len(shape) == 0:
        return np.asarray(grad.sum())
    return grad.reshape(-1, shape[0]).sum(axis=0)


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary("add", a, b)
    out = Tensor(a.data + b.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, "add", (a, b), bw)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary("sub", a, b)
    out = Tensor(a.data - b.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(out, "sub", (a, b), bw)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary("mul", a, b)
    out = Tensor(a.data * b.data)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, "mul", (a, b), bw)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _record(out, "matmul", (a, b), bw)


def tanh(a):
    a = _as_tensor(a)
    y = np.tanh(a.data)
    out = Tensor(y)
    return _record(out, "tanh", (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    a = _as_tensor(a)
    y = _sigmoid(a.data)
    out = Tensor(y)
    return _record(out, "sigmoid", (a,), lambda g: (g * y * (1.0 - y),))


def exp(a):
    a = _as_tensor(a)
    y = np.exp(a.data)
    out = Tensor(y)
    return _record(out, "exp", (a,), lambda g: (g * y,))


def log(a):
    a = _as_tensor(a)
    out = Tensor(np.log(a.data))
    return _record(out, "log", (a,), lambda g: (g / a.data,))


def concat(tensors, axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {ref.shape} and {t.shape}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=ax))
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _record(out, "concat", tuple(tensors), bw)


def slice_(a, index):
    a = _as_tensor(a)
    out = Tensor(a.data[index])

    advanced = _has_advanced(index)

    def bw(g):
        full = np.zeros_like(a.data)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _record(out, "slice", (a,), bw)


def _has_advanced(index):
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def sum_(a, axis=None):
    a = _as_tensor(a)
    out = Tensor(a.data.sum(axis=axis))

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, "sum", (a,), bw)


def mean(a, axis=None):
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    out = Tensor(a.data.mean(axis=axis))

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _record(out, "mean", (a,), bw)


def softmax(a, axis=-1):
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(out, "softmax", (a,), bw)


def stack(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    for t in tensors[1:]:
        if t.shape != tensors[0].shape:
            raise ShapeError(f"stack: incompatible shapes {tensors[0].shape} and {t.shape}")
    out = Tensor(np.stack([t.data for t in tensors], axis=axis))

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _record(out, "stack", tuple(tensors), bw)


def reshape(a, shape):
    a = _as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    return _record(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


_OPS = {
    "add": add, "sub": sub, "mul": mul, "matmul": matmul, "tanh": tanh,
    "sigmoid": sigmoid, "exp": exp, "log": log, "concat": concat,
    "slice": slice_, "sum": sum_, "mean": mean, "softmax": softmax, "stack": stack,
    "reshape": reshape,
}


def forward_op(kind, *inputs, **kwargs):
    """Dispatch an op by name, e.g. ``forward_op("matmul", a, b)``."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    if kind in ("concat", "stack"):
        return fn(list(inputs), **kwargs)
    return fn(*inputs, **kwargs)


def backward(loss, tape=None):
    """Backpropagate a scalar ``loss`` through ``tape``.

    Returns a dict mapping every leaf tensor with ``requires_grad`` to its
    gradient array; the same arrays are accumulated into ``leaf.grad``.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = tape if tape is not None else _current_tape()
    if tape is None:
        raise RuntimeError("backward: no tape recorded")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if parent._backward is None:
                leaves[key] = parent
    out = {}
    for key, leaf in leaves.items():
        g = grads[key]
        leaf.grad = g if leaf.grad is None else leaf.grad + g
        out[leaf] = g
    if loss._backward is None and loss.requires_grad:
        out[loss] = np.ones_like(loss.data)
    return out


# ---------------------------------------------------------------- LSTM


def init_lstm_params(input_dim, hidden_dim, rng, forget_bias=1.0):
    """Uniform(-1/sqrt(H), 1/sqrt(H)) weights, gate order (i, f, g, o)."""
    bound = 1.0 / np.sqrt(hidden_dim)
    w = rng.uniform(-bound, bound, size=(input_dim + hidden_dim, 4 * hidden_dim))
    b = np.zeros(4 * hidden_dim)
    b[hidden_dim:2 * hidden_dim] = forget_bias
    return {"lstm_w": parameter(w), "lstm_b": parameter(b)}


def lstm_cell(x, h_prev, c_prev, params):
    """One LSTM step on a batch; ``x`` is (B, D), states are (B, H)."""
    w, b = params["lstm_w"], params["lstm_b"]
    x, h_prev, c_prev = _as_tensor(x), _as_tensor(h_prev), _as_tensor(c_prev)
    hidden = h_prev.shape[-1]
    if x.ndim != 2 or h_prev.shape != c_prev.shape or h_prev.shape[0] != x.shape[0]:
        raise ShapeError(
            f"lstm_cell: incompatible shapes x={x.shape} h={h_prev.shape} c={c_prev.shape}"
        )
    if w.shape != (x.shape[1] + hidden, 4 * hidden):
        raise ShapeError(
            f"lstm_cell: weight shape {w.shape} does not fit x={x.shape} h={h_prev.shape}"
        )
    z = add(matmul(concat([x, h_prev], axis=1), w), b)
    H = hidden
    i = sigmoid(z[:, 0:H])
    f = sigmoid(z[:, H:2 * H])
    g = tanh(z[:, 2 * H:3 * H])
    o = sigmoid(z[:, 3 * H:4 * H])
    c = add(mul(f, c_prev), mul(i, g))
    h = mul(o, tanh(c))
    return h, c


# ---------------------------------------------------------------- Adam


class AdamState:
    def __init__(self, params):
        self.t = 0
        self.m = {k: np.zeros_like(np.asarray(v.data if isinstance(v, Tensor) else v)) for k, v in params.items()}
        self.v = {k: np.zeros_like(m) for k, m in self.m.items()}


def adam_step(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """In-place Adam update of ``params`` (name -> Tensor) from ``grads`` (name -> array)."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"adam: grad shape {g.shape} != param shape {p.data.shape} for {name}")
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState(params)

    def step(self, grads):
        adam_step(self.params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"MTPARAM\x01"


def save_params(path, params, meta=None):
    """Write named arrays as: magic, u32 header length, JSON header, raw little-endian float64."""
    names = sorted(params)
    arrays = [
        np.array(params[n].data if isinstance(params[n], Tensor) else params[n], dtype="<f8", order="C")
        for n in names
    ]
    header = json.dumps(
        {"version": 1, "meta": meta or {}, "entries": [[n, list(a.shape)] for n, a in zip(names, arrays)]},
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for a in arrays:
            fh.write(a.tobytes())


def load_params(path):
    """Inverse of :func:`save_params`; returns ``(name -> ndarray, meta)``."""
    raw = Path(path).read_bytes()
    if raw[: len(_MAGIC)] != _MAGIC:
        raise ValueError(f"{path}: not a parameter file (bad magic header)")
    pos = len(_MAGIC)
    (n,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    header = json.loads(raw[pos: pos + n])
    pos += n
    if header.get("version") != 1:
        raise ValueError(f"{path}: unsupported parameter file version {header.get('version')}")
    out = {}
    for name, shape in header["entries"]:
        count = int(np.prod(shape)) if shape else 1
        out[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    return out, header["meta"]

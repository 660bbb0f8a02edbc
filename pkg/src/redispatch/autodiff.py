"""Minimal dense-array reverse-mode automatic differentiation and Adam.

Everything is float64 numpy underneath.  Each operation records its parents
and a backward closure on the implicit tape (the DAG of Tensor objects);
``Tensor.backward()`` walks the graph in reverse topological order and
accumulates exact gradients.  Gradients accumulate across backward calls
until ``ParameterSet.zero_grad`` clears them.

Shapes broadcast like numpy; gradients of broadcast operands are summed
back to the operand shape.  matmul accepts stacked (batched) operands on
either side.
"""

from __future__ import annotations

import struct

import numpy as np

__all__ = [
    "Tensor", "tensor", "constant", "ParameterSet", "adam_step",
    "add", "sub", "mul", "scale", "matmul", "tanh", "relu", "softmax",
    "t_sum", "t_mean", "concat", "conv1d", "log", "exp", "sqrt", "t_abs",
    "clip", "square", "zscore_fit", "zscore_apply",
    "save_checkpoint", "load_checkpoint", "gradient_check",
]


class ShapeMismatchError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        topo, seen = [], set()

        def visit(t):
            if id(t) in seen:
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            topo.append(t)

        visit(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for t in reversed(topo):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t.requires_grad and t._parents == ():
                t._accumulate(g)
            if t._backward is None:
                continue
            for parent, pg in zip(t._parents, t._backward(g)):
                if not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # small operator sugar used throughout the model code
    def __add__(self, other):
        return add(self, _lift(other))

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, key):
        return t_slice(self, key)

    def item(self):
        return float(self.data)


def tensor(data, requires_grad=False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to the operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data
    return Tensor(out_data, parents=(a, b),
                  backward=lambda g: (_unbroadcast(g, a.shape),
                                      _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return Tensor(a.data - b.data, parents=(a, b),
                  backward=lambda g: (_unbroadcast(g, a.shape),
                                      _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Tensor(a.data * b.data, parents=(a, b),
                  backward=lambda g: (_unbroadcast(g * b.data, a.shape),
                                      _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return Tensor(a.data * c, parents=(a,), backward=lambda g: (g * c,))


def _stacked_matmul(x, y):
    """x @ y with the two stacked shapes on the hot path routed through one
    flat BLAS call instead of numpy's per-slice loop."""
    if x.ndim > 2 and y.ndim == 2:
        lead = x.shape[:-1]
        return (x.reshape(-1, x.shape[-1]) @ y).reshape(*lead, y.shape[-1])
    if x.ndim == 2 and y.ndim > 2:
        # (n, k) @ (..., k, m) -> (..., n, m)
        moved = np.tensordot(x, y, axes=([1], [-2]))     # (n, ..., m)
        return np.moveaxis(moved, 0, -2)
    return x @ y


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeMismatchError(
            f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = _stacked_matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(_stacked_matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.data.ndim == 2:
                # weight gradient: fold every leading axis into the row sum
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(_stacked_matmul(np.swapaxes(a.data, -1, -2), g),
                                  b.shape)
        return ga, gb

    return Tensor(out, parents=(a, b), backward=backward)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor(out, parents=(a,), backward=lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor(a.data * mask, parents=(a,), backward=lambda g: (g * mask,))


def softmax(a: Tensor) -> Tensor:
    """Row softmax over the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return ((g - dot) * s,)

    return Tensor(s, parents=(a,), backward=backward)


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def t_sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _axis_tuple(axis, a.data.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor(out, parents=(a,), backward=backward)


def t_mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _axis_tuple(axis, a.data.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(t_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def concat(tensors, axis=-1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(out, parents=tuple(tensors), backward=backward)


def t_slice(a: Tensor, key) -> Tensor:
    out = a.data[key]

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[key] = g
        return (ga,)

    return Tensor(out, parents=(a,), backward=backward)


def conv1d(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Valid 1-D convolution along the second-to-last axis.

    x: (..., L, C_in); w: (K, C_in, C_out) -> (..., L - K + 1, C_out).
    """
    k = w.shape[0]
    if x.shape[-1] != w.shape[1]:
        raise ShapeMismatchError(f"conv1d channels differ: x {x.shape}, w {w.shape}")
    length = x.shape[-2]
    if length < k:
        raise ShapeMismatchError(f"conv1d input length {length} < kernel {k}")
    l_out = length - k + 1
    out = np.zeros(x.shape[:-2] + (l_out, w.shape[2]))
    for i in range(k):
        out += x.data[..., i:i + l_out, :] @ w.data[i]

    def backward(g):
        gx = np.zeros_like(x.data)
        gw = np.zeros_like(w.data)
        for i in range(k):
            gx[..., i:i + l_out, :] += g @ w.data[i].T
            xs = x.data[..., i:i + l_out, :]
            gw[i] = np.tensordot(
                xs.reshape(-1, xs.shape[-1]), g.reshape(-1, g.shape[-1]), axes=(0, 0))
        return gx, gw

    parents = (x, w)
    result = Tensor(out, parents=parents, backward=backward)
    if bias is not None:
        result = add(result, bias)
    return result


def log(a: Tensor) -> Tensor:
    return Tensor(np.log(a.data), parents=(a,), backward=lambda g: (g / a.data,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor(out, parents=(a,), backward=lambda g: (g * out,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor(out, parents=(a,), backward=lambda g: (g * 0.5 / out,))


def t_abs(a: Tensor) -> Tensor:
    return Tensor(np.abs(a.data), parents=(a,),
                  backward=lambda g: (g * np.sign(a.data),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = (a.data > lo) & (a.data < hi)
    return Tensor(np.clip(a.data, lo, hi), parents=(a,),
                  backward=lambda g: (g * mask,))


def square(a: Tensor) -> Tensor:
    return mul(a, a)


# ---------------------------------------------------------------------------
# parameters and the optimizer

class ParameterSet:
    """Named parameter tensors with gradient and Adam moment slots.

    Names are unique and double as checkpoint keys.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data, dtype=np.float64).copy(), requires_grad=True)
        self._params[name] = t
        self._m[name] = np.zeros_like(t.data)
        self._v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        for name, t in self._params.items():
            src = arrays[name]
            if src.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {name!r}: "
                                 f"{src.shape} vs {t.data.shape}")
            t.data[...] = src

    def copy_from(self, other: "ParameterSet"):
        self.load_state_arrays({n: t.data for n, t in other.items()})

    def soft_update_from(self, other: "ParameterSet", rate: float):
        """target <- rate * online + (1 - rate) * target, parameter-wise."""
        for name, t in self._params.items():
            t.data *= (1.0 - rate)
            t.data += rate * other[name].data


def adam_step(params: ParameterSet, lr: float, betas=(0.9, 0.999), eps=1e-8,
              weight_decay: float = 0.0):
    """One bias-corrected Adam update over every parameter with a gradient.

    Parameters whose grad is None (e.g. an untouched branch of the graph)
    are left alone.  weight_decay applies decoupled L2 shrinkage.
    """
    params.step_count += 1
    t = params.step_count
    b1, b2 = betas
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        if p.grad is None:
            continue
        m = params._m[name]
        v = params._v[name]
        m *= b1
        m += (1.0 - b1) * p.grad
        v *= b2
        v += (1.0 - b2) * p.grad * p.grad
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# feature normalization

def zscore_fit(x: np.ndarray, axis=0):
    """Column means and guarded standard deviations (std < 1e-8 becomes 1)."""
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=axis)
    std = x.std(axis=axis)
    std = np.where(std < 1e-8, 1.0, std)
    return mean, std


def zscore_apply(x, mean, std):
    return (np.asarray(x, dtype=np.float64) - mean) / std


# ---------------------------------------------------------------------------
# checkpoint I/O
#
# Byte layout (little-endian), version 1:
#   magic   4 bytes  b"RDCK"
#   version u32
#   count   u32                      number of named arrays
#   then per array:
#     name_len u16, name (utf-8), ndim u8, dims u32 * ndim, f64 * prod(dims)

_MAGIC = b"RDCK"
_VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray]):
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype="<f8")
            enc = name.encode("utf-8")
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, count = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape)
            arrays[name] = data.astype(np.float64)
    return arrays


# ---------------------------------------------------------------------------
# finite-difference harness (used by the test suite)

def gradient_check(fn, params: list[Tensor], eps: float = 1e-6,
                   n_probe: int | None = None, rng=None) -> float:
    """Max relative error between analytic gradients of scalar fn() and
    central finite differences, probing every entry (or n_probe random
    entries per tensor)."""
    for p in params:
        p.grad = None
    out = fn()
    out.backward()
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for p in params:
        flat = p.data.reshape(-1)
        if n_probe is None or n_probe >= flat.size:
            idxs = range(flat.size)
        else:
            idxs = rng.choice(flat.size, size=n_probe, replace=False)
        gflat = (np.zeros_like(flat) if p.grad is None
                 else p.grad.reshape(-1))
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            f_hi = fn().data.item()
            flat[i] = orig - eps
            f_lo = fn().data.item()
            flat[i] = orig
            fd = (f_hi - f_lo) / (2 * eps)
            denom = max(abs(fd), abs(gflat[i]), 1e-8)
            worst = max(worst, abs(fd - gflat[i]) / denom)
    return worst

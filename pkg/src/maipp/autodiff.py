"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Operations executed inside an active :class:`Tape` are recorded in execution
order (which is a topological order) together with their backward rules.
:func:`backward` walks the record in reverse and accumulates gradients into the
``grad`` slot of every leaf tensor that requires them. A tape is single-use:
its record is released once the backward pass completes.

    >>> params = ParameterStore()
    >>> w = params.add("w", np.ones((2, 2)))
    >>> with Tape():
    ...     loss = (w * w).sum()
    >>> backward(loss)
    >>> w.grad
    array([[2., 2.],
           [2., 2.]])
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float64
_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tape:
    """Records differentiable operations executed while it is active."""

    def __init__(self) -> None:
        self.records: list[tuple] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: "Tensor", inputs: tuple, backward_fn: Callable, forward_fn: Callable) -> None:
        self.records.append((out, inputs, backward_fn, forward_fn))

    def backward(self, loss: "Tensor") -> None:
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, backward_fn, _ in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, backward_fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._tape is None:
                    if inp.grad is None:
                        inp.grad = np.zeros_like(inp.data)
                    inp.grad += gi
                elif id(inp) in grads:
                    grads[id(inp)] = grads[id(inp)] + gi
                else:
                    grads[id(inp)] = gi
        self.release()

    def release(self) -> None:
        """Drop the record so activations are freed without waiting for the cycle collector."""
        for out, *_ in self.records:
            out._tape = None
        self.records = []

    def replay(self) -> bool:
        """Recompute every recorded output from its inputs; True if all match bit-exactly."""
        for out, inputs, _, forward_fn in self.records:
            again = forward_fn(*[t.data for t in inputs])
            if again.shape != out.data.shape or not np.array_equal(again, out.data):
                return False
        return True


_TAPES: list[Tape] = []


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_tape")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False) -> None:
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: np.ndarray, inputs: tuple, backward_fn: Callable, forward_fn: Callable) -> Tensor:
    tape = _TAPES[-1] if _TAPES else None
    if tape is None or not any(t.requires_grad for t in inputs):
        return Tensor(out)
    t = Tensor(out, requires_grad=True)
    t._tape = tape
    tape.record(t, inputs, backward_fn, forward_fn)
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ----------------------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        np.add,
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        np.subtract,
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _record(
        ad * bd, (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        np.multiply,
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _record(
        out, (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
        np.divide,
    )


def power(x, p: float) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _record(
        xd**p, (x,),
        lambda g: (g * p * xd ** (p - 1),),
        lambda a: a**p,
    )


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,), np.exp)


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _record(np.log(xd), (x,), lambda g: (g / xd,), np.log)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _record(out, (x,), lambda g: (g * (1.0 - out * out),), np.tanh)


def _gelu(a):
    return 0.5 * a * (1.0 + erf(a / _SQRT2))


def gelu(x) -> Tensor:
    """Exact (erf-based) GELU."""
    x = as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))

    def back(g):
        return (g * (cdf + xd * _INV_SQRT2PI * np.exp(-0.5 * xd * xd)),)

    return _record(xd * cdf, (x,), back, _gelu)


def relu(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _record(np.maximum(xd, 0.0), (x,), lambda g: (g * (xd > 0),), lambda a: np.maximum(a, 0.0))


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    inside = (xd > lo) & (xd < hi)
    return _record(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,), lambda a: np.clip(a, lo, hi))


def minimum(a, b) -> Tensor:
    """Elementwise minimum; on ties the gradient goes to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "minimum")
    take_a = a.data <= b.data
    sa, sb = a.shape, b.shape
    return _record(
        np.minimum(a.data, b.data), (a, b),
        lambda g: (_unbroadcast(g * take_a, sa), _unbroadcast(g * ~take_a, sb)),
        np.minimum,
    )


# ----------------------------------------------------------------------------- reductions / shape


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(x.data.sum(axis=axis, keepdims=keepdims), (x,), back, lambda a: a.sum(axis=axis, keepdims=keepdims))


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    count = x.size if axis is None else int(np.prod([shape[a] for a in np.atleast_1d(axis)]))

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _record(x.data.mean(axis=axis, keepdims=keepdims), (x,), back, lambda a: a.mean(axis=axis, keepdims=keepdims))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {tuple(shape)}") from None
    return _record(out, (x,), lambda g: (g.reshape(old),), lambda a: a.reshape(shape))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _record(
        np.transpose(x.data, axes), (x,),
        lambda g: (np.transpose(g, inv),),
        lambda a: np.transpose(a, axes),
    )


def getitem(x, key) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        gx = np.zeros(shape)
        np.add.at(gx, key, g)
        return (gx,)

    return _record(np.array(x.data[key]), (x,), back, lambda a: np.array(a[key]))


def gather(x, indices, axis: int = 0) -> Tensor:
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError(f"gather: indices must be 1-D, got shape {idx.shape}")
    shape = x.shape

    def back(g):
        gx = np.zeros(shape)
        np.add.at(np.moveaxis(gx, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (gx,)

    return _record(np.take(x.data, idx, axis=axis), (x,), back, lambda a: np.take(a, idx, axis=axis))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ts[0].shape} and {t.shape} on axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=ax))

    return _record(
        np.concatenate([t.data for t in ts], axis=ax), ts, back,
        lambda *arrs: np.concatenate(arrs, axis=ax),
    )


# ----------------------------------------------------------------------------- linear algebra / nn


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes (both operands ≥ 2-D)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data
    return _record(
        ad @ bd, (a, b),
        lambda g: (_unbroadcast(g @ _swap(bd), ad.shape), _unbroadcast(_swap(ad) @ g, bd.shape)),
        np.matmul,
    )


def _softmax(a):
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x) -> Tensor:
    """Softmax over the last axis."""
    x = as_tensor(x)
    s = _softmax(x.data)
    return _record(s, (x,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),), _softmax)


def layer_norm(x, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance (no affine terms)."""
    x = as_tensor(x)

    def fwd(a):
        mu = a.mean(axis=-1, keepdims=True)
        var = ((a - mu) ** 2).mean(axis=-1, keepdims=True)
        return (a - mu) / np.sqrt(var + eps)

    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(((xd - mu) ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = (xd - mu) * inv

    def back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _record(fwd(xd), (x,), back, fwd)


def _conv_cols(a: np.ndarray, k: int) -> np.ndarray:
    p = (k - 1) // 2
    t = a.shape[1]
    pad = np.pad(a, ((0, 0), (p, k - 1 - p), (0, 0)))
    return np.stack([pad[:, k - 1 - j : k - 1 - j + t, :] for j in range(k)], axis=2)


def conv1d(x, w) -> Tensor:
    """'Same'-padded, stride-1 temporal convolution.

    ``x`` is (batch, time, in_channels), ``w`` is (kernel, in_channels,
    out_channels) with an odd kernel size. A true convolution (flipped kernel),
    so a unit impulse reproduces ``w`` centred on the impulse.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1] or w.shape[0] % 2 == 0:
        raise ShapeError(f"conv1d: incompatible shapes {x.shape} and {w.shape}")
    k, cin, cout = w.shape
    bsz, t, _ = x.shape

    def fwd(a, ww):
        return _conv_cols(a, k).reshape(a.shape[0], a.shape[1], k * cin) @ ww.reshape(k * cin, cout)

    cols = _conv_cols(x.data, k).reshape(bsz, t, k * cin)
    wd = w.data

    def back(g):
        gw = np.einsum("btc,bto->co", cols, g).reshape(k, cin, cout)
        gcols = (g @ wd.reshape(k * cin, cout).T).reshape(bsz, t, k, cin)
        p = (k - 1) // 2
        gpad = np.zeros((bsz, t + k - 1, cin))
        for j in range(k):
            gpad[:, k - 1 - j : k - 1 - j + t, :] += gcols[:, :, j, :]
        return gpad[:, p : p + t, :], gw

    return _record(cols @ wd.reshape(k * cin, cout), (x, w), back, fwd)


def mse(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes differ {a.shape} and {b.shape}")
    diff = a.data - b.data
    n = diff.size
    return _record(
        np.asarray(np.mean(diff * diff)), (a, b),
        lambda g: (2.0 * g * diff / n, -2.0 * g * diff / n),
        lambda x, y: np.asarray(np.mean((x - y) * (x - y))),
    )


def linear(x, w, b=None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ----------------------------------------------------------------------------- backward entry point


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every leaf that ``loss`` depends on."""
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if loss._tape is None:
        return
    loss._tape.backward(loss)


# ----------------------------------------------------------------------------- parameters / Adam


class ParameterStore:
    """Named leaf tensors plus Adam moment buffers."""

    def __init__(self) -> None:
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=DTYPE), requires_grad=True)
        t.grad = np.zeros_like(t.data)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def num_values(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = np.zeros_like(t.data)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        for name, t in self.params.items():
            if name not in arrays:
                if strict:
                    raise KeyError(f"missing parameter {name!r}")
                continue
            value = np.asarray(arrays[name], dtype=DTYPE)
            if value.shape != t.shape:
                raise ShapeError(f"parameter {name!r}: shape {value.shape} does not match {t.shape}")
            t.data = value.copy()

    def copy(self) -> "ParameterStore":
        other = ParameterStore()
        for name, t in self.params.items():
            other.add(name, t.data)
        return other

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((t.grad**2).sum()) for t in self.params.values() if t.grad is not None)))


def clip_grad_norm(store: ParameterStore, max_norm: float) -> float:
    norm = store.grad_norm()
    if norm > max_norm > 0:
        scale = max_norm / (norm + 1e-12)
        for t in store.params.values():
            t.grad *= scale
    return norm


def adam_step(
    store: ParameterStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    names: Iterable[str] | None = None,
) -> None:
    """One bias-corrected Adam update of the parameters in ``store`` (in place)."""
    store.step_count += 1
    t = store.step_count
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name in (store.params if names is None else names):
        p = store.params[name]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ----------------------------------------------------------------------------- checkpoints

MAGIC = b"MAIPPTNS"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named float64 tensors: magic, version, JSON shape header, raw little-endian payload."""
    entries, offset, blobs = [], 0, []
    for name, arr in tensors.items():
        a = np.array(arr, dtype="<f8", order="C")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
        blobs.append(a.tobytes())
        offset += a.size * 8
    header = json.dumps({"version": FORMAT_VERSION, "meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version, hlen = struct.unpack_from("<IQ", raw, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = len(MAGIC) + struct.calcsize("<IQ")
    header = json.loads(raw[start : start + hlen])
    payload = memoryview(raw)[start + hlen :]
    out = {}
    for e in header["tensors"]:
        buf = payload[e["offset"] : e["offset"] + 8 * e["count"]]
        if len(buf) != 8 * e["count"]:
            raise CheckpointError(f"{path}: truncated payload for {e['name']!r}")
        out[e["name"]] = np.frombuffer(buf, dtype="<f8").astype(DTYPE).reshape(tuple(e["shape"]))
    return out, header["meta"]


# ----------------------------------------------------------------------------- finite differences


def numerical_grad(fn: Callable[[], float], x: np.ndarray, h: float = 1e-5, indices=None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. entries of ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size) if indices is None else indices:
        old = flat[i]
        flat[i] = old + h
        fp = fn()
        flat[i] = old - h
        fm = fn()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm relative error ``|a - n|_inf / |n|_inf`` (absolute when both vanish)."""
    scale = max(float(np.abs(numeric).max(initial=0.0)), float(np.abs(analytic).max(initial=0.0)))
    diff = float(np.abs(analytic - numeric).max(initial=0.0))
    return diff / scale if scale > 1e-12 else diff


def gradcheck(fn: Callable[..., Tensor], *arrays: np.ndarray, h: float = 1e-5) -> float:
    """Worst relative error between tape gradients and central differences.

    ``fn`` maps tensors to a scalar tensor; every array is treated as a leaf.
    """
    leaves = [Tensor(np.array(a, dtype=DTYPE), requires_grad=True) for a in arrays]
    with Tape():
        out = fn(*leaves)
    backward(out)
    worst = 0.0
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)

        def f():
            return float(fn(*[Tensor(l.data) for l in leaves]).data.sum())

        numeric = numerical_grad(f, leaf.data, h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst

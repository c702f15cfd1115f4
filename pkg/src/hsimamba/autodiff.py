"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op runs eagerly on numpy arrays. When a :class:`Tape` is active and an
input requires a gradient, the op appends a node holding the saved forward
values and a closure mapping the output cotangent to input cotangents.
Backward walks the tape in exact reverse of recording order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data: Any, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        if self.data.ndim and not self.data.size:
            raise ShapeError(f"tensor extents must be positive, got {self.data.shape}")
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return neg(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Records ops executed while it is active (use as a context manager)."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def backward(self, outputs: Tensor | Sequence[Tensor],
                 output_grads: np.ndarray | Sequence[np.ndarray] | None = None) -> dict[int, np.ndarray]:
        """Propagate cotangents; returns a map from ``id(tensor)`` to its gradient."""
        if not self.nodes:
            raise RuntimeError("backward called before any forward op was recorded")
        if isinstance(outputs, Tensor):
            outputs = [outputs]
            output_grads = None if output_grads is None else [output_grads]
        if output_grads is None:
            output_grads = [np.ones_like(o.data) for o in outputs]
        grads: dict[int, np.ndarray] = {}
        for out, g in zip(outputs, output_grads):
            g = np.asarray(g, dtype=np.float64)
            if g.shape != out.shape:
                raise ShapeError(f"backward: output grad shape {g.shape} != output shape {out.shape}")
            _accumulate(grads, out, g)
        for node in reversed(self.nodes):
            g = grads.get(id(node.output))
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is not None and t.requires_grad:
                    if gi.shape != t.shape:
                        raise ShapeError(f"{node.op}: gradient shape {gi.shape} != input shape {t.shape}")
                    _accumulate(grads, t, gi)
        return grads

    def grad(self, output: Tensor, wrt: Sequence[Tensor], output_grad=None) -> list[np.ndarray]:
        grads = self.backward(output, output_grad)
        return [grads.get(id(t), np.zeros_like(t.data)) for t in wrt]


_ACTIVE: list[Tape] = []


def _accumulate(grads: dict[int, np.ndarray], t: Tensor, g: np.ndarray) -> None:
    k = id(t)
    grads[k] = grads[k] + g if k in grads else g


def _result(op: str, inputs: tuple[Tensor, ...], arr: np.ndarray, backward) -> Tensor:
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"{op}: non-finite value in output of shape {arr.shape}")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, needs)
    if needs and _ACTIVE:
        _ACTIVE[-1].nodes.append(Node(op, inputs, out, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _result("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _result("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _result("mul", (a, b), a.data * b.data,
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return _result("div", (a, b), out,
                   lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result("neg", (a,), -a.data, lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):   # overflow is reported by _result
        out = np.exp(a.data)
    return _result("exp", (a,), out, lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if (a.data <= 0).any():
        raise ValueError("log: input must be strictly positive")
    return _result("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _result("sigmoid", (a,), s, lambda g: (g * s * (1.0 - s),))


def silu(a) -> Tensor:
    """x * sigmoid(x)."""
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _result("silu", (a,), a.data * s,
                   lambda g: (g * s * (1.0 + a.data * (1.0 - s)),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return _result("softplus", (a,), np.logaddexp(0.0, a.data),
                   lambda g: (g * _sigmoid(a.data),))


# ------------------------------------------------------------------ reductions

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _result("sum", (a,), np.asarray(out), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes]))
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, a.shape),)

    return _result("mean", (a,), np.asarray(out), backward)


# ---------------------------------------------------------------- shape ops

def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None
    return _result("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return _result("transpose", (a,), np.ascontiguousarray(a.data.transpose(axes)),
                   lambda g: (np.ascontiguousarray(g.transpose(inverse)),))


def flip(a, axis: int) -> Tensor:
    a = as_tensor(a)
    return _result("flip", (a,), np.flip(a.data, axis).copy(), lambda g: (np.flip(g, axis),))


# ------------------------------------------------------------------- layers

def linear(x, weight, bias=None) -> Tensor:
    """Affine map on the last axis: ``x @ weight.T + bias``; weight is (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input shape {x.shape} incompatible with weight shape {weight.shape}")
    out = x.data @ weight.data.T
    inputs = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
        out = out + bias.data
        inputs = (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        grads = [g @ weight.data, g2.T @ x.data.reshape(-1, x.shape[-1])]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _result("linear", inputs, out, backward)


def normalize(x, axes: Sequence[int], eps: float = 1e-5, floor: bool = False) -> Tensor:
    """Standardize over ``axes`` with the biased variance.

    Divides by sqrt(var + eps), or by sqrt(max(var, eps)) when ``floor`` is set;
    the floored form leaves already standardized data exactly unchanged.
    """
    x = as_tensor(x)
    axes = _norm_axes(axes, x.ndim)
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    with np.errstate(over="ignore"):
        var = (xc * xc).mean(axis=axes, keepdims=True)
    if not np.isfinite(var).all():
        raise FloatingPointError(f"normalize: non-finite variance for input of shape {x.shape}")
    if floor:
        live = var > eps                      # groups whose scale depends on the data
        inv = 1.0 / np.sqrt(np.maximum(var, eps))
    else:
        live = True
        inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=axes, keepdims=True)
        gx = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - np.where(live, xhat * gx, 0.0)),)

    return _result("normalize", (x,), xhat, backward)


def conv3d(x, weight, bias=None) -> Tensor:
    """Valid, stride-1 3-D cross-correlation.

    x is (n, C_in, S, H, W); weight is (C_out, C_in, kS, kH, kW).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 5 or weight.ndim != 5 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv3d: input shape {x.shape} incompatible with weight shape {weight.shape}")
    ks = weight.shape[2:]
    if any(k > n for k, n in zip(ks, x.shape[2:])):
        raise ShapeError(f"conv3d: kernel {ks} larger than input extents {x.shape[2:]}")
    win = sliding_window_view(x.data, ks, axis=(2, 3, 4))  # n, Ci, S', H', W', kS, kH, kW
    out = np.tensordot(win, weight.data, axes=([1, 5, 6, 7], [1, 2, 3, 4]))  # n, S', H', W', Co
    out = np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3))
    inputs = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"conv3d: bias shape {bias.shape} != ({weight.shape[0]},)")
        out += bias.data[None, :, None, None, None]
        inputs = (x, weight, bias)

    def backward(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        gx = None
        if x.requires_grad:
            gx = _conv_input_grad(g, weight.data, x.shape)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return grads

    return _result("conv3d", inputs, out, backward)


def _conv_input_grad(g: np.ndarray, w: np.ndarray, x_shape) -> np.ndarray:
    gx = np.zeros(x_shape)
    so, ho, wo = g.shape[2:]
    for a in range(w.shape[2]):
        for b in range(w.shape[3]):
            for c in range(w.shape[4]):
                contrib = np.tensordot(g, w[:, :, a, b, c], axes=([1], [0]))
                gx[:, :, a:a + so, b:b + ho, c:c + wo] += contrib.transpose(0, 4, 1, 2, 3)
    return gx


def _scan_chunked(xs, ds, A, Bs, Cs, chunk: int = 128) -> np.ndarray:
    """Forward-only scan in time chunks; keeps the working set small for long L."""
    L, n, D = xs.shape
    N = A.shape[-1]
    y = np.empty((L, n, D))
    h = np.zeros((n, D, N))
    tmp = np.empty((n, D, N))
    for s in range(0, L, chunk):
        e = min(s + chunk, L)
        dA = np.exp(ds[s:e, ..., None] * A)
        H = (ds[s:e] * xs[s:e])[..., None] * Bs[s:e, :, None, :]
        np.multiply(dA[0], h, out=tmp)
        H[0] += tmp
        for t in range(1, e - s):
            np.multiply(dA[t], H[t - 1], out=tmp)
            H[t] += tmp
        h = H[-1].copy()
        y[s:e] = np.matmul(H, Cs[s:e, ..., None])[..., 0]
    return np.ascontiguousarray(y.transpose(1, 0, 2))


def selective_scan(x, delta, A, B, C) -> Tensor:
    """Diagonal selective state-space scan, sequential in time.

    Shapes: x, delta (n, L, D); A (D, N); B, C (n, L, N). Per step and channel
    d the state is ``h = exp(delta*A[d]) * h + delta * B_t * x_t[d]`` starting
    from zero, and the output is ``y_t[d] = C_t . h``.
    """
    x, delta, A, B, C = (as_tensor(t) for t in (x, delta, A, B, C))
    if x.ndim != 3:
        raise ShapeError(f"selective_scan: x must be (n, L, D), got {x.shape}")
    n, L, D = x.shape
    N = A.shape[-1]
    if delta.shape != x.shape or A.shape != (D, N) or B.shape != (n, L, N) or C.shape != (n, L, N):
        raise ShapeError(
            f"selective_scan: inconsistent shapes x={x.shape} delta={delta.shape} "
            f"A={A.shape} B={B.shape} C={C.shape}")
    # time-major internally so each step touches contiguous memory
    xs = x.data.transpose(1, 0, 2)                                  # L, n, D
    ds = delta.data.transpose(1, 0, 2)
    Bs = B.data.transpose(1, 0, 2)                                  # L, n, N
    Cs = C.data.transpose(1, 0, 2)
    if not (_ACTIVE and any(t.requires_grad for t in (x, delta, A, B, C))):
        y = _scan_chunked(xs, ds, A.data, Bs, Cs)
        return _result("selective_scan", (x, delta, A, B, C), y, None)
    dA = np.exp(ds[..., None] * A.data)                             # L, n, D, N
    dx = ds * xs                                                    # L, n, D
    H = dx[..., None] * Bs[:, :, None, :]                           # starts as Bbar*x
    tmp = np.empty((n, D, N))
    for t in range(1, L):
        np.multiply(dA[t], H[t - 1], out=tmp)
        H[t] += tmp
    y = np.ascontiguousarray(np.matmul(H, Cs[..., None])[..., 0].transpose(1, 0, 2))

    def backward(gy):
        gys = gy.transpose(1, 0, 2)
        G = gys[..., None] * Cs[:, :, None, :]
        for t in range(L - 2, -1, -1):
            np.multiply(dA[t + 1], G[t + 1], out=tmp)
            G[t] += tmp
        # G holds the total cotangent of each state h_t
        g_dA = np.zeros_like(G)
        np.multiply(G[1:], H[:-1], out=g_dA[1:])
        g_dA *= dA
        gC = np.matmul(H.transpose(0, 1, 3, 2), gys[..., None])[..., 0]
        gB = np.matmul(G.transpose(0, 1, 3, 2), dx[..., None])[..., 0]
        gHB = np.matmul(G, Bs[..., None])[..., 0]                   # L, n, D
        gx = gHB * ds if x.requires_grad else None
        gdelta = np.einsum("lndk,dk->lnd", g_dA, A.data) + gHB * xs
        gA = np.einsum("lnd,lndk->dk", ds, g_dA)
        tb = lambda a: None if a is None else np.ascontiguousarray(a.transpose(1, 0, 2))
        return tb(gx), tb(gdelta), gA, tb(gB), tb(gC)

    return _result("selective_scan", (x, delta, A, B, C), y, backward)


def log_softmax(logits, axis: int = -1) -> Tensor:
    logits = as_tensor(logits)
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    sm = np.exp(out)
    return _result("log_softmax", (logits,), out,
                   lambda g: (g - sm * g.sum(axis=axis, keepdims=True),))


def softmax(logits, axis: int = -1) -> Tensor:
    logits = as_tensor(logits)
    z = np.exp(logits.data - logits.data.max(axis=axis, keepdims=True))
    s = z / z.sum(axis=axis, keepdims=True)
    return _result("softmax", (logits,), s,
                   lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def cross_entropy(logits, targets: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy; ``targets`` are 0-based class indices."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = (lse - z[np.arange(n), targets]).mean()

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), targets] -= 1.0
        return (g * p / n,)

    return _result("cross_entropy", (logits,), np.asarray(loss), backward)


# ----------------------------------------------------------- graph interface

class Graph:
    """A named-input function with a parameter registry and a recorded tape.

    ``fn(params, **inputs)`` returns a Tensor or a dict of named Tensors.
    ``signature`` optionally fixes the shape of each named input.
    """

    def __init__(self, fn, params: dict[str, Tensor] | None = None,
                 signature: dict[str, tuple[int, ...]] | None = None, name: str = "graph"):
        self.fn = fn
        self.params = dict(params or {})
        self.signature = dict(signature or {})
        self.name = name
        self._tape: Tape | None = None
        self._inputs: dict[str, Tensor] = {}
        self._outputs: dict[str, Tensor] = {}

    def forward(self, inputs: dict[str, Any]) -> dict[str, Tensor]:
        wrapped = {}
        for key, value in inputs.items():
            t = Tensor(value.data if isinstance(value, Tensor) else value, requires_grad=True, name=key)
            want = self.signature.get(key)
            if want is not None and tuple(want) != t.shape:
                raise ShapeError(f"{self.name}: input {key!r} has shape {t.shape}, expected {tuple(want)}")
            wrapped[key] = t
        missing = set(self.signature) - set(wrapped)
        if missing:
            raise ShapeError(f"{self.name}: missing inputs {sorted(missing)}")
        for p in self.params.values():
            p.requires_grad = True
        with Tape() as tape:
            out = self.fn(self.params, **wrapped)
        if isinstance(out, Tensor):
            out = {"out": out}
        self._tape, self._inputs, self._outputs = tape, wrapped, out
        return out

    def backward(self, output_grads: dict[str, Any]) -> dict[str, np.ndarray]:
        if self._tape is None:
            raise RuntimeError(f"{self.name}: backward called before forward")
        names = list(output_grads)
        unknown = set(names) - set(self._outputs)
        if unknown:
            raise KeyError(f"{self.name}: no outputs named {sorted(unknown)}")
        outs = [self._outputs[k] for k in names]
        gs = [np.asarray(output_grads[k], dtype=np.float64) for k in names]
        if not self._tape.nodes:
            # outputs are leaves (identity graph)
            grads: dict[int, np.ndarray] = {}
            for o, g in zip(outs, gs):
                if g.shape != o.shape:
                    raise ShapeError(f"{self.name}: output grad shape {g.shape} != {o.shape}")
                _accumulate(grads, o, g)
        else:
            grads = self._tape.backward(outs, gs)
        result = {}
        for key, t in {**self.params, **self._inputs}.items():
            result[key] = grads.get(id(t), np.zeros_like(t.data))
        return result


# ----------------------------------------------------------- op registry

@dataclass
class OpSpec:
    fn: Callable[..., Tensor]
    shapes: tuple[tuple[int, ...], ...]
    make_inputs: Callable[[Sequence[tuple[int, ...]], np.random.Generator], list[np.ndarray]] | None = None
    # positions of inputs that get gradients (others are held fixed)
    wrt: tuple[int, ...] | None = None


OPS: dict[str, OpSpec] = {}


def register_op(name: str, fn, shapes, make_inputs=None, wrt=None) -> None:
    OPS[name] = OpSpec(fn, tuple(tuple(s) for s in shapes), make_inputs, wrt)


def _normal_inputs(shapes, rng):
    return [rng.standard_normal(s) for s in shapes]


def _away_from_zero(shapes, rng):
    # keeps kinked ops (relu) clear of their non-differentiable point
    out = []
    for s in shapes:
        x = rng.standard_normal(s)
        out.append(np.where(np.abs(x) < 0.05, np.sign(x) * 0.05 + x, x))
    return out


def _positive_inputs(shapes, rng):
    return [rng.uniform(0.5, 2.0, s) for s in shapes]


def _div_inputs(shapes, rng):
    return [rng.standard_normal(shapes[0]), rng.uniform(0.5, 2.0, shapes[1])]


def _scan_inputs(shapes, rng):
    x = rng.standard_normal(shapes[0])
    delta = rng.uniform(0.05, 0.5, shapes[1])
    A = -rng.uniform(0.5, 2.0, shapes[2])
    return [x, delta, A, rng.standard_normal(shapes[3]), rng.standard_normal(shapes[4])]


register_op("add", add, [(3, 4), (4,)])
register_op("sub", sub, [(2, 3), (2, 1)])
register_op("mul", mul, [(3, 4), (3, 4)])
register_op("div", div, [(3, 4), (4,)], _div_inputs)
register_op("neg", neg, [(5,)])
register_op("exp", exp, [(3, 3)])
register_op("log", log, [(3, 3)], _positive_inputs)
register_op("sigmoid", sigmoid, [(4, 3)])
register_op("silu", silu, [(4, 3)])
register_op("relu", relu, [(4, 3)], _away_from_zero)
register_op("softplus", softplus, [(4, 3)])
register_op("sum", lambda a: sum_(a, axis=(0, 2)), [(2, 3, 4)])
register_op("mean", lambda a: mean(a, axis=1, keepdims=True), [(2, 3, 4)])
register_op("reshape", lambda a: reshape(a, (4, 6)), [(2, 3, 4)])
register_op("transpose", lambda a: transpose(a, (2, 0, 1)), [(2, 3, 4)])
register_op("flip", lambda a: flip(a, 1), [(2, 3, 4)])
register_op("linear", linear, [(2, 3, 4), (5, 4), (5,)])
register_op("normalize", lambda a: normalize(a, (1, 2)), [(2, 3, 4, 2)])
register_op("conv3d", conv3d, [(2, 2, 4, 5, 5), (3, 2, 3, 3, 3), (3,)])
register_op("selective_scan", selective_scan, [(2, 6, 3), (2, 6, 3), (3, 4), (2, 6, 4), (2, 6, 4)],
            _scan_inputs)
register_op("softmax", softmax, [(3, 5)])
register_op("log_softmax", log_softmax, [(3, 5)])
register_op("cross_entropy", lambda z: cross_entropy(z, np.array([0, 2, 1, 2])), [(4, 3)])


def grad_check(op_name: str, input_shapes: Sequence[tuple[int, ...]] | None = None,
               seed: int = 0, step: float = 1e-5) -> float:
    """Compare tape gradients of a registered op with central finite differences.

    The scalar probed is ``sum(op(inputs) * w)`` with a random ``w``. Returns the
    largest relative error over the differentiated inputs, measured per input
    as ``||analytic - numeric|| / max(1e-8, ||numeric||)``.
    """
    spec = OPS[op_name]
    shapes = spec.shapes if input_shapes is None else tuple(tuple(s) for s in input_shapes)
    rng = np.random.default_rng(seed)
    arrays = (spec.make_inputs or _normal_inputs)(shapes, rng)
    wrt = spec.wrt if spec.wrt is not None else tuple(range(len(arrays)))
    tensors = [Tensor(a, requires_grad=i in wrt) for i, a in enumerate(arrays)]
    with Tape() as tape:
        out = spec.fn(*tensors)
    weights = rng.standard_normal(out.shape)
    analytic = tape.grad(out, [tensors[i] for i in wrt], weights)

    def probe(vals):
        return float((spec.fn(*[Tensor._wrap(v, False) for v in vals]).data * weights).sum())

    worst = 0.0
    for pos, i in enumerate(wrt):
        base = [a.copy() for a in arrays]
        numeric = np.zeros_like(base[i])
        flat = base[i].reshape(-1)
        for j in range(flat.size):
            keep = flat[j]
            flat[j] = keep + step
            f_plus = probe(base)
            flat[j] = keep - step
            f_minus = probe(base)
            flat[j] = keep
            numeric.reshape(-1)[j] = (f_plus - f_minus) / (2 * step)
        err = np.linalg.norm(analytic[pos] - numeric) / max(1e-8, np.linalg.norm(numeric))
        worst = max(worst, float(err))
    return worst

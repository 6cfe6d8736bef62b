"""Small reverse-mode differentiation engine on top of numpy.

A :class:`Tensor` records the operation that produced it and a closure that
pushes the output gradient back to its parents.  Graph nodes are only kept
when at least one parent requires a gradient, so evaluating a network on
constant inputs costs no more than plain numpy.

Programs are ordinary Python callables composed from the primitives in this
module.  :func:`forward`, :func:`value_and_grad` and :func:`finite_diff` wrap
such a callable with named inputs.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import expit

DTYPE = np.float64

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when an operation receives operands of incompatible shape."""

    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = ""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'!r}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward", f"implicit gradient needs a scalar output, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, True, _parents=parents, _backward=backward, op=op)
    return Tensor(data, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"cannot broadcast {a.shape} with {b.shape}") from None


# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def square(a: Tensor) -> Tensor:
    def backward(g):
        return (2.0 * g * a.data,)

    return _make(a.data * a.data, (a,), backward, "square")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    """Leaky ReLU; the derivative at exactly 0 is ``slope``."""
    pos = a.data > 0
    scale = np.where(pos, 1.0, slope)

    def backward(g):
        return (g * scale,)

    return _make(a.data * scale, (a,), backward, "leaky_relu")


def silu(a: Tensor) -> Tensor:
    s = expit(a.data)

    def backward(g):
        return (g * (s * (1.0 + a.data * (1.0 - s))),)

    return _make(a.data * s, (a,), backward, "silu")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - t * t),)

    return _make(t, (a,), backward, "tanh")


# reductions


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001
    if isinstance(axis, int):
        axis = (axis,)
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, tuple(ax % a.ndim for ax in axis))
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return mul(sum(a, axis), 1.0 / n)


def mse(a, b) -> Tensor:
    """Mean of squared differences over every element."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("mse", f"operands differ in shape: {a.shape} vs {b.shape}")
    return mean(square(sub(a, b)))


def sum_squares(a: Tensor) -> Tensor:
    """Per-sample squared norm: sums over every axis except the leading one."""
    return sum(square(a), axis=tuple(range(1, a.ndim)))


# shape ops


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {a.shape} to {shape}") from None

    def backward(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), backward, "reshape")


def concat(tensors: Iterable[Tensor], axis: int = 1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    ref = ts[0].shape
    for t in ts[1:]:
        if t.ndim != len(ref) or any(i != axis % len(ref) and t.shape[i] != ref[i] for i in range(len(ref))):
            raise ShapeError("concat", f"shapes {ref} and {t.shape} disagree off axis {axis}")
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, backward, "concat")


def broadcast_channel(values, spatial: tuple[int, int]) -> Tensor:
    """Turn a per-sample scalar of shape (N,) into a constant channel (N, 1, H, W)."""
    v = as_tensor(values)
    if v.ndim != 1:
        raise ShapeError("broadcast_channel", f"expected per-sample scalars (N,), got {v.shape}")
    h, w = spatial

    def backward(g):
        return (g.sum(axis=(1, 2, 3)),)

    out = np.broadcast_to(v.data[:, None, None, None], (v.shape[0], 1, h, w)).copy()
    return _make(out, (v,), backward, "broadcast_channel")


# linear maps


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", f"cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map ``x @ w + b`` with ``w`` of shape (in, out)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError("dense", f"input {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError("dense", f"bias {b.shape} does not match weight {w.shape}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data

    def backward(g):
        grads = (g @ w.data.T, x.data.T @ g)
        return grads + ((g.sum(axis=0),) if b is not None else ())

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward, "dense")


def _same_pad(size: int, k: int, stride: int) -> tuple[int, int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


def _conv_geometry(op: str, hw: tuple[int, int], k: tuple[int, int], stride: int, padding: str):
    if stride not in (1, 2):
        raise ShapeError(op, f"stride must be 1 or 2, got {stride}")
    if padding == "same":
        oh, pt, pb = _same_pad(hw[0], k[0], stride)
        ow, pl, pr = _same_pad(hw[1], k[1], stride)
    elif padding == "valid":
        oh = (hw[0] - k[0]) // stride + 1
        ow = (hw[1] - k[1]) // stride + 1
        pt = pb = pl = pr = 0
        if oh < 1 or ow < 1:
            raise ShapeError(op, f"kernel {k} larger than input {hw}")
    else:
        raise ShapeError(op, f"padding must be 'same' or 'valid', got {padding!r}")
    return oh, ow, (pt, pb, pl, pr)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    cols = as_strided(xp, (n, c, kh, kw, oh, ow), (sn, sc, sh, sw, sh * stride, sw * stride), writeable=False)
    return cols.reshape(n, c * kh * kw, oh * ow)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int, int], kh: int, kw: int, stride: int, oh: int, ow: int):
    n, c, hp, wp = shape
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    out = np.zeros(shape, dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, :, i, j]
    return out


def _pad(x: np.ndarray, pads) -> np.ndarray:
    pt, pb, pl, pr = pads
    if not any(pads):
        return x
    return np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))


def _unpad(x: np.ndarray, pads) -> np.ndarray:
    pt, pb, pl, pr = pads
    return x[:, :, pt : x.shape[2] - pb, pl : x.shape[3] - pr]


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: str = "same") -> Tensor:
    """2-D cross-correlation, NCHW input, weight (C_out, C_in, kh, kw)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", f"input {x.shape} does not match weight {w.shape}")
    cout, cin, kh, kw = w.shape
    oh, ow, pads = _conv_geometry("conv2d", x.shape[2:], (kh, kw), stride, padding)
    xp = _pad(x.data, pads)
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    wm = w.data.reshape(cout, -1)
    out = (wm @ cols).reshape(x.shape[0], cout, oh, ow)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def backward(g):
        gm = g.reshape(g.shape[0], cout, oh * ow)
        gw = np.einsum("nop,nkp->ok", gm, cols).reshape(w.shape)
        gx = _unpad(_col2im(wm.T @ gm, xp.shape, kh, kw, stride, oh, ow), pads)
        grads = (gx, gw)
        return grads + ((g.sum(axis=(0, 2, 3)),) if b is not None else ())

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward, "conv2d")


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: str = "same") -> Tensor:
    """Adjoint of :func:`conv2d`; weight (C_in, C_out, kh, kw).

    With ``padding="same"`` the spatial size is multiplied by ``stride``; with
    ``"valid"`` it becomes ``(h - 1) * stride + k``.
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeError("conv_transpose2d", f"input {x.shape} does not match weight {w.shape}")
    cin, cout, kh, kw = w.shape
    n, _, h, wd = x.shape
    if padding == "same":
        out_hw = (h * stride, wd * stride)
    elif padding == "valid":
        out_hw = ((h - 1) * stride + kh, (wd - 1) * stride + kw)
    else:
        raise ShapeError("conv_transpose2d", f"padding must be 'same' or 'valid', got {padding!r}")
    oh, ow, pads = _conv_geometry("conv_transpose2d", out_hw, (kh, kw), stride, padding)
    padded = (n, cout, out_hw[0] + pads[0] + pads[1], out_hw[1] + pads[2] + pads[3])
    wm = w.data.reshape(cin, -1)
    xm = x.data.reshape(n, cin, h * wd)
    out = _unpad(_col2im(wm.T @ xm, padded, kh, kw, stride, oh, ow), pads)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def backward(g):
        cols = _im2col(_pad(g, pads), kh, kw, stride, oh, ow)
        gx = (wm @ cols).reshape(x.shape)
        gw = np.einsum("nip,nkp->ik", xm, cols).reshape(w.shape)
        grads = (gx, gw)
        return grads + ((g.sum(axis=(0, 2, 3)),) if b is not None else ())

    parents = (x, w) if b is None else (x, w, b)
    return _make(np.ascontiguousarray(out), parents, backward, "conv_transpose2d")


# programs


@dataclass(frozen=True)
class Program:
    """A differentiable function of named inputs.

    ``fn`` receives one keyword argument per input (as :class:`Tensor`) and
    returns a Tensor or a mapping of named Tensors.  ``inputs`` declares the
    expected shape per name; ``None`` entries match any extent.
    """

    fn: Callable[..., Tensor | Mapping[str, Tensor]]
    inputs: Mapping[str, tuple[int | None, ...] | None] = field(default_factory=dict)
    name: str = "program"

    def check(self, values: Mapping[str, np.ndarray]) -> None:
        missing = set(self.inputs) - set(values)
        if missing:
            raise ShapeError(self.name, f"missing inputs {sorted(missing)}")
        for key, want in self.inputs.items():
            if want is None:
                continue
            got = np.shape(values[key])
            if len(got) != len(want) or any(w is not None and w != g for w, g in zip(want, got)):
                raise ShapeError(self.name, f"input {key!r} has shape {got}, expected {want}")

    def __call__(self, **kwargs):
        return self.fn(**kwargs)


def _as_program(program) -> Program:
    return program if isinstance(program, Program) else Program(program)


def forward(program, inputs: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Evaluate ``program`` without recording a graph."""
    program = _as_program(program)
    program.check(inputs)
    with no_grad():
        out = program.fn(**{k: Tensor(v) for k, v in inputs.items()})
    if isinstance(out, Tensor):
        return {"out": out.data}
    return {k: v.data for k, v in out.items()}


def value_and_grad(program, at: Mapping[str, np.ndarray], wrt: Iterable[str]) -> tuple[float, dict[str, np.ndarray]]:
    """Value of a scalar program and its exact gradient for each name in ``wrt``."""
    program = _as_program(program)
    program.check(at)
    wrt = set(wrt)
    unknown = wrt - set(at)
    if unknown:
        raise KeyError(f"gradient requested for unknown inputs {sorted(unknown)}")
    leaves = {k: Tensor(v, requires_grad=k in wrt) for k, v in at.items()}
    out = program.fn(**leaves)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ShapeError(program.name, "value_and_grad needs a scalar output")
    if out.requires_grad:
        out.backward()
    grads = {}
    for k in wrt:
        g = leaves[k].grad
        grads[k] = np.zeros_like(leaves[k].data) if g is None else g.reshape(leaves[k].shape)
    return float(out.data), grads


def finite_diff(program, at: Mapping[str, np.ndarray], h: float = 1e-3, wrt: Iterable[str] | None = None) -> dict[str, np.ndarray]:
    """Central-difference gradient estimate, one coordinate at a time."""
    if h <= 0:
        raise ValueError(f"finite-difference step must be positive, got {h}")
    program = _as_program(program)
    base = {k: np.array(v, dtype=DTYPE) for k, v in at.items()}
    names = list(base) if wrt is None else list(wrt)

    def f(values):
        out = forward(program, values)
        return float(next(iter(out.values())))

    grads = {}
    for k in names:
        x = base[k]
        g = np.zeros_like(x)
        flat, gflat = x.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(base)
            flat[i] = orig - h
            fm = f(base)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads[k] = g
    return grads

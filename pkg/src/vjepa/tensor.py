"""Dense tensors with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor`. When gradients are enabled and at
least one input requires grad, the result keeps a reference to its parents
and a closure that maps the output gradient to the input gradients. Calling
``backward`` on a scalar builds a :class:`Tape` (all reachable nodes sorted by
creation order) and walks it in reverse, so gradient accumulation happens in
a fixed order and repeated runs are bit-identical.

Broadcasting is limited to leading batch dimensions: for binary ops one shape
must be a suffix of the other.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor", "Tape", "ShapeError", "NonFiniteError",
    "tensor", "parameter", "stop_gradient", "no_grad", "grad_enabled",
    "precision", "verification", "deterministic", "get_dtype",
    "add", "sub", "mul", "scale", "matmul", "transpose", "reshape",
    "gather_rows", "concat", "slice_axis", "softmax", "layernorm", "gelu",
    "mean", "abs_sum", "square_sum", "cross_entropy", "grad_check",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class _State:
    dtype = np.float32
    grad = True
    verify = False
    deterministic = False


_state = _State()
_next_id = [0]


def _new_id() -> int:
    _next_id[0] += 1
    return _next_id[0]


def get_dtype():
    return _state.dtype


@contextlib.contextmanager
def no_grad():
    prev = _state.grad
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


def grad_enabled() -> bool:
    return _state.grad


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors."""
    prev = _state.dtype
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def verification():
    """64-bit mode with a finiteness check after every op."""
    prev = (_state.dtype, _state.verify)
    _state.dtype, _state.verify = np.float64, True
    try:
        yield
    finally:
        _state.dtype, _state.verify = prev


@contextlib.contextmanager
def deterministic(enabled: bool = True):
    """Force single-threaded BLAS so reductions run in a fixed order."""
    prev = _state.deterministic
    _state.deterministic = enabled
    if enabled:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=1):
            try:
                yield
            finally:
                _state.deterministic = prev
    else:
        try:
            yield
        finally:
            _state.deterministic = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_id", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(_state.dtype)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._id = _new_id()

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

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        Tape.from_output(self).backward(grad)

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _lift(other))


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Wrap ``data`` as a tensor in the current working precision."""
    arr = np.array(data.data if isinstance(data, Tensor) else data, dtype=_state.dtype)
    return Tensor(arr, requires_grad=requires_grad)


def parameter(data) -> Tensor:
    return tensor(data, requires_grad=True)


def stop_gradient(t: Tensor) -> Tensor:
    """Same values, no tape edge."""
    if not t.requires_grad and not t._parents:
        return t
    return Tensor(t.data, requires_grad=False, op="stop_gradient")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if _state.verify and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by op '{op}' (node {_next_id[0] + 1})")
    needs = _state.grad and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, op=op)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    return out


class Tape:
    """Reachable graph of a scalar output, in creation (topological) order."""

    def __init__(self, nodes: list[Tensor], output: Tensor):
        self.nodes = nodes
        self.output = output

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen: dict[int, Tensor] = {}
        stack = [out]
        while stack:
            node = stack.pop()
            if node._id in seen or not node.requires_grad:
                continue
            seen[node._id] = node
            stack.extend(node._parents)
        nodes = [seen[k] for k in sorted(seen)]
        return cls(nodes, out)

    def backward(self, grad=None):
        out = self.output
        if not out.requires_grad:
            raise RuntimeError("output does not require grad")
        if grad is None:
            if out.size != 1:
                raise ShapeError(f"backward: implicit gradient needs a scalar output, got shape {out.shape}")
            grad = np.ones_like(out.data)
        grads: dict[int, np.ndarray] = {out._id: np.asarray(grad, dtype=out.data.dtype)}
        for node in reversed(self.nodes):
            g = grads.pop(node._id, None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._id in grads:
                    grads[parent._id] = grads[parent._id] + pg
                else:
                    grads[parent._id] = pg


# ---------------------------------------------------------------------------
# broadcasting helpers


def _suffix_broadcast(op: str, a: Tensor, b: Tensor):
    if a.shape == b.shape:
        return
    big, small = (a, b) if a.ndim >= b.ndim else (b, a)
    if small.ndim == 0 or big.shape[big.ndim - small.ndim:] != small.shape:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _suffix_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _suffix_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_reduce_to(g, sa), -_reduce_to(g, sb)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _suffix_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return (_reduce_to(g * bd, ad.shape) if a.requires_grad else None,
                _reduce_to(g * ad, bd.shape) if b.requires_grad else None)

    return _make(ad * bd, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * a.data.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),), "scale")


_ERF_P = 0.3275911
_ERF_A = (0.254829592, -0.284496736, 1.421413741, -1.453152027, 1.061405429)


def _erf(x: np.ndarray) -> np.ndarray:
    """Exact erf in 64-bit; in 32-bit a rational/exp form with |error| < 1.5e-7."""
    if x.dtype == np.float64:
        return erf(x)
    ax = np.abs(x)
    t = 1.0 / (1.0 + x.dtype.type(_ERF_P) * ax)
    poly = x.dtype.type(_ERF_A[4])
    for c in _ERF_A[3::-1]:
        poly = poly * t + x.dtype.type(c)
    poly *= t
    np.negative(ax, out=ax)
    ax *= np.abs(x)
    np.exp(ax, out=ax)
    poly *= ax
    np.subtract(1.0, poly, out=poly)
    return np.copysign(poly, x, out=poly)


def gelu(x: Tensor) -> Tensor:
    """GELU in its erf form, x * Phi(x)."""
    xd = x.data
    cdf = _erf(xd * xd.dtype.type(1.0 / math.sqrt(2.0)))
    cdf += 1.0
    cdf *= 0.5

    def backward(g):
        pdf = xd * xd
        pdf *= -0.5
        np.exp(pdf, out=pdf)
        pdf *= xd.dtype.type(1.0 / math.sqrt(2.0 * math.pi))
        pdf *= xd
        pdf += cdf
        pdf *= g
        return (pdf,)

    return _make(xd * cdf, (x,), backward, "gelu")


# ---------------------------------------------------------------------------
# linear algebra and layout


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``(..., n, k) @ (k, m)`` or ``(..., n, k) @ (..., k, m)`` with equal leading dims."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2:
        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],))

        def backward(g):
            ga = g @ bd.T if a.requires_grad else None
            gb = None
            if b.requires_grad:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
    else:
        out = np.matmul(ad, bd)

        def backward(g):
            ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
            gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
            return ga, gb

    return _make(out, (a, b), backward, "matmul")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows along axis -2.

    ``a`` of shape ``(L, d)`` accepts an index array of any shape. ``a`` of shape
    ``(B, L, d)`` takes a ``(B, K)`` index and gathers per batch element.
    """
    idx = np.asarray(idx)
    if idx.dtype.kind not in "iu":
        raise ShapeError(f"gather_rows: integer indices required, got {idx.dtype}")
    ad = a.data
    rows = ad.shape[-2] if ad.ndim >= 2 else 0
    if idx.size and (idx.min() < 0 or idx.max() >= rows):
        raise IndexError(f"gather_rows: index out of range for {rows} rows")
    if ad.ndim == 2:
        out = ad[idx]

        def backward(g):
            ga = np.zeros_like(ad)
            np.add.at(ga, idx, g)
            return (ga,)
    elif ad.ndim == 3 and idx.ndim == 2 and idx.shape[0] == ad.shape[0]:
        out = np.take_along_axis(ad, idx[:, :, None], axis=1)

        def backward(g):
            ga = np.zeros_like(ad)
            bidx = np.broadcast_to(np.arange(ad.shape[0])[:, None], idx.shape)
            np.add.at(ga, (bidx, idx), g)
            return (ga,)
    else:
        raise ShapeError(f"gather_rows: unsupported shapes {ad.shape} and {idx.shape}")
    return _make(out, (a,), backward, "gather_rows")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors)))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = axis % a.ndim
    if not 0 <= start <= stop <= a.shape[ax]:
        raise ShapeError(f"slice: range [{start}, {stop}) invalid for axis {ax} of shape {a.shape}")
    sl = (slice(None),) * ax + (slice(start, stop),)
    shape = a.shape

    def backward(g):
        ga = np.zeros(shape, dtype=g.dtype)
        ga[sl] = g
        return (ga,)

    return _make(a.data[sl], (a,), backward, "slice")


# ---------------------------------------------------------------------------
# normalisation


def softmax(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis. ``mask`` (broadcastable, True = keep) zeroes entries exactly."""
    xd = x.data
    if mask is not None:
        xd = np.where(mask, xd, -np.inf)
    e = xd - xd.max(axis=-1, keepdims=True)
    np.exp(e, out=e)
    e /= e.sum(axis=-1, keepdims=True)
    p = e

    def backward(g):
        gp = g * p
        gp -= p * gp.sum(axis=-1, keepdims=True)
        return (gp,)

    return _make(p, (x,), backward, "softmax")


def layernorm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-6) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then optional affine."""
    xd = x.data
    d = xd.shape[-1]
    for name, p in (("gain", gain), ("bias", bias)):
        if p is not None and p.shape != (d,):
            raise ShapeError(f"layernorm: {name} shape {p.shape} does not match {xd.shape}")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * rstd
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data
    parents = [x] + [p for p in (gain, bias) if p is not None]

    def backward(g):
        gh = g * gain.data if gain is not None else g
        gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        res = [gx]
        if gain is not None:
            res.append(_reduce_to(g * xhat, (d,)))
        if bias is not None:
            res.append(_reduce_to(g, (d,)))
        return tuple(res)

    return _make(out, parents, backward, "layernorm")


# ---------------------------------------------------------------------------
# reductions


def mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    xd = x.data
    shape = xd.shape
    if axis is None:
        n = xd.size
        out = np.asarray(xd.mean(), dtype=xd.dtype)

        def backward(g):
            return (np.full(shape, g / n, dtype=xd.dtype),)
    else:
        ax = axis % xd.ndim
        n = shape[ax]
        out = xd.mean(axis=ax, keepdims=keepdims)

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, ax)
            return (np.broadcast_to(g / xd.dtype.type(n), shape).copy(),)

    return _make(out, (x,), backward, "mean")


def abs_sum(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.asarray(np.abs(xd).sum(), dtype=xd.dtype), (x,), lambda g: (g * np.sign(xd),), "abs_sum")


def square_sum(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.asarray((xd * xd).sum(), dtype=xd.dtype), (x,), lambda g: (g * 2 * xd,), "square_sum")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row-wise softmax."""
    labels = np.asarray(labels)
    ld = logits.data
    if ld.ndim != 2 or labels.shape != (ld.shape[0],):
        raise ShapeError(f"cross_entropy: incompatible shapes {ld.shape} and {labels.shape}")
    n = ld.shape[0]
    z = ld - ld.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = np.asarray(-logp[np.arange(n), labels].mean(), dtype=ld.dtype)

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    return _make(loss, (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# verification


def grad_check(f: Callable[..., Tensor], params: Iterable[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` is called with no arguments and must return a scalar built from
    ``params``; the params are perturbed in place. Relative error is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise TypeError("grad_check requires 64-bit parameters")
        p.grad = None
    out = f()
    if out.size != 1:
        raise ShapeError(f"grad_check: function output must be scalar, got shape {out.shape}")
    out.backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                up = float(f().data)
            flat[i] = orig - eps
            with no_grad():
                down = float(f().data)
            flat[i] = orig
            num = (up - down) / (2 * eps)
            a = float(analytic.reshape(-1)[i])
            worst = max(worst, abs(a - num) / max(1.0, abs(a)))
    for p in params:
        p.grad = None
    return worst

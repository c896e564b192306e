"""Dense f64 arrays with reverse-mode differentiation.

Every operation records its inputs and a vector-Jacobian product on the
implicit tape (tensors carry a creation sequence number; creation order is a
topological order of the graph). ``backward`` walks the recorded nodes in
reverse creation order with a fixed accumulation order, so two identical
forward+backward passes are bit-identical.

Scope is deliberately small: 2-d matmul, elementwise arithmetic, exp/log,
relu/gelu, axis reductions, logsumexp, concatenation/stacking, row slicing,
vector-against-matrix broadcasting, row L2 normalization, temperatured
masked log-softmax, and stop_gradient. No control-flow capture, no
higher-order derivatives.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import DegenerateInputError, GraphError, InvalidMaskError, ShapeError

_SEQ = itertools.count()

# tanh-form gaussian-error-linear coefficients
_GELU_A = 0.7978845608028654  # sqrt(2/pi)
_GELU_B = 0.044715


class Tensor:
    """A node of the differentiation tape wrapping a float64 ndarray.

    ``parents`` holds ``(tensor, vjp)`` pairs; ``vjp`` maps the incoming
    gradient to this parent's gradient contribution. Constants drop their
    parents so detached subgraphs cost nothing at backward time.
    """

    __slots__ = ("data", "grad", "name", "requires_grad", "_parents", "_seq")

    def __init__(self, data, parents=(), requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.name = name
        self.requires_grad = requires_grad or any(p.requires_grad for p, _ in parents)
        self._parents = tuple(parents) if self.requires_grad else ()
        self._seq = next(_SEQ)

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    # operator sugar; ndarrays and scalars are wrapped as constants
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), scale(self, -1.0))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        raise TypeError("tensor division only supports scalar divisors")

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def leaf(name: str, data) -> Tensor:
    """A named differentiable parameter."""
    return Tensor(data, requires_grad=True, name=name)


def const(data) -> Tensor:
    """A constant tensor that never receives gradient."""
    return Tensor(data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return Tensor(a.data + b.data, parents=((a, lambda g: g), (b, lambda g: g)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor(ad * bd, parents=((a, lambda g: g * bd), (b, lambda g: g * ad)))


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    return Tensor(a.data * s, parents=((a, lambda g: g * s),))


def add_scalar(a, s: float) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.data + float(s), parents=((a, lambda g: g),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-d operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul: inner dimensions disagree ({a.data.shape} @ {b.data.shape})"
        )
    ad, bd = a.data, b.data
    return Tensor(
        ad @ bd,
        parents=((a, lambda g: g @ bd.T), (b, lambda g: ad.T @ g)),
    )


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("transpose expects a 2-d operand")
    return Tensor(a.data.T, parents=((a, lambda g: g.T),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor(out, parents=((a, lambda g: g * out),))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return Tensor(np.log(ad), parents=((a, lambda g: g / ad),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0
    return Tensor(np.where(mask, a.data, 0.0), parents=((a, lambda g: g * mask),))


def gelu(a) -> Tensor:
    """Tanh-form gaussian-error-linear unit, 0.5*x*(1+tanh(A*(x+B*x^3)))."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_A * (x + _GELU_B * x2 * x))
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dt = (1.0 - t * t) * _GELU_A * (1.0 + 3.0 * _GELU_B * x2)
        return g * (0.5 * (1.0 + t) + 0.5 * x * dt)

    return Tensor(out, parents=((a, vjp),))


def tsum(a, axis: int | None = None) -> Tensor:
    """Sum over one axis, or over everything (axis=None -> scalar)."""
    a = as_tensor(a)
    shape = a.data.shape
    if axis is None:
        return Tensor(np.sum(a.data), parents=((a, lambda g: np.broadcast_to(g, shape).copy()),))

    def vjp(g):
        return np.broadcast_to(np.expand_dims(g, axis), shape).copy()

    return Tensor(np.sum(a.data, axis=axis), parents=((a, vjp),))


def tmean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(tsum(a, axis=axis), 1.0 / n)


def logsumexp(a, axis: int) -> Tensor:
    """Stable logsumexp along ``axis``; -inf entries contribute zero mass.

    An all-(-inf) slice yields -inf (and zero gradient there).
    """
    a = as_tensor(a)
    ad = a.data
    m = np.max(ad, axis=axis, keepdims=True)
    safe_m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(ad - safe_m)
    se = np.sum(e, axis=axis, keepdims=True)
    out = np.where(np.isfinite(m), safe_m + np.log(se), -np.inf)

    def vjp(g):
        p = e / se
        return np.expand_dims(g, axis) * p

    return Tensor(np.squeeze(out, axis=axis), parents=((a, vjp),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(k):
        lo, hi = offsets[k], offsets[k + 1]

        def vjp(g):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            return g[tuple(idx)]

        return vjp

    return Tensor(
        np.concatenate([p.data for p in parts], axis=axis),
        parents=tuple((p, make_vjp(k)) for k, p in enumerate(parts)),
    )


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]

    def make_vjp(k):
        def vjp(g):
            return np.take(g, k, axis=axis)

        return vjp

    return Tensor(
        np.stack([p.data for p in parts], axis=axis),
        parents=tuple((p, make_vjp(k)) for k, p in enumerate(parts)),
    )


def take_rows(a, lo: int, hi: int) -> Tensor:
    a = as_tensor(a)
    shape = a.data.shape

    def vjp(g):
        out = np.zeros(shape)
        out[lo:hi] = g
        return out

    return Tensor(a.data[lo:hi], parents=((a, vjp),))


def add_rowvec(mat, vec) -> Tensor:
    """Broadcast-add a length-c vector to every row of an n-by-c matrix."""
    mat, vec = as_tensor(mat), as_tensor(vec)
    if mat.data.ndim != 2 or vec.data.ndim != 1 or mat.data.shape[1] != vec.data.shape[0]:
        raise ShapeError(
            f"add_rowvec: got {mat.data.shape} and {vec.data.shape}"
        )
    return Tensor(
        mat.data + vec.data[None, :],
        parents=((mat, lambda g: g), (vec, lambda g: g.sum(axis=0))),
    )


def mul_rowvec(mat, vec) -> Tensor:
    mat, vec = as_tensor(mat), as_tensor(vec)
    if mat.data.ndim != 2 or vec.data.ndim != 1 or mat.data.shape[1] != vec.data.shape[0]:
        raise ShapeError(
            f"mul_rowvec: got {mat.data.shape} and {vec.data.shape}"
        )
    md, vd = mat.data, vec.data
    return Tensor(
        md * vd[None, :],
        parents=((mat, lambda g: g * vd[None, :]), (vec, lambda g: (g * md).sum(axis=0))),
    )


def row_l2_normalize(a) -> Tensor:
    """Scale each row of an n-by-d matrix to unit L2 norm.

    Raises DegenerateInputError for any row with norm below 1e-12 instead of
    clamping; a silent clamp would hide dead embeddings from the tests.
    """
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("row_l2_normalize expects a 2-d operand")
    norms = np.sqrt(np.sum(a.data * a.data, axis=1, keepdims=True))
    if np.any(norms < 1e-12):
        bad = int(np.argmin(norms))
        raise DegenerateInputError(f"row {bad} has near-zero L2 norm ({float(norms[bad,0]):.3e})")
    y = a.data / norms

    def vjp(g):
        return (g - y * np.sum(y * g, axis=1, keepdims=True)) / norms

    return Tensor(y, parents=((a, vjp),))


def log_softmax_rows(a, temperature: float = 1.0) -> Tensor:
    """Row-wise log-softmax of ``a / temperature``.

    -inf entries are masks: they map to -inf output (exactly zero
    probability) and are ignored by the max-subtraction. A fully masked row
    raises InvalidMaskError rather than producing NaN.
    """
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("log_softmax_rows expects a 2-d operand")
    if not temperature > 0.0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = a.data / temperature
    m = np.max(z, axis=1, keepdims=True)
    if not np.all(np.isfinite(m)):
        bad = int(np.argmax(~np.isfinite(m).ravel()))
        raise InvalidMaskError(f"row {bad} is entirely masked")
    shifted = z - m
    e = np.exp(shifted)
    se = np.sum(e, axis=1, keepdims=True)
    out = shifted - np.log(se)
    finite = np.isfinite(z)

    def vjp(g):
        p = e / se
        da = (g - p * np.sum(g, axis=1, keepdims=True)) / temperature
        return np.where(finite, da, 0.0)

    return Tensor(out, parents=((a, vjp),))


def stop_gradient(a) -> Tensor:
    """Identical forward value, exactly zero backward contribution."""
    a = as_tensor(a)
    return Tensor(a.data)


def backward(root: Tensor, leaves: Iterable[Tensor] | None = None) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of a scalar node.

    Populates ``.grad`` on every reachable tensor that requires grad and
    returns a name -> gradient map. When ``leaves`` is given, every listed
    leaf appears in the map, with an exact-zero array if no gradient reached
    it (e.g. behind stop_gradient).
    """
    if not isinstance(root, Tensor):
        raise GraphError("backward expects a Tensor recorded on the tape")
    if root.data.shape != ():
        raise ShapeError(f"backward expects a scalar node, got shape {root.data.shape}")

    nodes: dict[int, Tensor] = {}
    stack_ = [root]
    while stack_:
        t = stack_.pop()
        if t._seq in nodes:
            continue
        nodes[t._seq] = t
        for p, _ in t._parents:
            stack_.append(p)

    for t in nodes.values():
        t.grad = None
    root.grad = np.ones((), dtype=np.float64)

    for seq in sorted(nodes, reverse=True):
        t = nodes[seq]
        if t.grad is None:
            continue
        for p, vjp in t._parents:
            contrib = vjp(t.grad)
            p.grad = contrib if p.grad is None else p.grad + contrib

    out = {
        t.name: t.grad
        for t in nodes.values()
        if t.name is not None and t.requires_grad and t.grad is not None
    }
    if leaves is not None:
        for lf in leaves:
            if lf.name not in out:
                out[lf.name] = np.zeros_like(lf.data)
    return out


def finite_diff_check(
    loss_fn: Callable[[dict[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
) -> dict[str, float]:
    """Compare reverse-mode gradients against central finite differences.

    ``loss_fn`` receives a dict of fresh leaf tensors and must return a
    scalar tensor; it is re-evaluated 2*P times on perturbed copies. Returns
    the per-parameter max relative error
    |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8); empty params give an empty
    report. The finite-difference side is an independent oracle: it only
    ever sees forward values.
    """
    if not h > 0.0:
        raise ValueError("finite difference step must be positive")
    params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    leaves = {k: leaf(k, v) for k, v in params.items()}
    grads = backward(loss_fn(leaves), leaves=leaves.values())

    def eval_at(values: dict[str, np.ndarray]) -> float:
        fresh = {k: leaf(k, v) for k, v in values.items()}
        return float(loss_fn(fresh).data)

    report: dict[str, float] = {}
    for name, base in params.items():
        g_ad = grads[name]
        g_fd = np.zeros_like(base)
        flat = g_fd.reshape(-1)
        for k in range(base.size):
            bumped = base.copy().reshape(-1)
            bumped[k] += h
            hi = eval_at({**params, name: bumped.reshape(base.shape)})
            bumped[k] -= 2.0 * h
            lo = eval_at({**params, name: bumped.reshape(base.shape)})
            flat[k] = (hi - lo) / (2.0 * h)
        denom = np.maximum(np.maximum(np.abs(g_ad), np.abs(g_fd)), 1e-8)
        report[name] = float(np.max(np.abs(g_ad - g_fd) / denom)) if base.size else 0.0
    return report

"""Dense tensors with reverse-mode automatic differentiation.

Every op checks shapes explicitly. The only implicit broadcast is
scalar-times-tensor (`scale`); bias rows are added with the dedicated
`add_bias` op. Reductions accumulate in float64 and cast back to the
input dtype, so float32 training and float64 gradient checks share one
code path.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

EPS_NORM = 1e-12
EPS_LOG = 1e-12

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class ParameterError(ValueError):
    """Raised for invalid scalar hyperparameters (temperature, eps...)."""


class ContractError(RuntimeError):
    """Raised when an op's precondition on its inputs is violated."""


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A float array that may participate in the gradient graph.

    Leaves created with ``requires_grad=True`` receive ``.grad`` after
    :func:`backward`. Intermediate nodes keep a reference to their parents and
    a closure that pushes the output gradient to them.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
        self.data = np.asarray(arr, dtype=dtype, order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor) and other.shape == self.shape:
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _acc(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.dtype)
    if g.shape != t.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {t.shape}")
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _require_2d(x: Tensor, op: str) -> None:
    if x.ndim != 2:
        raise ShapeError(f"{op}: expected a 2-d tensor, got shape {x.shape}")


def _f64(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float64, copy=False)


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")

    def backward(g):
        _acc(a, g)
        _acc(b, g)

    return _node(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")

    def backward(g):
        _acc(a, g)
        _acc(b, -g)

    return _node(a.data - b.data, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")

    def backward(g):
        _acc(a, g * b.data)
        _acc(b, g * a.data)

    return _node(a.data * b.data, (a, b), backward, "mul")


def scale(x: Tensor, s) -> Tensor:
    """Multiply every element by a Python float or a scalar tensor."""
    if isinstance(s, Tensor):
        if s.data.size != 1:
            raise ShapeError(f"scale: factor must be scalar, got shape {s.shape}")
        sv = s.data.reshape(())

        def backward(g):
            _acc(x, g * sv)
            _acc(s, np.sum(_f64(g) * _f64(x.data)).reshape(s.shape))

        return _node(x.data * sv, (x, s), backward, "scale")

    sv = float(s)

    def backward_c(g):
        _acc(x, g * sv)

    return _node((x.data * sv).astype(x.dtype), (x,), backward_c, "scale")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def backward(g):
        _acc(x, g * out)

    return _node(out, (x,), backward, "exp")


def log(x: Tensor) -> Tensor:
    def backward(g):
        _acc(x, g / x.data)

    return _node(np.log(x.data), (x,), backward, "log")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xd = _f64(x.data)
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        d = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t**2) * dinner
        _acc(x, _f64(g) * d)

    return _node(out.astype(x.dtype), (x,), backward, "gelu")


# ----------------------------------------------------------------- reductions


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = np.asarray(np.sum(_f64(x.data)), dtype=x.dtype)

    def backward(g):
        _acc(x, np.full(x.shape, g, dtype=x.dtype))

    return _node(out, (x,), backward, "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(np.sum(_f64(x.data)) / n, dtype=x.dtype)

    def backward(g):
        _acc(x, np.full(x.shape, g / n, dtype=x.dtype))

    return _node(out, (x,), backward, "mean")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")

    def backward(g):
        _acc(x, g.reshape(x.shape))

    return _node(x.data.reshape(shape), (x,), backward, "reshape")


# -------------------------------------------------------------------- linear


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require_2d(a, "matmul")
    _require_2d(b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    dtype = np.result_type(a.dtype, b.dtype)
    out = (_f64(a.data) @ _f64(b.data)).astype(dtype)

    def backward(g):
        g64 = _f64(g)
        if a.requires_grad:
            _acc(a, g64 @ _f64(b.data).T)
        if b.requires_grad:
            _acc(b, _f64(a.data).T @ g64)

    return _node(out, (a, b), backward, "matmul")


def transpose(x: Tensor) -> Tensor:
    _require_2d(x, "transpose")

    def backward(g):
        _acc(x, g.T)

    return _node(np.ascontiguousarray(x.data.T), (x,), backward, "transpose")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add vector ``b`` (length n) to every row of ``x`` (m x n)."""
    _require_2d(x, "add_bias")
    if b.shape != (x.shape[1],):
        raise ShapeError(f"add_bias: bias shape {b.shape} does not fit rows of {x.shape}")

    def backward(g):
        _acc(x, g)
        if b.requires_grad:
            _acc(b, np.sum(_f64(g), axis=0))

    return _node(x.data + b.data, (x, b), backward, "add_bias")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    y = matmul(x, transpose(weight))
    return add_bias(y, bias) if bias is not None else y


# ------------------------------------------------------------------- softmax


def softmax(x: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    if not temperature > 0:
        raise ParameterError(f"softmax: temperature must be > 0, got {temperature}")
    z = _f64(x.data) / temperature
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        g64 = _f64(g)
        dz = p * (g64 - np.sum(g64 * p, axis=axis, keepdims=True))
        _acc(x, dz / temperature)

    return _node(p.astype(x.dtype), (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = _f64(x.data)
    z = z - np.max(z, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        g64 = _f64(g)
        _acc(x, g64 - p * np.sum(g64, axis=axis, keepdims=True))

    return _node(out.astype(x.dtype), (x,), backward, "log_softmax")


def cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[i, targets[i]]``.

    Probabilities are clamped to at least 1e-12 before the log; clamped
    entries pass no gradient.
    """
    _require_2d(logits, "cross_entropy")
    t = np.asarray(targets, dtype=np.int64)
    m, k = logits.shape
    if t.shape != (m,):
        raise ShapeError(f"cross_entropy: {t.shape[0] if t.ndim else 0} targets for {m} rows")
    if m and (t.min() < 0 or t.max() >= k):
        raise ContractError(f"cross_entropy: targets must lie in [0, {k})")
    z = _f64(logits.data)
    z = z - np.max(z, axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(m)
    picked = logp[rows, t]
    floor = math.log(EPS_LOG)
    clamped = picked < floor
    loss = -np.sum(np.maximum(picked, floor)) / m

    def backward(g):
        d = np.exp(logp)
        d[rows, t] -= 1.0
        d[clamped] = 0.0
        _acc(logits, np.asarray(g).item() * d / m)

    return _node(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


def l2_normalize_rows(x: Tensor, eps: float = EPS_NORM) -> Tensor:
    """Divide each row by ``max(||row||, eps)``."""
    _require_2d(x, "l2_normalize_rows")
    xd = _f64(x.data)
    norms = np.sqrt(np.sum(xd * xd, axis=1, keepdims=True))
    denom = np.maximum(norms, eps)
    y = xd / denom
    active = norms >= eps

    def backward(g):
        g64 = _f64(g)
        # inside the guard the denominator is constant
        dot = np.sum(g64 * y, axis=1, keepdims=True)
        dx = np.where(active, (g64 - y * dot) / denom, g64 / denom)
        _acc(x, dx)

    return _node(y.astype(x.dtype), (x,), backward, "l2_normalize_rows")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    _require_2d(x, "layer_norm")
    d = x.shape[1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} vs width {d}")
    xd = _f64(x.data)
    mu = np.mean(xd, axis=1, keepdims=True)
    xc = xd - mu
    var = np.mean(xc * xc, axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gm = _f64(gamma.data)
    out = xhat * gm + _f64(beta.data)

    def backward(g):
        g64 = _f64(g)
        if gamma.requires_grad:
            _acc(gamma, np.sum(g64 * xhat, axis=0))
        if beta.requires_grad:
            _acc(beta, np.sum(g64, axis=0))
        if x.requires_grad:
            gx = g64 * gm
            dx = rstd * (gx - gx.mean(axis=1, keepdims=True) - xhat * (gx * xhat).mean(axis=1, keepdims=True))
            _acc(x, dx)

    return _node(out.astype(x.dtype), (x, gamma, beta), backward, "layer_norm")


# ------------------------------------------------------------ row indexing


def gather_rows(x: Tensor, index: Sequence[int]) -> Tensor:
    _require_2d(x, "gather_rows")
    idx = np.asarray(index, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ContractError(f"gather_rows: index out of range for {x.shape[0]} rows")

    def backward(g):
        gx = np.zeros(x.shape, dtype=np.float64)
        np.add.at(gx, idx, _f64(g))
        _acc(x, gx)

    return _node(x.data[idx], (x,), backward, "gather_rows")


def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Look up rows of an embedding table by token id."""
    out = gather_rows(table, ids)
    out._op = "embedding"
    return out


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ContractError("concat_rows: nothing to concatenate")
    for p in parts:
        _require_2d(p, "concat_rows")
        if p.shape[1] != parts[0].shape[1]:
            raise ShapeError(f"concat_rows: widths {parts[0].shape} and {p.shape} differ")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            _acc(p, g[lo:hi])

    out = np.concatenate([p.data for p in parts], axis=0)
    return _node(out, tuple(parts), backward, "concat_rows")


def mean_rows(x: Tensor, index_sets: Sequence[Iterable[int]]) -> Tensor:
    """Row ``l`` of the result is the mean of ``x`` over ``index_sets[l]``."""
    _require_2d(x, "mean_rows")
    sets = [np.asarray(sorted(set(s)), dtype=np.int64) for s in index_sets]
    n = x.shape[0]
    for s in sets:
        if s.size == 0:
            raise ContractError("mean_rows: empty index set")
        if s.min() < 0 or s.max() >= n:
            raise ContractError(f"mean_rows: index out of range for {n} rows")
    xd = _f64(x.data)
    out = np.stack([xd[s].sum(axis=0) / s.size for s in sets]) if sets else np.zeros((0, x.shape[1]))

    def backward(g):
        g64 = _f64(g)
        gx = np.zeros(x.shape, dtype=np.float64)
        for row, s in enumerate(sets):
            gx[s] += g64[row] / s.size
        _acc(x, gx)

    return _node(out.astype(x.dtype), (x,), backward, "mean_rows")


def scatter_add_rows(x: Tensor, index: Sequence[int], num_rows: int) -> Tensor:
    """``out[i] = sum_j [index[j] == i] * x[j]``, reduced serially in row order."""
    _require_2d(x, "scatter_add_rows")
    idx = np.asarray(index, dtype=np.int64).reshape(-1)
    if idx.shape[0] != x.shape[0]:
        raise ShapeError(f"scatter_add_rows: {idx.shape[0]} indices for {x.shape[0]} rows")
    if idx.size and (idx.min() < 0 or idx.max() >= num_rows):
        raise ContractError(f"scatter_add_rows: index out of range [0, {num_rows})")
    out = np.zeros((num_rows, x.shape[1]), dtype=np.float64)
    np.add.at(out, idx, _f64(x.data))

    def backward(g):
        _acc(x, _f64(g)[idx])

    return _node(out.astype(x.dtype), (x,), backward, "scatter_add_rows")


# ----------------------------------------------------------------- attention


def attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    lengths: Sequence[int],
    num_heads: int,
    causal: bool = True,
) -> Tensor:
    """Scaled dot-product attention over packed sequences.

    ``q``, ``k``, ``v`` are (N x D) with the rows of ``len(lengths)``
    sequences stacked back to back. Tokens only attend within their own
    sequence, and with ``causal`` only to positions at or before their own.
    """
    for t in (q, k, v):
        _require_2d(t, "attention")
    _same_shape(q, k, "attention")
    _same_shape(q, v, "attention")
    n, width = q.shape
    lengths = [int(x) for x in lengths]
    if int(np.sum(lengths)) != n or any(x <= 0 for x in lengths):
        raise ShapeError(f"attention: lengths {lengths} do not partition {n} rows")
    if width % num_heads:
        raise ShapeError(f"attention: width {width} not divisible by {num_heads} heads")
    b, tmax, dh = len(lengths), max(lengths), width // num_heads
    scale_ = 1.0 / math.sqrt(dh)

    seq = np.repeat(np.arange(b), lengths)
    pos = np.concatenate([np.arange(x) for x in lengths])

    def pack(a: np.ndarray) -> np.ndarray:
        buf = np.zeros((b, tmax, width), dtype=np.float64)
        buf[seq, pos] = a
        return buf.reshape(b, tmax, num_heads, dh).transpose(0, 2, 1, 3)

    def unpack(a: np.ndarray) -> np.ndarray:
        return a.transpose(0, 2, 1, 3).reshape(b, tmax, width)[seq, pos]

    Q, K, V = pack(_f64(q.data)), pack(_f64(k.data)), pack(_f64(v.data))
    valid = np.arange(tmax)[None, :] < np.asarray(lengths)[:, None]
    allowed = np.broadcast_to(valid[:, None, None, :], (b, 1, tmax, tmax))
    if causal:
        allowed = allowed & np.tril(np.ones((tmax, tmax), dtype=bool))[None, None]
    scores = np.einsum("bhid,bhjd->bhij", Q, K) * scale_
    scores = np.where(allowed, scores, -np.inf)
    scores = scores - np.max(scores, axis=-1, keepdims=True)
    P = np.where(allowed, np.exp(scores), 0.0)
    P = P / np.sum(P, axis=-1, keepdims=True)
    O = np.einsum("bhij,bhjd->bhid", P, V)

    def backward(g):
        dO = pack(_f64(g))
        dV = np.einsum("bhij,bhid->bhjd", P, dO)
        dP = np.einsum("bhid,bhjd->bhij", dO, V)
        dS = P * (dP - np.sum(dP * P, axis=-1, keepdims=True)) * scale_
        dQ = np.einsum("bhij,bhjd->bhid", dS, K)
        dK = np.einsum("bhij,bhid->bhjd", dS, Q)
        _acc(q, unpack(dQ))
        _acc(k, unpack(dK))
        _acc(v, unpack(dV))

    return _node(unpack(O).astype(q.dtype), (q, k, v), backward, "attention")


# ------------------------------------------------------------------ backward


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Populate ``.grad`` on every reachable leaf that requires grad.

    Returns a map from leaf tensor to its gradient. Gradients accumulate into
    existing ``.grad`` arrays; call :func:`zero_grad` between steps.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward: loss does not depend on any tensor requiring grad")
    order = _topological(loss)
    leaves: list[Tensor] = []
    loss.grad = np.ones(loss.shape, dtype=loss.dtype)
    for node in reversed(order):
        if node.is_leaf:
            leaves.append(node)
            continue
        g = node.grad
        if g is None:
            continue
        node._backward(g)
        node.grad = None
    return {leaf: leaf.grad for leaf in leaves}


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ------------------------------------------------------------- grad checking


def numerical_gradient(f: Callable[[list[np.ndarray]], float], arrays: list[np.ndarray], h: float = 1e-3) -> list[np.ndarray]:
    """Central differences of ``f`` with respect to every array, in float64."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(arrays)
            flat[i] = orig - h
            fm = f(arrays)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-2) -> float:
    """Largest per-coordinate ``|a - n| / max(|a|, |n|, floor)``."""
    a, n = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def check_gradients(
    fn: Callable[..., Tensor],
    arrays: Sequence[np.ndarray],
    h: float = 1e-3,
) -> float:
    """Compare analytic gradients of ``fn(*tensors)`` against central differences.

    ``fn`` receives float64 leaf tensors and must return a scalar tensor.
    Returns the worst relative error over all input coordinates.
    """
    leaves = [Tensor(np.asarray(a, np.float64), requires_grad=True) for a in arrays]
    out = fn(*leaves)
    backward(out)
    analytic = [leaf.grad if leaf.grad is not None else np.zeros(leaf.shape) for leaf in leaves]

    def f(arrs):
        with no_grad():
            return fn(*[Tensor(a, dtype=np.float64) for a in arrs]).data.item()

    numeric = numerical_gradient(f, list(arrays), h=h)
    return max(max_relative_error(a, n) for a, n in zip(analytic, numeric))

"""Reverse-mode automatic differentiation over dense float64 arrays.

A small engine in the micrograd tradition: every operation records its parent
tensors and a backward closure, and calling ``backward()`` on a scalar walks
the recorded graph in reverse topological order, accumulating gradients on the
leaves that asked for them.  numpy supplies storage and vectorized arithmetic;
all differentiation logic lives here.

Everything is float64 and checked finite on creation.  Tensors are immutable
once built.  ``Parameter.data`` is the single sanctioned mutation point
(optimizer updates and finite-difference probes); parameters must not be
mutated while a forward evaluation is in flight.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteError, ParameterError, ShapeError

Array = np.ndarray


class Tensor:
    """A dense float64 array plus autodiff bookkeeping.

    ``requires_grad`` is inherited from parents, so graphs only grow along
    paths that can reach a Parameter.  Constant inputs stay parent-free and
    cost nothing at backward time.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple = (), _backward: Callable | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor of shape {arr.shape}")
        self.data = arr
        self.grad: Array | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        # Parents are only kept when a gradient can flow through this node.
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A constant copy that shares no graph history."""
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph traversal --------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable ``requires_grad`` leaf.

        ``self`` must be scalar.  Gradients add onto whatever is already in
        ``.grad``; call :func:`zero_grads` between steps.
        """
        if self.data.size != 1:
            raise ShapeError("backward() expects a scalar loss")
        if not self.requires_grad:
            return
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return add(self, neg(_coerce(other)))

    def __rsub__(self, other):
        return add(_coerce(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __truediv__(self, other):
        return div(self, _coerce(other))

    def __rtruediv__(self, other):
        return div(_coerce(other), self)

    def __matmul__(self, other):
        return matmul(self, _coerce(other))

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None) -> "Tensor":
        denom = self.data.size if axis is None else self.data.shape[axis]
        return tensor_sum(self, axis=axis) / float(denom)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape if len(shape) > 1 else shape[0])


class Parameter(Tensor):
    """A named leaf tensor whose ``data`` the optimizer may update in place."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name}, shape={self.data.shape})"


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """Wrap raw data as a graph-free constant."""
    return Tensor(x)


def _accumulate(t: Tensor, g: Array) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: Array, shape: tuple) -> Array:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return Tensor(out_data, _parents=(a, b), _backward=bw)


def neg(a: Tensor) -> Tensor:
    def bw(g):
        _accumulate(a, -g)

    return Tensor(-a.data, _parents=(a,), _backward=bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return Tensor(out_data, _parents=(a, b), _backward=bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data / b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return Tensor(out_data, _parents=(a, b), _backward=bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def bw(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return Tensor(out_data, _parents=(a, b), _backward=bw)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose expects a 2-D tensor")

    def bw(g):
        _accumulate(a, g.T)

    return Tensor(a.data.T, _parents=(a,), _backward=bw)


def reshape(a: Tensor, shape) -> Tensor:
    def bw(g):
        _accumulate(a, g.reshape(a.data.shape))

    return Tensor(a.data.reshape(shape), _parents=(a,), _backward=bw)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(gg, a.data.shape).copy())

    return Tensor(out_data, _parents=(a,), _backward=bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g):
        _accumulate(a, g * mask)

    return Tensor(np.where(mask, a.data, 0.0), _parents=(a,), _backward=bw)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bw(g):
        _accumulate(a, g * out_data)

    return Tensor(out_data, _parents=(a,), _backward=bw)


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def bw(g):
        _accumulate(a, g / a.data)

    return Tensor(out_data, _parents=(a,), _backward=bw)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def bw(g):
        _accumulate(a, g * 0.5 / out_data)

    return Tensor(out_data, _parents=(a,), _backward=bw)


def sigmoid(a: Tensor) -> Tensor:
    # 1 / (1 + exp(-x)), evaluated stably on both tails.
    out_data = np.empty_like(a.data)
    pos = a.data >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def bw(g):
        _accumulate(a, g * out_data * (1.0 - out_data))

    return Tensor(out_data, _parents=(a,), _backward=bw)


def softplus(a: Tensor) -> Tensor:
    out_data = np.logaddexp(0.0, a.data)

    def bw(g):
        _accumulate(a, g / (1.0 + np.exp(-a.data)))

    return Tensor(out_data, _parents=(a,), _backward=bw)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    take_a = a.data >= b.data  # ties route to the first operand
    out_data = np.where(take_a, a.data, b.data)

    def bw(g):
        _accumulate(a, _unbroadcast(g * take_a, a.data.shape))
        _accumulate(b, _unbroadcast(g * ~take_a, b.data.shape))

    return Tensor(out_data, _parents=(a, b), _backward=bw)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    take_a = a.data <= b.data
    out_data = np.where(take_a, a.data, b.data)

    def bw(g):
        _accumulate(a, _unbroadcast(g * take_a, a.data.shape))
        _accumulate(b, _unbroadcast(g * ~take_a, b.data.shape))

    return Tensor(out_data, _parents=(a, b), _backward=bw)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax, stabilized by per-row max subtraction.

    Each output row is nonnegative and sums to 1 for any finite input,
    including rows with entries of magnitude ~1e3 and beyond.
    """
    if a.data.ndim != 2:
        raise ShapeError("softmax_rows expects a 2-D tensor")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        inner = (g * s).sum(axis=1, keepdims=True)
        _accumulate(a, s * (g - inner))

    return Tensor(s, _parents=(a,), _backward=bw)


def log_softmax_rows(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("log_softmax_rows expects a 2-D tensor")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out_data = shifted - lse
    s = np.exp(out_data)

    def bw(g):
        _accumulate(a, g - s * g.sum(axis=1, keepdims=True))

    return Tensor(out_data, _parents=(a,), _backward=bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row to zero mean / unit variance, then scale and shift."""
    if x.data.ndim != 2:
        raise ShapeError("layer_norm expects a 2-D tensor")
    d = x.data.shape[1]
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def bw(g):
        dxhat = g * gain.data
        dvar = (dxhat * xc).sum(axis=1, keepdims=True) * (-0.5) * inv ** 3
        dmu = -(dxhat * inv).sum(axis=1, keepdims=True)
        dx = dxhat * inv + dvar * 2.0 * xc / d + dmu / d
        _accumulate(x, dx)
        _accumulate(gain, (g * xhat).sum(axis=0))
        _accumulate(bias, g.sum(axis=0))

    return Tensor(out_data, _parents=(x, gain, bias), _backward=bw)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [p if p.data.ndim == 2 else reshape(p, (1, -1)) for p in parts]
    widths = {p.data.shape[1] for p in parts}
    if len(widths) != 1:
        raise ShapeError(f"concat_rows column mismatch: {sorted(widths)}")
    out_data = np.concatenate([p.data for p in parts], axis=0)
    offsets = np.cumsum([0] + [p.data.shape[0] for p in parts])

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accumulate(p, g[lo:hi])

    return Tensor(out_data, _parents=tuple(parts), _backward=bw)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if any(p.data.ndim != 2 for p in parts):
        raise ShapeError("concat_cols expects 2-D tensors")
    heights = {p.data.shape[0] for p in parts}
    if len(heights) != 1:
        raise ShapeError(f"concat_cols row mismatch: {sorted(heights)}")
    out_data = np.concatenate([p.data for p in parts], axis=1)
    offsets = np.cumsum([0] + [p.data.shape[1] for p in parts])

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accumulate(p, g[:, lo:hi])

    return Tensor(out_data, _parents=tuple(parts), _backward=bw)


def take_rows(a: Tensor, idx) -> Tensor:
    """Gather rows by integer index; duplicate indices accumulate on backward."""
    if a.data.ndim != 2:
        raise ShapeError("take_rows expects a 2-D tensor")
    ii = np.asarray(idx, dtype=np.intp)

    def bw(g):
        da = np.zeros_like(a.data)
        np.add.at(da, ii, g)
        _accumulate(a, da)

    return Tensor(a.data[ii], _parents=(a,), _backward=bw)


def slice_cols(a: Tensor, lo: int, hi: int) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("slice_cols expects a 2-D tensor")

    def bw(g):
        da = np.zeros_like(a.data)
        da[:, lo:hi] = g
        _accumulate(a, da)

    return Tensor(a.data[:, lo:hi], _parents=(a,), _backward=bw)


def shift_rows(a: Tensor, offset: int) -> Tensor:
    """Row shift with zero fill: out[i] = a[i + offset] where defined."""
    if a.data.ndim != 2:
        raise ShapeError("shift_rows expects a 2-D tensor")
    n = a.data.shape[0]
    out_data = np.zeros_like(a.data)
    if offset >= 0:
        if offset < n:
            out_data[: n - offset] = a.data[offset:]
    else:
        if -offset < n:
            out_data[-offset:] = a.data[: n + offset]

    def bw(g):
        da = np.zeros_like(a.data)
        if offset >= 0:
            if offset < n:
                da[offset:] = g[: n - offset]
        else:
            if -offset < n:
                da[: n + offset] = g[-offset:]
        _accumulate(a, da)

    return Tensor(out_data, _parents=(a,), _backward=bw)


def tile_rows(v: Tensor, n: int) -> Tensor:
    """Repeat a vector as n identical rows."""
    if v.data.ndim != 1:
        raise ShapeError("tile_rows expects a 1-D tensor")

    def bw(g):
        _accumulate(v, g.sum(axis=0))

    return Tensor(np.tile(v.data, (n, 1)), _parents=(v,), _backward=bw)


def as_row(v: Tensor) -> Tensor:
    return v if v.data.ndim == 2 else reshape(v, (1, -1))


def mean_rows(a: Tensor) -> Tensor:
    """Arithmetic mean over the row axis: (N, D) -> (D,)."""
    if a.data.ndim != 2:
        raise ShapeError("mean_rows expects a 2-D tensor")
    return tensor_sum(a, axis=0) / float(a.data.shape[0])


# ---------------------------------------------------------------------------
# optimizer and verification harness
# ---------------------------------------------------------------------------

def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


class Adam:
    """Adam with a linear learning-rate warmup.

    The effective rate ramps from 0 at step 0 to the base rate at
    ``warmup_steps``, then stays constant.  Moments live per parameter and
    match parameter shapes; missing gradients count as zero.
    """

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3,
                 warmup_steps: int = 0, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr < 0 or warmup_steps < 0:
            raise ParameterError("lr and warmup_steps must be nonnegative")
        self.params = list(params)
        self.lr = lr
        self.warmup_steps = warmup_steps
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def effective_lr(self, step: int | None = None) -> float:
        s = self.step_count if step is None else step
        if self.warmup_steps > 0 and s < self.warmup_steps:
            return self.lr * (s / self.warmup_steps)
        return self.lr

    def zero_grads(self) -> None:
        zero_grads(self.params)

    def step(self) -> None:
        lr_eff = self.effective_lr()
        t = self.step_count + 1
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            mhat = m / (1.0 - self.beta1 ** t)
            vhat = v / (1.0 - self.beta2 ** t)
            p.data -= lr_eff * mhat / (np.sqrt(vhat) + self.eps)
        self.step_count += 1


def finite_diff_check(f: Callable[[], Tensor], param: Parameter,
                      eps: float = 1e-5) -> float:
    """Compare the analytic gradient of ``f`` w.r.t. ``param`` with central
    differences.

    ``f`` must rebuild its graph from ``param.data`` on every call and return
    a scalar Tensor.  Returns the max over coordinates of
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1)``.
    """
    if eps <= 0:
        raise ParameterError("eps must be positive")
    zero_grads([param])
    out = f()
    if out.data.size != 1:
        raise ShapeError("finite_diff_check expects a scalar-valued function")
    out.backward()
    analytic = (param.grad if param.grad is not None else np.zeros_like(param.data)).copy()

    numeric = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = f().item()
        flat[i] = orig - eps
        f_minus = f().item()
        flat[i] = orig
        nflat[i] = (f_plus - f_minus) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return float((np.abs(analytic - numeric) / denom).max())

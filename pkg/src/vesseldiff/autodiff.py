"""Minimal dense-tensor engine with tape-based reverse-mode differentiation.

Tensors wrap float64 numpy arrays (at most 4 axes). Operations executed while
a Tape is attached record a backward rule; ``Tape.backward`` replays the rules
in reverse order, accumulating gradients into every tensor reachable from the
loss. Tensors without a tape act as constants.

Broadcasting is deliberately restricted: elementwise ops accept equal shapes
or a shape that is a suffix of the other (scalar included). Anything else
must go through an explicit ``expand``.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence, Union

import numpy as np

MAX_AXES = 4

Arrayish = Union["Tensor", np.ndarray, float, int, list]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


class Tensor:
    """A float64 array with an optional gradient buffer and tape membership."""

    __slots__ = ("data", "grad", "tape", "node_id")

    def __init__(self, data: Arrayish, tape: Optional["Tape"] = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > MAX_AXES:
            raise ShapeError(f"tensors support at most {MAX_AXES} axes, got shape {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.tape = tape
        self.node_id: Optional[int] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, tape={'yes' if self.tape else 'no'})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of operations for one reverse-mode pass.

    Backward walks the record once, strictly in reverse topological order
    (which is creation order), invoking every rule exactly once.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._leaves: list[Tensor] = []
        self._consumed = False

    def __len__(self) -> int:
        return len(self._nodes)

    def leaf(self, data: Arrayish) -> Tensor:
        """Register a differentiable leaf (a parameter or checked input)."""
        t = data if isinstance(data, Tensor) else Tensor(data)
        t.tape = self
        self._leaves.append(t)
        return t

    def record(self, out: Tensor, rule: Callable[[np.ndarray], None]) -> None:
        out.node_id = len(self._nodes)
        self._nodes.append((out, rule))

    def backward(self, loss: Tensor) -> int:
        """Accumulate d(loss)/d(tensor) into .grad; returns rule invocations.

        A tape is single-use: the record (and the closures holding every
        intermediate buffer) is released afterwards, which breaks the
        tensor/tape reference cycles that would otherwise pile up until a
        cyclic garbage-collection pass.
        """
        if self._consumed:
            raise ValueError("tape already consumed by a backward pass")
        if loss.tape is not self:
            raise ValueError("loss tensor does not belong to this tape")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        invocations = 0
        for out, rule in reversed(self._nodes):
            g = out.grad if out.grad is not None else np.zeros_like(out.data)
            rule(g)
            invocations += 1
        for leaf in self._leaves:
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
        self._consumed = True
        self._nodes.clear()
        self._leaves.clear()
        return invocations


def _as_tensor(x: Arrayish) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _joint_tape(*tensors: Tensor) -> Optional[Tape]:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and tape is not t.tape:
                raise ValueError("operands belong to different tapes")
            tape = t.tape
    return tape


def _accumulate(t: Tensor, g: np.ndarray, fresh: bool = False) -> None:
    """Add g into t's gradient.

    `fresh` promises g is a newly allocated buffer nothing else references;
    only then may it be adopted without a defensive copy (views and shared
    upstream buffers would otherwise alias gradients of other tensors).
    """
    if t.tape is None:
        return
    if t.grad is None:
        if fresh and isinstance(g, np.ndarray) and g.base is None \
                and g.shape == t.data.shape:
            t.grad = g
        else:
            t.grad = np.array(np.broadcast_to(g, t.data.shape), dtype=np.float64)
    else:
        t.grad += g


def _suffix_compatible(a: tuple, b: tuple) -> bool:
    small, big = (a, b) if len(a) <= len(b) else (b, a)
    return big[len(big) - len(small):] == small


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over the leading axes added by suffix broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _elementwise(op_name, a, b, fwd, bwd_a, bwd_b):
    a, b = _as_tensor(a), _as_tensor(b)
    if not _suffix_compatible(a.shape, b.shape):
        raise ShapeError(f"{op_name}: shapes {a.shape} and {b.shape} are not suffix-compatible")
    tape = _joint_tape(a, b)
    out = Tensor(fwd(a.data, b.data), tape)
    if tape is not None:
        def rule(g, a=a, b=b):
            # The lambdas either pass g through (identity) or allocate; the
            # identity check is what decides if adoption is safe.
            ga = _reduce_to(bwd_a(g, a.data, b.data), a.shape)
            _accumulate(a, ga, fresh=ga is not g)
            gb = _reduce_to(bwd_b(g, a.data, b.data), b.shape)
            _accumulate(b, gb, fresh=gb is not g)
        tape.record(out, rule)
    return out


def add(a: Arrayish, b: Arrayish) -> Tensor:
    return _elementwise("add", a, b, lambda x, y: x + y,
                        lambda g, x, y: g, lambda g, x, y: g)


def sub(a: Arrayish, b: Arrayish) -> Tensor:
    return _elementwise("sub", a, b, lambda x, y: x - y,
                        lambda g, x, y: g, lambda g, x, y: -g)


def mul(a: Arrayish, b: Arrayish) -> Tensor:
    return _elementwise("mul", a, b, lambda x, y: x * y,
                        lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a: Arrayish, b: Arrayish) -> Tensor:
    return _elementwise("div", a, b, lambda x, y: x / y,
                        lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def matmul(a: Arrayish, b: Arrayish) -> Tensor:
    """Matrix product over the last two axes; leading axes must match or be absent."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands need >= 2 axes, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner axes differ for {a.shape} @ {b.shape}")
    lead_a, lead_b = a.shape[:-2], b.shape[:-2]
    if lead_a != lead_b and lead_a != () and lead_b != ():
        raise ShapeError(f"matmul: leading axes differ for {a.shape} @ {b.shape}")
    tape = _joint_tape(a, b)
    if b.ndim == 2 and a.ndim > 2:
        # Weight multiply: flatten the leading axes into one GEMM instead of
        # a stack of tiny ones (and avoid the huge batched gradient buffer).
        k, mdim = b.shape
        flat = a.data.reshape(-1, k)
        out = Tensor((flat @ b.data).reshape(a.shape[:-1] + (mdim,)), tape)
        if tape is not None:
            def rule(g, a=a, b=b, flat=flat):
                gf = np.ascontiguousarray(g).reshape(-1, b.shape[1])
                ga = gf @ b.data.T
                ga.shape = a.shape
                _accumulate(a, ga, fresh=True)
                _accumulate(b, flat.T @ gf, fresh=True)
            tape.record(out, rule)
        return out
    out = Tensor(a.data @ b.data, tape)
    if tape is not None:
        def rule(g, a=a, b=b):
            ga = g @ np.swapaxes(b.data, -1, -2)
            gb = np.swapaxes(a.data, -1, -2) @ g
            _accumulate(a, _reduce_to(ga, a.shape), fresh=True)
            _accumulate(b, _reduce_to(gb, b.shape), fresh=True)
        tape.record(out, rule)
    return out


def transpose(x: Arrayish, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    x = _as_tensor(x)
    if axes is None:
        axes = list(range(x.ndim - 2)) + [x.ndim - 1, x.ndim - 2]
    axes = tuple(axes)
    out = Tensor(np.transpose(x.data, axes), x.tape)
    if x.tape is not None:
        inv = tuple(np.argsort(axes))
        def rule(g, x=x, inv=inv):
            _accumulate(x, np.transpose(g, inv))
        x.tape.record(out, rule)
    return out


def reshape(x: Arrayish, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.reshape(shape), x.tape)
    if x.tape is not None:
        def rule(g, x=x):
            _accumulate(x, g.reshape(x.shape))
        x.tape.record(out, rule)
    return out


def expand(x: Arrayish, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast to a target shape (the only non-suffix broadcast)."""
    x = _as_tensor(x)
    shape = tuple(shape)
    try:
        data = np.broadcast_to(x.data, shape).copy()
    except ValueError as e:
        raise ShapeError(f"expand: cannot broadcast {x.shape} to {shape}") from e
    out = Tensor(data, x.tape)
    if x.tape is not None:
        extra = len(shape) - x.ndim
        ones = tuple(i + extra for i, d in enumerate(x.shape) if d == 1 and shape[i + extra] != 1)
        def rule(g, x=x, extra=extra, ones=ones):
            gg = g
            if extra:
                gg = gg.sum(axis=tuple(range(extra)))
            if ones:
                gg = gg.sum(axis=ones, keepdims=True)
            _accumulate(x, gg, fresh=gg is not g)
        x.tape.record(out, rule)
    return out


def concat(parts: Sequence[Arrayish], axis: int = -1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    tape = _joint_tape(*parts)
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis), tape)
    if tape is not None:
        sizes = [p.shape[axis] for p in parts]
        offsets = np.cumsum([0] + sizes)
        def rule(g, parts=parts, offsets=offsets, axis=axis):
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accumulate(p, g[tuple(idx)])
        tape.record(out, rule)
    return out


def slice_axis(x: Arrayish, axis: int, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = Tensor(x.data[idx], x.tape)
    if x.tape is not None:
        def rule(g, x=x, idx=idx):
            gx = np.zeros_like(x.data)
            gx[idx] = g
            _accumulate(x, gx, fresh=True)
        x.tape.record(out, rule)
    return out


def _reduction(x, axis, keepdims, fwd, scale):
    x = _as_tensor(x)
    out = Tensor(fwd(x.data, axis=axis, keepdims=keepdims), x.tape)
    if x.tape is not None:
        def rule(g, x=x, axis=axis, keepdims=keepdims):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accumulate(x, np.broadcast_to(g, x.shape) * scale(x.data, axis),
                        fresh=True)
        x.tape.record(out, rule)
    return out


def tsum(x: Arrayish, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    return _reduction(x, axis, keepdims, np.sum, lambda d, ax: 1.0)


def tmean(x: Arrayish, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    def scale(d, ax):
        n = d.size if ax is None else d.shape[ax]
        return 1.0 / n
    return _reduction(x, axis, keepdims, np.mean, scale)


def relu(x: Arrayish) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.maximum(x.data, 0.0), x.tape)
    if x.tape is not None:
        def rule(g, x=x):
            _accumulate(x, g * (x.data > 0.0), fresh=True)
        x.tape.record(out, rule)
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Arrayish) -> Tensor:
    """Tanh-form gelu; smooth, so finite differences agree with the tape."""
    x = _as_tensor(x)
    d = x.data
    inner = d * d
    inner *= 0.044715
    inner += 1.0
    inner *= d
    inner *= _GELU_C
    t = np.tanh(inner)
    val = t + 1.0
    val *= d
    val *= 0.5
    out = Tensor(val, x.tape)
    if x.tape is not None:
        def rule(g, x=x, t=t, d=d):
            deriv = d * d
            deriv *= 3 * 0.044715
            deriv += 1.0
            deriv *= _GELU_C * 0.5 * d
            deriv *= 1.0 - t * t
            deriv += 0.5 * (1.0 + t)
            deriv *= g
            _accumulate(x, deriv, fresh=True)
        x.tape.record(out, rule)
    return out


def softmax(x: Arrayish) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y, x.tape)
    if x.tape is not None:
        def rule(g, x=x, y=y):
            _accumulate(x, y * (g - (g * y).sum(axis=-1, keepdims=True)), fresh=True)
        x.tape.record(out, rule)
    return out


def log_softmax(x: Arrayish) -> Tensor:
    """log(softmax(x)) over the last axis, computed stably; the backward rule
    (g - sum(g) * softmax) stays informative even for saturated logits."""
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = Tensor(z - lse, x.tape)
    if x.tape is not None:
        y = np.exp(z - lse)
        def rule(g, x=x, y=y):
            _accumulate(x, g - g.sum(axis=-1, keepdims=True) * y, fresh=True)
        x.tape.record(out, rule)
    return out


def tlog(x: Arrayish) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data <= 0.0):
        raise ValueError("log: input must be strictly positive (clamp first)")
    out = Tensor(np.log(x.data), x.tape)
    if x.tape is not None:
        def rule(g, x=x):
            _accumulate(x, g / x.data, fresh=True)
        x.tape.record(out, rule)
    return out


def clamp_min(x: Arrayish, floor: float) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.maximum(x.data, floor), x.tape)
    if x.tape is not None:
        def rule(g, x=x, floor=floor):
            _accumulate(x, g * (x.data > floor), fresh=True)
        x.tape.record(out, rule)
    return out


def layer_norm(x: Arrayish, gain: Arrayish, bias: Arrayish, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({n},), got {gain.shape}/{bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    tape = _joint_tape(x, gain, bias)
    out = Tensor(xhat * gain.data + bias.data, tape)
    if tape is not None:
        def rule(g, x=x, gain=gain, bias=bias, xhat=xhat, inv=inv):
            lead = tuple(range(g.ndim - 1))
            _accumulate(gain, (g * xhat).sum(axis=lead), fresh=True)
            _accumulate(bias, g.sum(axis=lead), fresh=True)
            gxhat = g * gain.data
            gx = inv * (gxhat
                        - gxhat.mean(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
            _accumulate(x, gx, fresh=True)
        tape.record(out, rule)
    return out


def embedding_lookup(table: Arrayish, indices: np.ndarray) -> Tensor:
    """Gather rows of a (vocab, dim) table by an integer index array."""
    table = _as_tensor(table)
    if table.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-axis, got {table.shape}")
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("embedding_lookup: indices must be integers")
    out = Tensor(table.data[idx], table.tape)
    if table.tape is not None:
        def rule(g, table=table, idx=idx):
            gt = np.zeros_like(table.data)
            np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
            _accumulate(table, gt, fresh=True)
        table.tape.record(out, rule)
    return out


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor,
                         bias: Optional[Tensor] = None) -> Tensor:
    """softmax(q kᵀ / sqrt(d) [+ bias]) v over the last two axes."""
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention: query/key dims differ, {q.shape} vs {k.shape}")
    scores = mul(matmul(q, transpose(k)), 1.0 / math.sqrt(q.shape[-1]))
    if bias is not None:
        scores = add(scores, bias)
    return matmul(softmax(scores), v)


def gumbel_softmax(logits: Arrayish, temperature: float, hard: bool = True,
                   rng: Optional[np.random.Generator] = None,
                   noise: Optional[np.ndarray] = None) -> Tensor:
    """Relaxed one-hot sample over the last axis.

    With hard=True the forward value is the exact one-hot argmax of the
    perturbed logits while gradients follow the relaxed softmax
    (straight-through). Pass ``noise`` (standard Gumbel, same shape) to make
    the draw reproducible without an rng.
    """
    logits = _as_tensor(logits)
    if temperature <= 0.0:
        raise ValueError("gumbel_softmax: temperature must be positive")
    if not np.all(np.isfinite(logits.data)):
        raise ValueError("gumbel_softmax: logits must be finite")
    if noise is None:
        if rng is None:
            raise ValueError("gumbel_softmax: provide rng or noise")
        noise = rng.gumbel(size=logits.shape)
    soft = softmax(mul(add(logits, Tensor(noise)), 1.0 / temperature))
    if not hard:
        return soft
    y = soft.data
    onehot = np.zeros_like(y)
    np.put_along_axis(onehot, y.argmax(axis=-1, keepdims=True), 1.0, axis=-1)
    return add(Tensor(onehot - y), soft)


def grad_check(f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-5) -> float:
    """Max relative disagreement between tape and central-difference gradients.

    f must be scalar-valued and deterministic (freeze any sampling before
    calling). Error is |g_ad - g_fd| / max(1, |g_ad|, |g_fd|) per coordinate.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"grad_check: eps {eps} outside [1e-7, 1e-3]")
    x = np.asarray(x, dtype=np.float64)
    tape = Tape()
    xt = tape.leaf(x.copy())
    out = f(xt)
    if out.data.size != 1:
        raise ShapeError(f"grad_check: f must be scalar-valued, got shape {out.shape}")
    tape.backward(out)
    g_ad = xt.grad.reshape(-1).copy()

    flat = x.reshape(-1)
    g_fd = np.empty_like(flat)
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = eps
        hi = f(Tensor((flat + bump).reshape(x.shape))).item()
        lo = f(Tensor((flat - bump).reshape(x.shape))).item()
        g_fd[i] = (hi - lo) / (2.0 * eps)
    if not (np.all(np.isfinite(g_ad)) and np.all(np.isfinite(g_fd))):
        raise ValueError("grad_check: non-finite gradient encountered")
    denom = np.maximum(1.0, np.maximum(np.abs(g_ad), np.abs(g_fd)))
    return float(np.abs(g_ad - g_fd).max(initial=0.0) if flat.size == 0
                 else (np.abs(g_ad - g_fd) / denom).max())

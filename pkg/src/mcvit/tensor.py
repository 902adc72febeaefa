"""Dense float64 tensors with reverse-mode automatic differentiation.

Define-by-run: ops execute eagerly on numpy buffers and, while a tape is
active, append a backward rule per op. The tape is rebuilt for every forward
pass, which is what lets the token graph change shape with each sampled
channel subset. Broadcasting is deliberately narrow: an operand may only
broadcast when its shape matches the trailing dimensions of the other
(bias-add and row-wise constants); anything else is a shape error.

Single-threaded per tape. Tensors that carry no grad state may be shared
read-only across threads. Scratch buffers can be recycled across steps via
`BufferPool`/`use_pool`, which matters on machines where large mallocs are
returned to the OS between batches.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

from . import _kernels as K
from .errors import DegenerateInputError, ParameterError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "tape",
    "no_grad",
    "BufferPool",
    "use_pool",
    "backward",
    "grad_check",
    "matmul",
    "linear",
    "add",
    "sub",
    "mul",
    "scale",
    "affine",
    "abs_",
    "sum_all",
    "mean_all",
    "reshape",
    "transpose_last2",
    "softmax_temp",
    "row_softmax",
    "l2_normalize",
    "rows_l2_normalize",
    "layernorm",
    "gelu",
    "cross_entropy",
    "gather_rows",
    "prepend_row",
    "take_token0",
    "masked_sum_last2",
    "heads_split",
    "heads_split_t",
    "heads_merge",
]

_NORM_EPS = 1e-12
_node_counter = itertools.count()


class BufferPool:
    """Shape-keyed recycling of large scratch buffers.

    Training allocates the same few dozen array shapes every step; letting
    glibc hand them back to the OS costs a page-fault storm per batch. A pool
    lives for a whole run, hands out buffers inside a `use_pool` scope, and
    reclaims them all when the scope closes. Nothing created inside a scope
    may be kept past it except data explicitly copied out.
    """

    def __init__(self):
        self._free: dict[tuple[int, ...], list[np.ndarray]] = {}
        self._lent: list[np.ndarray] = []

    def take(self, shape: tuple[int, ...]) -> np.ndarray:
        stack = self._free.get(shape)
        buf = stack.pop() if stack else np.empty(shape)
        self._lent.append(buf)
        return buf

    def reset(self) -> None:
        for buf in self._lent:
            self._free.setdefault(buf.shape, []).append(buf)
        self._lent.clear()


_active_pool: BufferPool | None = None


class use_pool:
    """Scope during which ops draw scratch buffers from `pool`; the pool is
    reset on exit, so tensors made inside must not outlive the scope."""

    def __init__(self, pool: BufferPool):
        self.pool = pool

    def __enter__(self):
        global _active_pool
        self._prev = _active_pool
        _active_pool = self.pool
        return self.pool

    def __exit__(self, *exc):
        global _active_pool
        self.pool.reset()
        _active_pool = self._prev
        return False


def _empty(shape) -> np.ndarray:
    if _active_pool is not None:
        return _active_pool.take(tuple(shape))
    return np.empty(shape)


def _copy_of(a: np.ndarray) -> np.ndarray:
    out = _empty(a.shape)
    np.copyto(out, a)
    return out


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_counter)

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
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of ops; inputs always precede consumers."""

    def __init__(self):
        self.ops: list[tuple[int, tuple[int, ...], Callable[[], None]]] = []

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable[[], None]) -> None:
        self.ops.append((out.node_id, tuple(t.node_id for t in inputs), backward_fn))


_active_tape: Tape | None = None


class tape:
    """Context manager installing a fresh tape (one per forward pass)."""

    def __init__(self):
        self.tape = Tape()

    def __enter__(self) -> Tape:
        global _active_tape
        self._prev = _active_tape
        _active_tape = self.tape
        return self.tape

    def __exit__(self, *exc):
        global _active_tape
        _active_tape = self._prev
        return False


class no_grad:
    """Context manager disabling recording (evaluation mode)."""

    def __enter__(self):
        global _active_tape
        self._prev = _active_tape
        _active_tape = None

    def __exit__(self, *exc):
        global _active_tape
        _active_tape = self._prev
        return False


def _out(data: np.ndarray, inputs: Sequence[Tensor], backward_fn=None) -> Tensor:
    req = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=req)
    if req and _active_tape is not None and backward_fn is not None:
        _active_tape.record(out, inputs, backward_fn)
    return out


def _accum(t: Tensor, g: np.ndarray, own: bool = True) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if own else _copy_of(g)
    else:
        t.grad += g


def backward(loss: Tensor, tape_obj: Tape | None = None) -> None:
    """Accumulate grads of `loss` into every reachable requires_grad tensor.

    Repeated calls without zeroing add up. Raises when `loss` is not scalar.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    t = tape_obj if tape_obj is not None else _active_tape
    if t is None:
        raise ParameterError("backward() called with no active tape")
    if loss.grad is None:
        loss.grad = np.ones_like(loss.data)
    else:
        loss.grad += np.ones_like(loss.data)
    for _, _, fn in reversed(t.ops):
        fn()


# ---------------------------------------------------------------------------
# elementwise / shape ops


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    if b.ndim < a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise ShapeError(f"shapes {a.shape} and {b.shape} do not align (trailing-broadcast only)")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b; b may broadcast across leading axes of a."""
    _check_broadcast(a, b)

    def bwd():
        g = out.grad
        if g is None:
            return
        _accum(a, g, own=False)
        _accum(b, _reduce_to(g, b.shape), own=(b.shape != a.shape))

    out = _out(np.add(a.data, b.data, out=_empty(a.shape)), (a, b), bwd)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)

    def bwd():
        g = out.grad
        if g is None:
            return
        _accum(a, g, own=False)
        _accum(b, -_reduce_to(g, b.shape))

    out = _out(np.subtract(a.data, b.data, out=_empty(a.shape)), (a, b), bwd)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)

    def bwd():
        g = out.grad
        if g is None:
            return
        _accum(a, np.multiply(g, b.data, out=_empty(a.shape)))
        _accum(b, _reduce_to(g * a.data, b.shape))

    out = _out(np.multiply(a.data, b.data, out=_empty(a.shape)), (a, b), bwd)
    return out


def scale(a: Tensor, s: float) -> Tensor:
    def bwd():
        if out.grad is not None:
            _accum(a, np.multiply(out.grad, s, out=_empty(a.shape)))

    out = _out(np.multiply(a.data, s, out=_empty(a.shape)), (a,), bwd)
    return out


def affine(a: Tensor, m: float, c: float) -> Tensor:
    """m * a + c, elementwise with scalars."""

    def bwd():
        if out.grad is not None:
            _accum(a, np.multiply(out.grad, m, out=_empty(a.shape)))

    y = np.multiply(a.data, m, out=_empty(a.shape))
    y += c
    out = _out(y, (a,), bwd)
    return out


def abs_(a: Tensor) -> Tensor:
    """|a|; subgradient 0 at exactly 0."""
    sign = np.sign(a.data, out=_empty(a.shape))

    def bwd():
        if out.grad is not None:
            _accum(a, np.multiply(out.grad, sign, out=_empty(a.shape)))

    out = _out(np.abs(a.data, out=_empty(a.shape)), (a,), bwd)
    return out


def sum_all(a: Tensor) -> Tensor:
    def bwd():
        if out.grad is not None:
            g = _empty(a.shape)
            g.fill(out.grad.item())
            _accum(a, g)

    out = _out(np.array(a.data.sum()), (a,), bwd)
    return out


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def bwd():
        if out.grad is not None:
            g = _empty(a.shape)
            g.fill(out.grad.item() / n)
            _accum(a, g)

    out = _out(np.array(a.data.mean()), (a,), bwd)
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def bwd():
        if out.grad is not None:
            _accum(a, out.grad.reshape(a.shape), own=False)

    out = _out(a.data.reshape(shape), (a,), bwd)
    return out


def transpose_last2(a: Tensor) -> Tensor:
    """Swap the two trailing axes (for batched Gram matrices)."""
    if a.ndim < 2:
        raise ShapeError(f"transpose_last2 needs 2-D+ input, got shape {a.shape}")
    y = _empty(a.shape[:-2] + (a.shape[-1], a.shape[-2]))
    np.copyto(y, a.data.swapaxes(-1, -2))

    def bwd():
        if out.grad is not None:
            dx = _empty(a.shape)
            np.copyto(dx, out.grad.swapaxes(-1, -2))
            _accum(a, dx)

    out = _out(y, (a,), bwd)
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supports (m,k)@(k,n), stacked (...,m,k)@(k,n), and batched with equal
    leading dimensions. Raises a shape error naming both operand shapes.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-D+ operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions disagree: {a.shape} vs {b.shape}")
    out_shape = np.broadcast_shapes(a.shape[:-2], b.shape[:-2]) + (a.shape[-2], b.shape[-1])

    def bwd():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            da = np.matmul(g, b.data.swapaxes(-1, -2), out=_empty(g.shape[:-1] + (a.shape[-1],)))
            _accum(a, _reduce_to(da, a.shape), own=(da.shape == a.shape))
        if b.requires_grad:
            db_shape = np.broadcast_shapes(a.shape[:-2], g.shape[:-2]) + (a.shape[-1], g.shape[-1])
            db = np.matmul(a.data.swapaxes(-1, -2), g, out=_empty(db_shape))
            _accum(b, _reduce_to(db, b.shape), own=(db.shape == b.shape))

    out = _out(np.matmul(a.data, b.data, out=_empty(out_shape)), (a, b), bwd)
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w.T + b with w stored (out_features, in_features)."""
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    x2 = x.data.reshape(-1, x.shape[-1])
    y = np.matmul(x2, w.data.T, out=_empty((x2.shape[0], w.shape[0])))
    if b is not None:
        y += b.data
    y = y.reshape(x.shape[:-1] + (w.shape[0],))
    inputs = (x, w) if b is None else (x, w, b)

    def bwd():
        g = out.grad
        if g is None:
            return
        g2 = g.reshape(-1, w.shape[0])
        if x.requires_grad:
            dx = np.matmul(g2, w.data, out=_empty(x2.shape))
            _accum(x, dx.reshape(x.shape))
        if w.requires_grad:
            _accum(w, g2.T @ x2)
        if b is not None and b.requires_grad:
            _accum(b, g2.sum(axis=0))

    out = _out(y, inputs, bwd)
    return out


# ---------------------------------------------------------------------------
# normalizations and nonlinearities


def softmax_temp(x: Tensor, t: float) -> Tensor:
    """Temperature softmax of a vector, computed with max-subtraction."""
    if t <= 0:
        raise ParameterError(f"softmax temperature must be positive, got {t}")
    if x.ndim != 1 or x.size < 1:
        raise ShapeError(f"softmax_temp expects a non-empty vector, got shape {x.shape}")
    z = x.data / t
    z = z - z.max()
    e = np.exp(z)
    p = e / e.sum()

    def bwd():
        g = out.grad
        if g is None:
            return
        _accum(x, (p * (g - np.dot(p, g))) / t)

    out = _out(p, (x,), bwd)
    return out


def row_softmax(x: Tensor) -> Tensor:
    """Stable softmax along the last axis (attention rows)."""
    shifted = _empty(x.shape)
    x2 = x.data.reshape(-1, x.shape[-1])
    s2 = shifted.reshape(-1, x.shape[-1])
    K.rows_shift_max(x2, s2)
    np.exp(s2, out=s2)
    K.rows_normalize_sum(s2)

    def bwd():
        g = out.grad
        if g is None:
            return
        dx = _empty(x.shape)
        K.softmax_backward(s2, g.reshape(s2.shape), dx.reshape(s2.shape))
        _accum(x, dx)

    out = _out(shifted, (x,), bwd)
    return out


def l2_normalize(v: Tensor) -> Tensor:
    """v / ||v||_2 for a vector; rejects near-zero norm (eps 1e-12)."""
    if v.ndim != 1:
        raise ShapeError(f"l2_normalize expects a vector, got shape {v.shape}")
    return _l2norm_nd(v)


def rows_l2_normalize(x: Tensor) -> Tensor:
    """Normalize along the last axis; every row must have norm > 1e-12."""
    return _l2norm_nd(x)


def _l2norm_nd(x: Tensor) -> Tensor:
    x2 = x.data.reshape(-1, x.shape[-1])
    norms = np.linalg.norm(x2, axis=1)
    if norms.min() <= _NORM_EPS:
        raise DegenerateInputError(
            f"cannot L2-normalize: a row has norm {norms.min():.3e} <= {_NORM_EPS}"
        )
    y = _empty(x.shape)
    inv = _empty((x2.shape[0],))
    K.rows_l2norm_forward(x2, y.reshape(x2.shape), inv)

    def bwd():
        g = out.grad
        if g is None:
            return
        dx = _empty(x.shape)
        K.rows_l2norm_backward(g.reshape(x2.shape), y.reshape(x2.shape), inv, dx.reshape(x2.shape))
        _accum(x, dx)

    out = _out(y, (x,), bwd)
    return out


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis."""
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layernorm params must be ({n},), got {gamma.shape}/{beta.shape}")
    x2 = x.data.reshape(-1, n)
    y = _empty(x.shape)
    xhat = _empty(x2.shape)
    rstd = _empty((x2.shape[0],))
    K.ln_forward(x2, gamma.data, beta.data, y.reshape(x2.shape), xhat, rstd, eps)

    def bwd():
        g = out.grad
        if g is None:
            return
        dx = _empty(x2.shape)
        dgamma = np.zeros(n)
        dbeta = np.zeros(n)
        K.ln_backward(g.reshape(x2.shape), xhat, rstd, gamma.data, dx, dgamma, dbeta)
        _accum(x, dx.reshape(x.shape))
        _accum(gamma, dgamma)
        _accum(beta, dbeta)

    out = _out(y, (x, gamma, beta), bwd)
    return out


def gelu(x: Tensor) -> Tensor:
    """GELU via the tanh approximation."""
    flat = x.data.reshape(-1)
    u = _empty(flat.shape)
    K.gelu_inner_arg(flat, u)
    np.tanh(u, out=u)
    y = _empty(flat.shape)
    K.gelu_finish(flat, u, y)

    def bwd():
        g = out.grad
        if g is None:
            return
        dx = _empty(flat.shape)
        K.gelu_backward(flat, u, g.reshape(-1), dx)
        _accum(x, dx.reshape(x.shape))

    out = _out(y.reshape(x.shape), (x,), bwd)
    return out


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under row softmax."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (N, classes) logits, got {logits.shape}")
    lab = np.ascontiguousarray(labels, dtype=np.int64)
    if lab.shape != (logits.shape[0],):
        raise ShapeError(f"labels {lab.shape} do not match logits {logits.shape}")
    probs = _empty(logits.shape)
    loss = K.cross_entropy_forward(logits.data, lab, probs)

    def bwd():
        g = out.grad
        if g is None:
            return
        dl = _empty(logits.shape)
        K.cross_entropy_backward(probs, lab, g.item() / lab.shape[0], dl)
        _accum(logits, dl)

    out = _out(np.array(loss), (logits,), bwd)
    return out


# ---------------------------------------------------------------------------
# indexing / assembly ops for token sequences


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of a 2-D tensor; backward scatter-adds."""
    if x.ndim != 2:
        raise ShapeError(f"gather_rows expects a matrix, got shape {x.shape}")
    idx = np.asarray(idx, dtype=np.intp)

    def bwd():
        g = out.grad
        if g is None:
            return
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, g)
        _accum(x, dx)

    out = _out(x.data[idx], (x,), bwd)
    return out


def prepend_row(vec: Tensor, x: Tensor) -> Tensor:
    """Prefix a shared vector as token 0 of every sequence in (N, T, D)."""
    if x.ndim != 3 or vec.ndim != 1 or vec.shape[0] != x.shape[2]:
        raise ShapeError(f"prepend_row: got vector {vec.shape} and batch {x.shape}")
    n, t, d = x.shape
    y = _empty((n, t + 1, d))
    y[:, 0, :] = vec.data
    y[:, 1:, :] = x.data

    def bwd():
        g = out.grad
        if g is None:
            return
        _accum(vec, g[:, 0, :].sum(axis=0))
        _accum(x, g[:, 1:, :], own=False)

    out = _out(y, (vec, x), bwd)
    return out


def take_token0(x: Tensor) -> Tensor:
    """Extract token 0 of every sequence: (N, T, D) -> (N, D)."""
    if x.ndim != 3:
        raise ShapeError(f"take_token0 expects (N, T, D), got {x.shape}")

    def bwd():
        g = out.grad
        if g is None:
            return
        dx = _empty(x.shape)
        dx.fill(0.0)
        dx[:, 0, :] = g
        _accum(x, dx)

    out = _out(_copy_of(x.data[:, 0, :]), (x,), bwd)
    return out


def masked_sum_last2(x: Tensor, mask: np.ndarray) -> Tensor:
    """sum(x * mask) over the trailing two axes: (B, T, T) -> (B,)."""
    if x.ndim != 3 or mask.shape != x.shape[1:]:
        raise ShapeError(f"masked_sum_last2: got {x.shape} with mask {mask.shape}")
    y = np.einsum("bij,ij->b", x.data, mask)

    def bwd():
        g = out.grad
        if g is None:
            return
        dx = np.multiply(mask, g[:, None, None], out=_empty(x.shape))
        _accum(x, dx)

    out = _out(y, (x,), bwd)
    return out


# ---------------------------------------------------------------------------
# multi-head reshuffles (fused copy kernels)


def heads_split(x: Tensor, nheads: int, scale_by: float = 1.0) -> Tensor:
    """(N, T, D) -> (N, H, T, D/H), optionally scaling values."""
    n, t, d = x.shape
    y = _empty((n, nheads, t, d // nheads))
    K.heads_split_scale(x.data, y, nheads, scale_by)

    def bwd():
        g = out.grad
        if g is None:
            return
        dx = _empty((n, t, d))
        K.heads_merge_grad_scale(np.ascontiguousarray(g), dx, nheads, scale_by)
        _accum(x, dx)

    out = _out(y, (x,), bwd)
    return out


def heads_split_t(x: Tensor, nheads: int) -> Tensor:
    """(N, T, D) -> (N, H, D/H, T): key layout for attention scores."""
    n, t, d = x.shape
    y = _empty((n, nheads, d // nheads, t))
    K.heads_split_transpose(x.data, y, nheads)

    def bwd():
        g = out.grad
        if g is None:
            return
        dx = _empty((n, t, d))
        K.heads_untranspose_grad(np.ascontiguousarray(g), dx, nheads)
        _accum(x, dx)

    out = _out(y, (x,), bwd)
    return out


def heads_merge(x: Tensor) -> Tensor:
    """(N, H, T, dh) -> (N, T, H*dh)."""
    n, h, t, dh = x.shape
    y = _empty((n, t, h * dh))
    K.heads_merge(x.data, y)

    def bwd():
        g = out.grad
        if g is None:
            return
        dx = _empty((n, h, t, dh))
        K.heads_split_scale(np.ascontiguousarray(g), dx, h, 1.0)
        _accum(x, dx)

    out = _out(y, (x,), bwd)
    return out


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(
    f: Callable[[Sequence[Tensor]], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    max_coords_per_param: int = 8,
    seed: int = 0,
) -> float:
    """Compare analytic grads of a scalar function against central differences.

    Returns the max over sampled coordinates of
    |analytic - cd| / max(|analytic|, |cd|, 1e-8). `f` must be deterministic
    for fixed params and build its graph on the tape it is called under.
    """
    rng = np.random.default_rng(seed)
    for p in params:
        p.zero_grad()
    with tape() as t:
        loss = f(params)
        backward(loss, t)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        aflat = analytic.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords_per_param else rng.choice(n, size=max_coords_per_param, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            with no_grad():
                fp = f(params).item()
            flat[c] = orig - eps
            with no_grad():
                fm = f(params).item()
            flat[c] = orig
            cd = (fp - fm) / (2 * eps)
            err = abs(aflat[c] - cd) / max(abs(aflat[c]), abs(cd), 1e-8)
            worst = max(worst, err)
    return worst

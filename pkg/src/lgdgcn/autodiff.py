"""Small reverse-mode differentiation engine over float64 numpy arrays.

Every operation returns a new :class:`Value` that remembers its parents and a
closure which pushes the output gradient back onto them. ``backward`` walks the
graph once in reverse topological order.

Most operations work on 2-D matrices. A few (``reshape``, the batched
log-determinant) also accept stacked arrays, which keeps the per-node losses
vectorised.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from . import _kernels


class ShapeError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


class Value:
    """A node in the expression graph."""

    __slots__ = ("data", "_grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 parents: Sequence["Value"] = (), backward_fn: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self._grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def grad(self) -> np.ndarray:
        # allocated on first use; most intermediate nodes never need one
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, g) -> None:
        self._grad = g

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Value{label}(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _lift(other))


def constant(data) -> Value:
    return Value(data, requires_grad=False)


def parameter(data, name: str | None = None) -> Value:
    return Value(data, requires_grad=True, name=name)


def _lift(x) -> Value:
    return x if isinstance(x, Value) else constant(x)


def _node(data, parents: Sequence[Value], backward_fn: Callable) -> Value:
    needs = any(p.requires_grad for p in parents)
    return Value(data, requires_grad=needs, parents=parents if needs else (),
                 backward_fn=backward_fn if needs else None)


def _acc(v: Value, g) -> None:
    if v.requires_grad:
        if v._grad is None:
            v._grad = np.broadcast_to(np.asarray(g, dtype=np.float64), v.data.shape).copy()
        else:
            v._grad += g


def backward(loss: Value) -> None:
    """Accumulate d(loss)/d(v) into ``v.grad`` for every reachable trainable ``v``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order: list[Value] = []
    seen: set[int] = set()
    stack: list[tuple[Value, bool]] = [(loss, False)]
    while stack:
        v, done = stack.pop()
        if done:
            order.append(v)
            continue
        if id(v) in seen:
            continue
        seen.add(id(v))
        stack.append((v, True))
        for p in v.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    # intermediate gradients are local to this pass; leaves keep accumulating
    for v in order:
        if v.backward_fn is not None:
            v.grad = None
    if not loss.requires_grad:
        return
    loss.grad = loss.grad + np.ones_like(loss.data)
    for v in reversed(order):
        if v.backward_fn is not None:
            v.backward_fn(v.grad)


# ---------------------------------------------------------------- elementwise

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a: Value, b: Value) -> Value:
    out = a.data + b.data

    def bw(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))

    return _node(out, (a, b), bw)


def sub(a: Value, b: Value) -> Value:
    out = a.data - b.data

    def bw(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, -_unbroadcast(g, b.shape))

    return _node(out, (a, b), bw)


def mul(a: Value, b: Value) -> Value:
    out = a.data * b.data

    def bw(g):
        _acc(a, _unbroadcast(g * b.data, a.shape))
        _acc(b, _unbroadcast(g * a.data, b.shape))

    return _node(out, (a, b), bw)


def scale(a: Value, c: float) -> Value:
    return _node(a.data * c, (a,), lambda g: _acc(a, g * c))


def exp(a: Value) -> Value:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: _acc(a, g * out))


def log(a: Value) -> Value:
    return _node(np.log(a.data), (a,), lambda g: _acc(a, g / a.data))


def relu(x: Value) -> Value:
    pos = x.data > 0
    return _node(np.where(pos, x.data, 0.0), (x,), lambda g: _acc(x, g * pos))


def softplus(x: Value) -> Value:
    out = np.logaddexp(0.0, x.data)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _node(out, (x,), lambda g: _acc(x, g * sig))


def sum(x: Value, axis: int | None = None) -> Value:  # noqa: A001
    if axis is None:
        out = np.array([[x.data.sum()]])
        return _node(out, (x,), lambda g: _acc(x, np.broadcast_to(g.reshape(()), x.shape)))
    out = x.data.sum(axis=axis, keepdims=True)
    return _node(out, (x,), lambda g: _acc(x, np.broadcast_to(g, x.shape)))


def mean(x: Value, axis: int | None = None) -> Value:
    n = x.data.size if axis is None else x.data.shape[axis]
    return scale(sum(x, axis), 1.0 / n)


def dropout_apply(x: Value, mask: np.ndarray, p: float) -> Value:
    """Inverted dropout with an externally drawn keep-mask (``True`` = keep)."""
    keep = np.asarray(mask, dtype=np.float64) / (1.0 - p)
    return _node(x.data * keep, (x,), lambda g: _acc(x, g * keep))


# ------------------------------------------------------------------- shapes

def reshape(x: Value, shape: tuple[int, ...]) -> Value:
    return _node(x.data.reshape(shape), (x,), lambda g: _acc(x, g.reshape(x.shape)))


def concat_cols(xs: Sequence[Value]) -> Value:
    widths = np.cumsum([0] + [x.shape[1] for x in xs])
    out = np.concatenate([x.data for x in xs], axis=1)

    def bw(g):
        for x, lo, hi in zip(xs, widths[:-1], widths[1:]):
            _acc(x, g[:, lo:hi])

    return _node(out, tuple(xs), bw)


def slice_cols(x: Value, lo: int, hi: int) -> Value:
    def bw(g):
        if x.requires_grad:
            x.grad[:, lo:hi] += g

    return _node(x.data[:, lo:hi].copy(), (x,), bw)


def take_rows(x: Value, idx) -> Value:
    """Row gather. Backward scatters with ``np.add.at`` so repeated indices add up."""
    idx = np.asarray(idx)

    def bw(g):
        if x.requires_grad:
            np.add.at(x.grad, idx, g)

    return _node(x.data[idx], (x,), bw)


# --------------------------------------------------------------- linear algebra

def matmul(a: Value, b: Value) -> Value:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def bw(g):
        _acc(a, g @ b.data.T)
        _acc(b, a.data.T @ g)

    return _node(a.data @ b.data, (a, b), bw)


def sparse_matmul(s: sp.spmatrix, x: Value) -> Value:
    """Constant sparse matrix times a dense Value."""
    if s.shape[1] != x.shape[0]:
        raise ShapeError(f"sparse product shape mismatch: {s.shape} x {x.shape}")
    st = s.T.tocsr()
    return _node(np.asarray(s @ x.data), (x,), lambda g: _acc(x, np.asarray(st @ g)))


def l2_normalize_rows(x: Value, eps: float = 1e-12) -> Value:
    norms = np.sqrt(np.einsum("ij,ij->i", x.data, x.data))[:, None]
    denom = np.maximum(norms, eps)
    out = x.data / denom
    clamped = norms < eps

    def bw(g):
        # (I - y y^T) g / ||x|| on normal rows, plain g / eps on clamped ones
        proj = np.einsum("ij,ij->i", g, out)[:, None]
        gx = np.where(clamped, g, g - out * proj) / denom
        _acc(x, gx)

    return _node(out, (x,), bw)


def softmax_rows(x: Value) -> Value:
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        _acc(x, out * (g - np.einsum("ij,ij->i", g, out)[:, None]))

    return _node(out, (x,), bw)


def log_softmax_rows(x: Value) -> Value:
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def bw(g):
        _acc(x, g - sm * g.sum(axis=1, keepdims=True))

    return _node(out, (x,), bw)


@dataclass
class SpdFactor:
    """Cholesky factorisation of a symmetric positive-definite matrix."""

    matrix: np.ndarray
    cholesky: np.ndarray = field(init=False)
    log_det: float = field(init=False)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if not np.all(np.isfinite(self.matrix)):
            raise NumericalError("matrix has non-finite entries")
        try:
            self.cholesky = np.linalg.cholesky(self.matrix)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"matrix is not positive definite: {exc}") from None
        self.log_det = float(2.0 * np.log(np.diag(self.cholesky)).sum())

    @classmethod
    def from_covariance(cls, sigma: np.ndarray, ridge: float = 1e-4) -> "SpdFactor":
        sigma = np.asarray(sigma, dtype=np.float64)
        sym = 0.5 * (sigma + sigma.T)
        return cls(sym + ridge * np.eye(sym.shape[0]))

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return scipy.linalg.cho_solve((self.cholesky, True), rhs)

    def whiten(self, rhs: np.ndarray) -> np.ndarray:
        """L^{-1} rhs for column vectors stacked in ``rhs``."""
        return scipy.linalg.solve_triangular(self.cholesky, rhs, lower=True)


def mahalanobis_rows(z: Value, mu: np.ndarray, factor: SpdFactor) -> Value:
    """Squared Mahalanobis distance of every row of ``z``; returns N x 1."""
    mu = np.asarray(mu, dtype=np.float64).reshape(-1)
    if z.data.ndim != 2 or z.shape[1] != mu.shape[0] or factor.dim != mu.shape[0]:
        raise ShapeError(f"mahalanobis shape mismatch: z {z.shape}, mu {mu.shape}, "
                         f"sigma {factor.matrix.shape}")
    diff = z.data - mu
    white = factor.whiten(diff.T)
    out = np.einsum("ij,ij->j", white, white)[:, None]

    def bw(g):
        _acc(z, 2.0 * g * factor.solve(diff.T).T)

    return _node(out, (z,), bw)


def mahalanobis(z: Value, mu: np.ndarray, factor: SpdFactor) -> Value:
    if z.data.ndim != 2 or z.shape[0] != 1:
        raise ShapeError(f"mahalanobis expects a 1 x d row, got {z.shape}")
    return mahalanobis_rows(z, mu, factor)


def gaussian_logpdf_rows(z: Value, mu: np.ndarray, factor: SpdFactor) -> Value:
    d = factor.dim
    const = -0.5 * d * np.log(2.0 * np.pi) - 0.5 * factor.log_det
    return scale(mahalanobis_rows(z, mu, factor), -0.5) + const


def gaussian_pdf_rows(z: Value, mu: np.ndarray, factor: SpdFactor) -> Value:
    return exp(gaussian_logpdf_rows(z, mu, factor))


def gaussian_pdf(z: Value, mu: np.ndarray, factor: SpdFactor) -> Value:
    if z.data.ndim != 2 or z.shape[0] != 1:
        raise ShapeError(f"gaussian_pdf expects a 1 x d row, got {z.shape}")
    return gaussian_pdf_rows(z, mu, factor)


def logdet_gram(f: Value, eps: float = 1e-8) -> Value:
    """log det(f + eps I) of a symmetric PSD matrix, or of each matrix in a stack.

    A single M x M input gives a 1 x 1 result; a stack B x M x M gives B x 1.
    """
    data = f.data
    single = data.ndim == 2
    stack = data[None] if single else data
    m = stack.shape[-1]
    if stack.shape[-2] != m:
        raise ShapeError(f"logdet_gram needs square matrices, got {data.shape}")
    reg = stack + eps * np.eye(m)
    try:
        chol = np.linalg.cholesky(reg)
    except np.linalg.LinAlgError:
        for b, mat in enumerate(reg):
            for k in range(1, m + 1):
                if np.linalg.eigvalsh(mat[:k, :k]).min() <= 0:
                    raise NumericalError(
                        f"cholesky failed for matrix {b}: leading minor {k} "
                        "is not positive definite") from None
        raise NumericalError("cholesky failed") from None
    logdets = 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(axis=-1)
    out = logdets.reshape(1, 1) if single else logdets[:, None]

    def bw(g):
        inv = np.linalg.inv(reg)
        inv = 0.5 * (inv + np.swapaxes(inv, -1, -2))
        gi = g.reshape(-1)[:, None, None] * inv
        _acc(f, gi[0] if single else gi)

    return _node(out, (f,), bw)


def batched_gram(x: Value) -> Value:
    """x^T x for every matrix of a B x K x M stack, giving B x M x M."""
    out = np.einsum("bkm,bkn->bmn", x.data, x.data)

    def bw(g):
        _acc(x, np.einsum("bkn,bmn->bkm", x.data, g + np.swapaxes(g, 1, 2)))

    return _node(out, (x,), bw)


# ------------------------------------------------------------- edge operations

class EdgeIndex:
    """Directed edge list ``src -> dst``."""

    def __init__(self, n: int, src, dst):
        self.n = n
        self.src = np.ascontiguousarray(src, dtype=np.int64)
        self.dst = np.ascontiguousarray(dst, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.src)


def edge_block_dot(z: Value, c: Value, edges: EdgeIndex, blocks: int) -> Value:
    """Per-edge, per-block inner products <z[src_e, block m], c[dst_e, block m]>.

    ``z`` and ``c`` are N x (blocks * width); the result is E x blocks.
    """
    zd = np.ascontiguousarray(z.data)
    cd = np.ascontiguousarray(c.data)
    out = _kernels.block_dot(zd, cd, edges.src, edges.dst, blocks)

    def bw(g):
        gz, gc = _kernels.block_dot_grad(np.ascontiguousarray(g), zd, cd, edges.src, edges.dst,
                                         blocks, z.requires_grad, c.requires_grad)
        _acc(z, gz)
        _acc(c, gc)

    return _node(out, (z, c), bw)


def edge_block_scatter(p: Value, z: Value, edges: EdgeIndex) -> Value:
    """out[u, block m] = sum over edges e with dst_e = u of p[e, m] * z[src_e, block m]."""
    pd = np.ascontiguousarray(p.data)
    zd = np.ascontiguousarray(z.data)
    out = _kernels.block_scatter(pd, zd, edges.src, edges.dst)

    def bw(g):
        gp, gz = _kernels.block_scatter_grad(np.ascontiguousarray(g), pd, zd, edges.src, edges.dst,
                                             p.requires_grad, z.requires_grad)
        _acc(p, gp)
        _acc(z, gz)

    return _node(out, (p, z), bw)


def parameters_of(values: Iterable[Value]) -> list[Value]:
    return [v for v in values if v.requires_grad]


def swap_last(x: Value) -> Value:
    """Swap the last two axes of a stacked array."""
    return _node(np.swapaxes(x.data, -1, -2).copy(), (x,),
                 lambda g: _acc(x, np.swapaxes(g, -1, -2)))


def exp_normalize_last(logx: Value, floor: float = 1e-30) -> Value:
    """Unit-L2 normalisation of exp(logx) along the last axis, computed in log space.

    Vectors whose true norm falls below ``floor`` are replaced by a fixed unit
    vector with zero gradient: for an input of shape (..., M, M) row ``m`` falls
    back to basis vector ``e_m``; otherwise the first basis vector is used.
    """
    lx = logx.data
    top = lx.max(axis=-1, keepdims=True)
    finite_top = np.where(np.isfinite(top), top, 0.0)
    log_norm = finite_top + 0.5 * np.log(np.exp(2.0 * (lx - finite_top)).sum(axis=-1, keepdims=True))
    dead = ~(log_norm >= np.log(floor))
    y = np.exp(lx - np.where(dead, 0.0, log_norm))
    fallback = np.zeros_like(lx)
    if lx.ndim >= 2 and lx.shape[-1] == lx.shape[-2]:
        fallback[...] = np.eye(lx.shape[-1])
    else:
        fallback[..., 0] = 1.0
    y = np.where(dead, fallback, y)

    def bw(g):
        gy = g * y - y * y * np.einsum("...k,...k->...", g, y)[..., None]
        _acc(logx, np.where(dead, 0.0, gy))

    return _node(y, (logx,), bw)

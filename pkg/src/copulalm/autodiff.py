"""Minimal tape-based reverse-mode differentiation over float64 numpy arrays.

Every operation below builds a :class:`Var` node holding the forward value,
references to its parents, and a closure implementing the backward rule. The
node graph *is* the computation record: values are cached at construction
(forward), and :func:`backward` replays the topological order in reverse.

The primitive set is deliberately closed: elementwise arithmetic, matmul,
the activations used by the model, softmax cross-entropy, train-mode batch
normalization, the standard-normal CDF/quantile pair, and three fused kernels
for diag(w) + a a^T covariances (Cholesky factor, log-determinant, inverse
quadratic form) whose backward rules are derived in closed form. Each rule is
checked against central differences in isolation by the test suite, and
:func:`finite_diff_check` provides the same verification for whole models.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import NumericError, ShapeError
from .special_functions import std_normal_quantile

_CHECK_FINITE = False


def set_finite_checks(enabled: bool) -> None:
    """Toggle per-node non-finite detection (off by default; costs ~30%)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


class Var:
    """A node in the computation record: value, parents, and backward rule."""

    __slots__ = ("v", "grad", "parents", "bwd", "requires", "name")

    def __init__(self, v, parents=(), bwd=None, requires=False, name=""):
        self.v = np.asarray(v, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.bwd = bwd
        self.requires = requires
        self.name = name

    @property
    def shape(self):
        return self.v.shape

    def __float__(self):
        return float(self.v)

    def __add__(self, other):
        return add(self, as_var(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, as_var(other))

    def __rsub__(self, other):
        return sub(as_var(other), self)

    def __mul__(self, other):
        return mul(self, as_var(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, as_var(other))

    def __repr__(self):
        return f"Var({self.name or 'anon'}, shape={self.v.shape}, requires={self.requires})"


def const(v, name="") -> Var:
    """Leaf that never receives a gradient."""
    return Var(v, requires=False, name=name)


def param(v, name="") -> Var:
    """Trainable leaf."""
    return Var(np.array(v, dtype=np.float64), requires=True, name=name)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else const(x)


def _accumulate(node: Var, g: np.ndarray) -> None:
    if not node.requires:
        return
    node.grad = g if node.grad is None else node.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that broadcasting expanded."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _node(v, parents, bwd, name) -> Var:
    if _CHECK_FINITE and not np.all(np.isfinite(v)):
        raise NumericError(f"non-finite value produced by op '{name}'")
    requires = any(p.requires for p in parents)
    if not requires:
        return Var(v, requires=False, name=name)
    return Var(v, parents=tuple(parents), bwd=bwd, requires=True, name=name)


def topo_order(root: Var) -> list:
    """Topologically ordered nodes reachable from ``root`` through the tape."""
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Var, seed=1.0) -> None:
    """Populate ``.grad`` on every contributing node, starting from ``seed``.

    Gradients from previous calls are cleared for the nodes of this graph;
    leaves that do not influence ``root`` keep ``grad = None`` (treated as
    zero by :func:`grad_of`).
    """
    order = topo_order(root)
    for node in order:
        node.grad = None
    root.grad = np.broadcast_to(np.asarray(seed, dtype=np.float64), root.v.shape).copy()
    for node in reversed(order):
        if node.bwd is not None and node.grad is not None:
            node.bwd(node.grad)


def grad_of(leaf: Var) -> np.ndarray:
    """Gradient of a leaf after :func:`backward`; zeros if it was unused."""
    return np.zeros_like(leaf.v) if leaf.grad is None else leaf.grad


# ---------------------------------------------------------------------------
# elementwise and linear primitives
# ---------------------------------------------------------------------------

def add(x: Var, y: Var) -> Var:
    def bwd(g):
        _accumulate(x, _unbroadcast(g, x.v.shape))
        _accumulate(y, _unbroadcast(g, y.v.shape))
    return _node(x.v + y.v, (x, y), bwd, "add")


def sub(x: Var, y: Var) -> Var:
    def bwd(g):
        _accumulate(x, _unbroadcast(g, x.v.shape))
        _accumulate(y, _unbroadcast(-g, y.v.shape))
    return _node(x.v - y.v, (x, y), bwd, "sub")


def mul(x: Var, y: Var) -> Var:
    def bwd(g):
        _accumulate(x, _unbroadcast(g * y.v, x.v.shape))
        _accumulate(y, _unbroadcast(g * x.v, y.v.shape))
    return _node(x.v * y.v, (x, y), bwd, "mul")


def neg(x: Var) -> Var:
    def bwd(g):
        _accumulate(x, -g)
    return _node(-x.v, (x,), bwd, "neg")


def matmul(x: Var, y: Var) -> Var:
    if x.v.ndim != 2 or y.v.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {x.v.shape} @ {y.v.shape}")

    def bwd(g):
        _accumulate(x, g @ y.v.T)
        _accumulate(y, x.v.T @ g)
    return _node(x.v @ y.v, (x, y), bwd, "matmul")


def matvec(m: Var, x: Var) -> Var:
    """Batched matrix-vector product: (B,d,d) @ (B,d) -> (B,d), or unbatched."""
    if m.v.ndim == 2 and x.v.ndim == 1:
        def bwd(g):
            _accumulate(m, np.outer(g, x.v))
            _accumulate(x, m.v.T @ g)
        return _node(m.v @ x.v, (m, x), bwd, "matvec")
    if m.v.ndim == 3 and x.v.ndim == 2:
        def bwd(g):
            _accumulate(m, np.einsum("bi,bj->bij", g, x.v))
            _accumulate(x, np.einsum("bij,bi->bj", m.v, g))
        return _node(np.einsum("bij,bj->bi", m.v, x.v), (m, x), bwd, "matvec")
    raise ShapeError(f"matvec expects (d,d)@(d,) or (B,d,d)@(B,d), got {m.v.shape} @ {x.v.shape}")


def exp(x: Var) -> Var:
    out_v = np.exp(x.v)

    def bwd(g):
        _accumulate(x, g * out_v)
    return _node(out_v, (x,), bwd, "exp")


def log(x: Var) -> Var:
    def bwd(g):
        _accumulate(x, g / x.v)
    return _node(np.log(x.v), (x,), bwd, "log")


def sqrt(x: Var) -> Var:
    out_v = np.sqrt(x.v)

    def bwd(g):
        _accumulate(x, g * (0.5 / out_v))
    return _node(out_v, (x,), bwd, "sqrt")


def square(x: Var) -> Var:
    def bwd(g):
        _accumulate(x, g * (2.0 * x.v))
    return _node(x.v * x.v, (x,), bwd, "square")


def reciprocal(x: Var) -> Var:
    out_v = 1.0 / x.v

    def bwd(g):
        _accumulate(x, -g * out_v * out_v)
    return _node(out_v, (x,), bwd, "reciprocal")


def tanh(x: Var) -> Var:
    out_v = np.tanh(x.v)

    def bwd(g):
        _accumulate(x, g * (1.0 - out_v * out_v))
    return _node(out_v, (x,), bwd, "tanh")


def sigmoid(x: Var) -> Var:
    out_v = 1.0 / (1.0 + np.exp(-x.v))

    def bwd(g):
        _accumulate(x, g * out_v * (1.0 - out_v))
    return _node(out_v, (x,), bwd, "sigmoid")


def relu_floor(x: Var, floor: float) -> Var:
    """max(x, floor) elementwise; subgradient 0 at and below the floor."""
    mask = x.v > floor

    def bwd(g):
        _accumulate(x, g * mask)
    return _node(np.maximum(x.v, floor), (x,), bwd, "relu_floor")


def vsum(x: Var, axis=None, keepdims=False) -> Var:
    def bwd(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.v.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accumulate(x, np.broadcast_to(gg, x.v.shape).copy())
    return _node(np.sum(x.v, axis=axis, keepdims=keepdims), (x,), bwd, "vsum")


def slice_cols(x: Var, lo: int, hi: int) -> Var:
    def bwd(g):
        full = np.zeros_like(x.v)
        full[:, lo:hi] = g
        _accumulate(x, full)
    return _node(x.v[:, lo:hi], (x,), bwd, "slice_cols")


def concat_cols(x: Var, y: Var) -> Var:
    n = x.v.shape[1]

    def bwd(g):
        _accumulate(x, g[:, :n])
        _accumulate(y, g[:, n:])
    return _node(np.concatenate([x.v, y.v], axis=1), (x, y), bwd, "concat_cols")


def embedding(table: Var, ids: np.ndarray) -> Var:
    """Row gather from an embedding table; backward scatter-adds."""
    ids = np.asarray(ids)

    def bwd(g):
        full = np.zeros_like(table.v)
        np.add.at(full, ids, g)
        _accumulate(table, full)
    return _node(table.v[ids], (table,), bwd, "embedding")


# ---------------------------------------------------------------------------
# fused model primitives
# ---------------------------------------------------------------------------

def softmax_xent(logits: Var, targets: np.ndarray) -> Var:
    """Per-row cross-entropy between logits (B,V) and integer targets (B,)."""
    targets = np.asarray(targets)
    shifted = logits.v - logits.v.max(axis=1, keepdims=True)
    expv = np.exp(shifted)
    probs = expv / expv.sum(axis=1, keepdims=True)
    rows = np.arange(logits.v.shape[0])
    losses = np.log(expv.sum(axis=1)) - shifted[rows, targets]

    def bwd(g):
        d = probs * g[:, None]
        d[rows, targets] -= g
        _accumulate(logits, d)
    return _node(losses, (logits,), bwd, "softmax_xent")


def batch_norm_train(x: Var, gamma: Var, beta: Var, eps: float = 1e-5) -> Var:
    """Train-mode batch normalization over axis 0 with learned affine."""
    n = x.v.shape[0]
    if n < 2:
        raise ShapeError("train-mode batch norm needs batch size >= 2")
    mean = x.v.mean(axis=0)
    var = x.v.var(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.v - mean) * inv_std

    def bwd(g):
        gxhat = g * gamma.v
        _accumulate(x, inv_std / n * (n * gxhat - gxhat.sum(axis=0)
                                      - xhat * (gxhat * xhat).sum(axis=0)))
        _accumulate(gamma, (g * xhat).sum(axis=0))
        _accumulate(beta, g.sum(axis=0))
    return _node(gamma.v * xhat + beta.v, (x, gamma, beta), bwd, "batch_norm_train")


_SQRT_2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_erfc_vec = np.vectorize(math.erfc, otypes=[np.float64])
_quantile_vec = np.vectorize(std_normal_quantile, otypes=[np.float64])


def normal_cdf(x: Var) -> Var:
    def bwd(g):
        _accumulate(x, g * _INV_SQRT_2PI * np.exp(-0.5 * x.v * x.v))
    return _node(0.5 * _erfc_vec(-x.v / _SQRT_2), (x,), bwd, "normal_cdf")


def normal_quantile(p: Var) -> Var:
    out_v = _quantile_vec(p.v)

    def bwd(g):
        _accumulate(p, g / (_INV_SQRT_2PI * np.exp(-0.5 * out_v * out_v)))
    return _node(out_v, (p,), bwd, "normal_quantile")


def _batchify(x: np.ndarray):
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def rank_one_chol(w: Var, a: Var) -> Var:
    """Cholesky factor of diag(w) + a a^T; (B,d) inputs give (B,d,d) factors.

    Forward runs the O(d) prefix recursion (see :func:`copulalm.lowrank.cholesky`);
    backward replays it in reverse, carrying the gradient of the prefix scalar r.
    """
    wv, squeezed = _batchify(w.v)
    av, _ = _batchify(a.v)
    nb, d = wv.shape
    rs = np.empty((nb, d))     # r_{j-1}
    ts = np.empty((nb, d))     # pivot w_j + a_j^2 r_{j-1}
    r = np.ones(nb)
    for j in range(d):
        rs[:, j] = r
        ts[:, j] = wv[:, j] + av[:, j] ** 2 * r
        r = r * wv[:, j] / ts[:, j]
    delta = np.sqrt(ts)
    b = av * rs / delta
    lower = np.tril(av[:, :, None] * b[:, None, :], -1)
    idx = np.arange(d)
    lower[:, idx, idx] = delta

    def bwd(g):
        gl = g[None, :, :] if squeezed else g
        gdelta = gl[:, idx, idx]
        strict = np.tril(gl, -1)
        ga = np.einsum("bij,bj->bi", strict, b)     # through L[i,j] = a_i b_j
        gb = np.einsum("bij,bi->bj", strict, av)
        gw = np.zeros_like(wv)
        gr = np.zeros(nb)
        for j in range(d - 1, -1, -1):
            r_, t, dj, aj, wj = rs[:, j], ts[:, j], delta[:, j], av[:, j], wv[:, j]
            gt = gdelta[:, j] * (0.5 / dj) \
                - gb[:, j] * (aj * r_ * 0.5 / (t * dj)) \
                - gr * (wj * r_ / (t * t))
            gw[:, j] = gt + gr * (r_ / t)
            ga[:, j] += gt * (2.0 * aj * r_) + gb[:, j] * (r_ / dj)
            gr = gt * (aj * aj) + gb[:, j] * (aj / dj) + gr * (wj / t)
        _accumulate(w, gw[0] if squeezed else gw)
        _accumulate(a, ga[0] if squeezed else ga)
    out_v = lower[0] if squeezed else lower
    return _node(out_v, (w, a), bwd, "rank_one_chol")


def logdet_low_rank(w: Var, a: Var) -> Var:
    """log det(diag(w) + a a^T) via the determinant lemma; (B,d) -> (B,)."""
    wv, squeezed = _batchify(w.v)
    av, _ = _batchify(a.v)
    s = np.sum(av * av / wv, axis=1)
    out_v = np.sum(np.log(wv), axis=1) + np.log1p(s)

    def bwd(g):
        gg = np.atleast_1d(g)[:, None]
        gw = gg * (1.0 / wv - av * av / (wv * wv * (1.0 + s[:, None])))
        ga = gg * (2.0 * av / (wv * (1.0 + s[:, None])))
        _accumulate(w, gw[0] if squeezed else gw)
        _accumulate(a, ga[0] if squeezed else ga)
    return _node(out_v[0] if squeezed else out_v, (w, a), bwd, "logdet_low_rank")


def inv_quad_low_rank(w: Var, a: Var, q: Var) -> Var:
    """q^T (diag(w) + a a^T)^{-1} q via Sherman-Morrison; (B,d) -> (B,)."""
    wv, squeezed = _batchify(w.v)
    av, _ = _batchify(a.v)
    qv, _ = _batchify(q.v)
    u = qv / wv
    alpha = np.sum(av * u, axis=1)
    beta = 1.0 + np.sum(av * av / wv, axis=1)
    ratio = (alpha / beta)[:, None]
    y = (qv - ratio * av) / wv          # equals S^{-1} q
    out_v = np.sum(qv * u, axis=1) - alpha * alpha / beta

    def bwd(g):
        gg = np.atleast_1d(g)[:, None]
        gq = gg * 2.0 * y
        ga = gg * (-2.0 * ratio * y)
        gw = gg * (-y * y)
        _accumulate(q, gq[0] if squeezed else gq)
        _accumulate(a, ga[0] if squeezed else ga)
        _accumulate(w, gw[0] if squeezed else gw)
    return _node(out_v[0] if squeezed else out_v, (w, a, q), bwd, "inv_quad_low_rank")


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

@dataclass
class FiniteDiffEntry:
    tensor: str
    index: tuple
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradientReport:
    """Per-coordinate comparison of analytic vs central-difference gradients."""

    entries: list = field(default_factory=list)
    step: float = 1e-4
    tol: float = 1e-4

    @property
    def max_rel_error(self) -> float:
        return max((e.rel_error for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    @property
    def worst(self):
        return max(self.entries, key=lambda e: e.rel_error, default=None)

    def max_rel_error_by_tensor(self) -> dict:
        out = {}
        for e in self.entries:
            out[e.tensor] = max(out.get(e.tensor, 0.0), e.rel_error)
        return out


def _rel_error(ga: float, gn: float) -> float:
    return abs(ga - gn) / max(1e-8, abs(ga) + abs(gn))


def finite_diff_check(loss_fn: Callable[[], Var], params: dict, step: float = 1e-4,
                      tol: float = 1e-4, max_coords_per_tensor: int | None = None,
                      rng: np.random.Generator | None = None) -> GradientReport:
    """Compare analytic gradients of ``loss_fn`` against central differences.

    ``loss_fn`` must be deterministic (fix every noise draw before calling)
    and must read the current values of ``params``, a name -> leaf mapping.
    With ``max_coords_per_tensor`` set, only a random subsample of coordinates
    per tensor is probed, which keeps the check affordable on full-size models.

    Raises:
        NumericError: if the loss is non-finite at a perturbed point.
    """
    base = loss_fn()
    if base.v.ndim != 0:
        raise ShapeError("finite_diff_check expects a scalar loss")
    if not np.isfinite(base.v):
        raise NumericError("loss is non-finite at the unperturbed point")
    backward(base)
    analytic = {name: grad_of(p).copy() for name, p in params.items()}

    report = GradientReport(step=step, tol=tol)
    for name, p in params.items():
        size = p.v.size
        if max_coords_per_tensor is not None and size > max_coords_per_tensor:
            if rng is None:
                rng = np.random.default_rng(0)
            flat_indices = rng.choice(size, size=max_coords_per_tensor, replace=False)
        else:
            flat_indices = np.arange(size)
        for flat in flat_indices:
            idx = np.unravel_index(int(flat), p.v.shape)
            orig = p.v[idx]
            p.v[idx] = orig + step
            up = float(loss_fn().v)
            p.v[idx] = orig - step
            down = float(loss_fn().v)
            p.v[idx] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NumericError(f"non-finite loss when perturbing {name}{idx}")
            numeric = (up - down) / (2.0 * step)
            ga = float(analytic[name][idx])
            report.entries.append(FiniteDiffEntry(name, idx, ga, numeric, _rel_error(ga, numeric)))
    return report

"""Fixed-shape expression trees over a finite operator set.

An expression is a small fixed tree: each leaf applies one unary operator
coordinate-wise to per-dimension weighted inputs (alpha_i * x_i) and merges
the d results with a sum or product combiner; leaf outputs are joined by
binary operators at the root. Value, gradient, laplacian and exact parameter
gradients of any functional of those three are all closed-form, vectorized
over point batches.

Slot layout for the default two-leaf tree:
    (combiner_1, unary_1, combiner_2, unary_2, root_binary)
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np

PRINT_THRESHOLD = 5e-5  # rendered terms below this coefficient are dropped
EXP_SATURATION = 700.0  # exp arguments above this saturate and poison the loss

UNARY_KINDS = ("zero", "one", "identity", "square", "cube", "quartic", "exp", "sin", "cos")
BINARY_KINDS = ("add", "sub", "mul")
COMBINER_KINDS = ("sum", "product")
DEFAULT_BASE_FREQS = (3, 6, 9, 12, 15, 18, 21, 24)


class InvalidOperatorError(ValueError):
    """Operator index out of range for its slot."""


@dataclass(frozen=True)
class UnaryOp:
    """Coordinate-wise operator u(t); base_freq scales the argument of sin/cos."""

    kind: str
    base_freq: int = 1

    def __post_init__(self):
        if self.kind not in UNARY_KINDS:
            raise ValueError(f"unknown unary kind {self.kind!r}")
        if self.base_freq != 1 and self.kind not in ("sin", "cos"):
            raise ValueError("base_freq > 1 is only defined for sin/cos")
        if self.base_freq < 1:
            raise ValueError("base_freq must be a positive integer")

    @property
    def label(self) -> str:
        if self.kind in ("sin", "cos") and self.base_freq != 1:
            return f"{self.kind}{self.base_freq}"
        return self.kind


def unary_values(op: UnaryOp, t: np.ndarray, order: int = 3):
    """u(t) and derivatives up to `order` (Nones beyond it), plus an
    overflow-ok flag.

    Third derivatives are needed by parameter gradients of the laplacian
    (d/dalpha of u''(alpha x) terms); every operator has them in closed
    form.  Lower orders skip the unneeded arrays; the computed ones are
    bit-identical across orders.
    """
    kind, k = op.kind, float(op.base_freq)
    z = np.zeros_like(t)
    if kind == "zero":
        return z, z, z, z, True
    if kind == "one":
        return np.ones_like(t), z, z, z, True
    if kind == "identity":
        return t, np.ones_like(t), z, z, True
    if kind == "square":
        return (t * t, 2.0 * t if order >= 1 else None,
                np.full_like(t, 2.0) if order >= 2 else None, z, True)
    if kind == "cube":
        t2 = t * t
        return (t2 * t, 3.0 * t2 if order >= 1 else None,
                6.0 * t if order >= 2 else None,
                np.full_like(t, 6.0) if order >= 3 else None, True)
    if kind == "quartic":
        t2 = t * t
        return (t2 * t2, 4.0 * t2 * t if order >= 1 else None,
                12.0 * t2 if order >= 2 else None,
                24.0 * t if order >= 3 else None, True)
    if kind == "exp":
        ok = bool(np.all(t <= EXP_SATURATION))
        e = np.exp(np.minimum(t, EXP_SATURATION))
        return e, e, e, e, ok
    if kind == "sin":
        s = np.sin(k * t)
        if order < 1:
            return s, None, None, None, True
        c = np.cos(k * t)
        return (s, k * c, -(k * k) * s if order >= 2 else None,
                -(k ** 3) * c if order >= 3 else None, True)
    # cos
    c = np.cos(k * t)
    if order < 1:
        return c, None, None, None, True
    s = np.sin(k * t)
    return (c, -k * s, -(k * k) * c if order >= 2 else None,
            (k ** 3) * s if order >= 3 else None, True)


def default_library(base_freqs=DEFAULT_BASE_FREQS) -> "OperatorLibrary":
    """The full operator set: 9 base unaries + sin/cos at each base frequency."""
    unaries = [UnaryOp(kind) for kind in UNARY_KINDS]
    for k in base_freqs:
        unaries.append(UnaryOp("sin", int(k)))
        unaries.append(UnaryOp("cos", int(k)))
    return OperatorLibrary(tuple(unaries), BINARY_KINDS, COMBINER_KINDS)


@dataclass(frozen=True)
class OperatorLibrary:
    unaries: tuple
    binaries: tuple = BINARY_KINDS
    combiners: tuple = COMBINER_KINDS

    @property
    def base_freqs(self) -> tuple:
        return tuple(u.base_freq for u in self.unaries if u.kind == "sin" and u.base_freq > 1)


@dataclass(frozen=True)
class TreeShape:
    """Number of leaves fixes the slot layout: (combiner_i, unary_i) per leaf
    in order, then the root binary slots left to right."""

    n_leaves: int = 2

    def __post_init__(self):
        if self.n_leaves < 2:
            raise ValueError("a tree needs at least two leaves")

    @property
    def n_slots(self) -> int:
        return 3 * self.n_leaves - 1

    def slot_roles(self) -> tuple:
        roles = []
        for _ in range(self.n_leaves):
            roles += ["combiner", "unary"]
        roles += ["binary"] * (self.n_leaves - 1)
        return tuple(roles)


def slot_sizes(shape: TreeShape, library: OperatorLibrary) -> tuple:
    """Operator-set size per slot, in slot order."""
    table = {"combiner": len(library.combiners), "unary": len(library.unaries),
             "binary": len(library.binaries)}
    return tuple(table[r] for r in shape.slot_roles())


def validate_ops(shape: TreeShape, ops, library: OperatorLibrary) -> tuple:
    ops = tuple(int(o) for o in ops)
    sizes = slot_sizes(shape, library)
    if len(ops) != len(sizes):
        raise InvalidOperatorError(
            f"sequence length {len(ops)} != {len(sizes)} slots for this shape")
    for pos, (o, size) in enumerate(zip(ops, sizes)):
        if not 0 <= o < size:
            raise InvalidOperatorError(f"operator index {o} invalid at slot {pos}")
    return ops


@dataclass(frozen=True)
class LeafLayout:
    """One leaf's operators plus its slice of the parameter vector.

    theta block layout: [alphas (n_alpha) | weights (n_w) | bias]. alpha_map
    (and w_map for sum combiners) send each dimension to its parameter slot;
    after grouping several dimensions share one slot.
    """

    combiner: str
    unary: UnaryOp
    alpha_map: tuple
    w_map: tuple
    n_alpha: int
    n_w: int
    offset: int

    @property
    def size(self) -> int:
        return self.n_alpha + self.n_w + 1

    @cached_property
    def alpha_ix(self) -> np.ndarray:
        return np.asarray(self.alpha_map, dtype=np.intp)

    @cached_property
    def w_ix(self) -> np.ndarray:
        return np.asarray(self.w_map, dtype=np.intp)

    def slices(self):
        a0 = self.offset
        w0 = a0 + self.n_alpha
        b0 = w0 + self.n_w
        return slice(a0, w0), slice(w0, b0), b0


def _ungrouped_leaf(combiner: str, unary: UnaryOp, d: int, offset: int) -> LeafLayout:
    ident = tuple(range(d))
    if combiner == "sum":
        return LeafLayout(combiner, unary, ident, ident, d, d, offset)
    return LeafLayout(combiner, unary, ident, (0,) * d, d, 1, offset)


@dataclass(frozen=True, eq=False)
class Expression:
    """Immutable expression: shape + operator choices + parameter vector.

    theta is treated as read-only; with_params returns a new Expression.
    """

    shape: TreeShape
    ops: tuple
    d: int
    library: OperatorLibrary
    leaves: tuple
    root_binaries: tuple
    theta: np.ndarray
    has_lambda: bool = False

    @property
    def n_params(self) -> int:
        return sum(leaf.size for leaf in self.leaves) + (1 if self.has_lambda else 0)

    @property
    def lam(self):
        return float(self.theta[-1]) if self.has_lambda else None

    def with_params(self, theta: np.ndarray) -> "Expression":
        theta = np.asarray(theta, dtype=self.theta.dtype)
        if theta.shape != self.theta.shape:
            raise ValueError("parameter vector has the wrong length")
        return replace(self, theta=theta.copy())

    def with_lambda(self, value: float) -> "Expression":
        if self.has_lambda:
            theta = self.theta.copy()
            theta[-1] = value
            return replace(self, theta=theta)
        theta = np.append(self.theta, np.asarray(value, dtype=self.theta.dtype))
        return replace(self, theta=theta, has_lambda=True)


def param_count(shape: TreeShape, d: int, combiners, with_lambda: bool = False) -> int:
    """Deterministic parameter count: per leaf d alphas, d (sum) or 1 (product)
    weights, one bias; plus the optional eigenvalue slot."""
    n = 0
    for c in combiners:
        n += d + (d if c == "sum" else 1) + 1
    return n + (1 if with_lambda else 0)


def build_expression(shape: TreeShape, ops, d: int, library: OperatorLibrary | None = None,
                     rng: np.random.Generator | None = None,
                     dtype=np.float64) -> Expression:
    """Construct an expression with alphas at exactly 1 and weights/biases
    drawn uniformly from [-1, 1] (seeded); the eigenvalue slot is absent."""
    if library is None:
        library = default_library()
    if rng is None:
        rng = np.random.default_rng(0)
    ops = validate_ops(shape, ops, library)

    leaves = []
    offset = 0
    for l in range(shape.n_leaves):
        combiner = library.combiners[ops[2 * l]]
        unary = library.unaries[ops[2 * l + 1]]
        leaf = _ungrouped_leaf(combiner, unary, d, offset)
        leaves.append(leaf)
        offset += leaf.size
    root = tuple(library.binaries[ops[2 * shape.n_leaves + j]]
                 for j in range(shape.n_leaves - 1))

    theta = np.empty(offset, dtype=dtype)
    for leaf in leaves:
        a_sl, w_sl, b_ix = leaf.slices()
        theta[a_sl] = 1.0
        theta[w_sl] = rng.uniform(-1.0, 1.0, size=leaf.n_w)
        theta[b_ix] = rng.uniform(-1.0, 1.0)
    return Expression(shape, ops, d, library, tuple(leaves), root, theta)


# ---------------------------------------------------------------------------
# forward evaluation
# ---------------------------------------------------------------------------

class _LeafCache:
    __slots__ = ("alpha", "w", "u", "u1", "u2", "u3", "val", "grad", "lap",
                 "P", "Aprev", "Bnext", "Phat")


class Forward:
    """Cached forward pass: root value/grad/lap plus per-node intermediates."""

    __slots__ = ("value", "grad", "lap", "ok", "leaf_caches", "node_triples", "X")

    def __init__(self, value, grad, lap, ok, leaf_caches, node_triples, X):
        self.value, self.grad, self.lap, self.ok = value, grad, lap, ok
        self.leaf_caches, self.node_triples, self.X = leaf_caches, node_triples, X


def _leaf_forward(leaf: LeafLayout, theta: np.ndarray, X: np.ndarray,
                  order: int = 3) -> tuple:
    # order is the derivative depth actually consumed downstream: 0 values,
    # 1 adds what value-seeded reverse passes read (u1, partial products),
    # 2 adds spatial gradients, 3 (default) the full value/grad/lap pass
    n, d = X.shape
    a_sl, w_sl, b_ix = leaf.slices()
    alpha = theta[a_sl][leaf.alpha_ix]  # (d,)
    b = theta[b_ix]
    c = _LeafCache()
    c.alpha = alpha
    c.grad = c.lap = None
    c.u, c.u1, c.u2, c.u3, ok = unary_values(leaf.unary, alpha * X, order)
    if leaf.combiner == "sum":
        w = theta[w_sl][leaf.w_ix]  # (d,)
        c.w = w
        c.val = c.u @ w + b
        if order >= 2:
            c.grad = (w * alpha) * c.u1
        if order >= 3:
            c.lap = c.u2 @ (w * alpha * alpha)
    else:
        w = float(theta[w_sl][0])
        c.w = w
        A = np.cumprod(c.u, axis=1)
        c.P = A[:, -1]
        c.val = w * c.P + b
        if order >= 1:
            ones = np.ones((n, 1), dtype=c.u.dtype)
            c.Aprev = np.concatenate([ones, A[:, :-1]], axis=1)      # prod_{k<j}
            Brev = np.cumprod(c.u[:, ::-1], axis=1)[:, ::-1]
            c.Bnext = np.concatenate([Brev[:, 1:], ones], axis=1)    # prod_{k>j}
            c.Phat = c.Aprev * c.Bnext
        if order >= 2:
            c.grad = w * (alpha * c.u1) * c.Phat
        if order >= 3:
            c.lap = w * ((alpha * alpha * c.u2) * c.Phat).sum(axis=1)
    return c, ok


def _combine(kind: str, a, b, order: int = 3):
    """(value, grad, lap) of B(a, b); mul uses the exact product laplacian
    lap(ab) = b*lap(a) + 2*grad(a).grad(b) + a*lap(b)."""
    av, ag, al = a
    bv, bg, bl = b
    if kind == "add":
        return (av + bv, ag + bg if order >= 2 else None,
                al + bl if order >= 3 else None)
    if kind == "sub":
        return (av - bv, ag - bg if order >= 2 else None,
                al - bl if order >= 3 else None)
    val = av * bv
    grad = bv[:, None] * ag + av[:, None] * bg if order >= 2 else None
    lap = (bv * al + 2.0 * (ag * bg).sum(axis=1) + av * bl
           if order >= 3 else None)
    return val, grad, lap


def forward_batch(expr: Expression, X: np.ndarray, order: int = 3) -> Forward:
    """Value, gradient and laplacian at every row of X, with caches kept for
    the reverse parameter pass. ok=False flags any overflow/non-finite result.

    order < 3 skips the pieces deeper passes would not read (grad below 2,
    lap below 3); what is computed is bit-identical to the full pass."""
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[1] != expr.d:
        raise ValueError(f"expected points of shape (n, {expr.d})")
    ok = True
    caches, triples = [], []
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for leaf in expr.leaves:
            c, leaf_ok = _leaf_forward(leaf, expr.theta, X, order)
            ok = ok and leaf_ok
            caches.append(c)
        node = (caches[0].val, caches[0].grad, caches[0].lap)
        triples.append(node)
        for j, kind in enumerate(expr.root_binaries):
            node = _combine(kind, node, (caches[j + 1].val, caches[j + 1].grad,
                                         caches[j + 1].lap), order)
            triples.append(node)
    value, grad, lap = node
    ok = ok and bool(np.isfinite(value).all())
    if order >= 2:
        ok = ok and bool(np.isfinite(grad).all())
    if order >= 3:
        ok = ok and bool(np.isfinite(lap).all())
    return Forward(value, grad, lap, ok, caches, triples, X)


def eval_batch(expr: Expression, X: np.ndarray) -> tuple:
    """Values only (cheap path for metrics and rendering checks)."""
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[1] != expr.d:
        raise ValueError(f"expected points of shape (n, {expr.d})")
    ok = True
    vals = []
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for leaf in expr.leaves:
            a_sl, w_sl, b_ix = leaf.slices()
            alpha = expr.theta[a_sl][leaf.alpha_ix]
            u, _, _, _, leaf_ok = unary_values(leaf.unary, alpha * X, 0)
            ok = ok and leaf_ok
            if leaf.combiner == "sum":
                v = u @ expr.theta[w_sl][leaf.w_ix] + expr.theta[b_ix]
            else:
                v = float(expr.theta[w_sl][0]) * np.prod(u, axis=1) + expr.theta[b_ix]
            vals.append(v)
        out = vals[0]
        for j, kind in enumerate(expr.root_binaries):
            if kind == "add":
                out = out + vals[j + 1]
            elif kind == "sub":
                out = out - vals[j + 1]
            else:
                out = out * vals[j + 1]
    ok = ok and bool(np.isfinite(out).all())
    return out, ok


def evaluate(expr: Expression, x) -> float:
    """E(x) at a single point."""
    v, _ = eval_batch(expr, np.asarray(x, dtype=float)[None, :])
    return float(v[0])


def gradient(expr: Expression, x) -> np.ndarray:
    f = forward_batch(expr, np.asarray(x, dtype=float)[None, :])
    return f.grad[0].copy()


def laplacian(expr: Expression, x) -> float:
    f = forward_batch(expr, np.asarray(x, dtype=float)[None, :])
    return float(f.lap[0])


# ---------------------------------------------------------------------------
# reverse parameter pass
# ---------------------------------------------------------------------------

def _madd(acc, term):
    return term if acc is None else acc + term


def _split_seeds(kind, seeds, left, right):
    """Adjoints of B(left, right) pushed onto each operand; None means zero."""
    sv, sg, sl = seeds
    if kind == "add":
        return seeds, seeds
    if kind == "sub":
        neg = (None if sv is None else -sv, None if sg is None else -sg,
               None if sl is None else -sl)
        return seeds, neg
    lv, lg, ll = left
    rv, rg, rl = right

    # each operand's adjoint uses the other operand's forward values
    def side(other_v, other_g, other_l):
        v = g = l = None
        if sv is not None:
            v = _madd(v, sv * other_v)
        if sg is not None:
            v = _madd(v, (sg * other_g).sum(axis=1))
            g = _madd(g, sg * other_v[:, None])
        if sl is not None:
            v = _madd(v, sl * other_l)
            g = _madd(g, 2.0 * sl[:, None] * other_g)
            l = _madd(l, sl * other_v)
        return v, g, l

    return side(rv, rg, rl), side(lv, lg, ll)


def _leaf_reverse(leaf: LeafLayout, cache: _LeafCache, X: np.ndarray, seeds,
                  out: np.ndarray):
    """Accumulate d(sum of seeded outputs)/d(leaf params) into out."""
    sv, sg, sl = seeds
    if sv is None and sg is None and sl is None:
        return
    alpha, u, u1, u2, u3 = cache.alpha, cache.u, cache.u1, cache.u2, cache.u3
    a_sl, w_sl, b_ix = leaf.slices()

    if leaf.combiner == "sum":
        w = cache.w  # (d,) already mapped
        tw = None
        if sv is not None:
            tw = _madd(tw, sv[:, None] * u)
        if sg is not None:
            tw = _madd(tw, sg * (alpha * u1))
        if sl is not None:
            tw = _madd(tw, sl[:, None] * (alpha * alpha * u2))
        out[w_sl] += np.bincount(leaf.w_ix, weights=tw.sum(axis=0),
                                 minlength=leaf.n_w)
        ta = None
        if sv is not None:
            ta = _madd(ta, sv[:, None] * (u1 * X))
        if sg is not None:
            ta = _madd(ta, sg * (u1 + alpha * u2 * X))
        if sl is not None:
            ta = _madd(ta, sl[:, None] * (2.0 * alpha * u2 + alpha * alpha * u3 * X))
        out[a_sl] += np.bincount(leaf.alpha_ix, weights=(w * ta).sum(axis=0),
                                 minlength=leaf.n_alpha)
        if sv is not None:
            out[b_ix] += sv.sum()
        return

    # product combiner: cross terms sum_{i != j} c_i * prod_{k not in {i,j}} u_k
    # are computed with forward/backward partial-product recursions (no division,
    # so exact zeros among the factors are handled exactly).
    w, P, Phat, Aprev, Bnext = cache.w, cache.P, cache.Phat, cache.Aprev, cache.Bnext
    n, d = X.shape
    c = None
    if sg is not None:
        c = _madd(c, sg * (alpha * u1))
    if sl is not None:
        c = _madd(c, sl[:, None] * (alpha * alpha * u2))

    if c is not None:
        L = np.empty_like(u)
        R = np.empty_like(u)
        acc = np.zeros(n, dtype=u.dtype)
        for j in range(d):
            L[:, j] = acc
            acc = acc * u[:, j] + c[:, j] * Aprev[:, j]
        acc = np.zeros(n, dtype=u.dtype)
        for j in range(d - 1, -1, -1):
            R[:, j] = acc
            acc = acc * u[:, j] + c[:, j] * Bnext[:, j]
        r = Bnext * L + Aprev * R
    else:
        r = None

    ta = None
    if sv is not None:
        ta = _madd(ta, sv[:, None] * (u1 * X) * Phat)
    if sg is not None:
        ta = _madd(ta, sg * (u1 + alpha * u2 * X) * Phat)
    if sl is not None:
        ta = _madd(ta, sl[:, None] * (2.0 * alpha * u2 + alpha * alpha * u3 * X) * Phat)
    if r is not None:
        ta = _madd(ta, (u1 * X) * r)
    out[a_sl] += np.bincount(leaf.alpha_ix, weights=(w * ta).sum(axis=0),
                             minlength=leaf.n_alpha)

    dw = 0.0
    if sv is not None:
        dw += float((sv * P).sum())
    if c is not None:
        dw += float((c * Phat).sum())
    out[w_sl.start] += dw
    if sv is not None:
        out[b_ix] += sv.sum()


def param_grad_batch(expr: Expression, X: np.ndarray, seed_value=None,
                     seed_grad=None, seed_lap=None,
                     forward: Forward | None = None) -> np.ndarray:
    """Exact gradient over the parameter vector of
        sum_i [ sv_i E(x_i) + sg_i . grad E(x_i) + sl_i lap E(x_i) ].

    The lambda slot (when present) gets 0: E does not depend on lambda, the
    loss assembly adds the explicit residual term.
    """
    if forward is None:
        # depth the reverse pass will actually read: lap seeds touch node
        # laplacians, grad seeds node gradients, value seeds only u1 and the
        # partial products
        order = 3 if seed_lap is not None else 2 if seed_grad is not None else 1
        forward = forward_batch(expr, X, order)
    X = forward.X
    out = np.zeros(expr.n_params, dtype=expr.theta.dtype)
    seeds = (None if seed_value is None else np.asarray(seed_value),
             None if seed_grad is None else np.asarray(seed_grad),
             None if seed_lap is None else np.asarray(seed_lap))

    # walk the root chain backwards, peeling one leaf per binary
    leaf_seeds = [None] * expr.shape.n_leaves
    current = seeds
    for j in range(len(expr.root_binaries) - 1, -1, -1):
        cache = forward.leaf_caches[j + 1]
        left = forward.node_triples[j]
        right = (cache.val, cache.grad, cache.lap)
        current, leaf_seeds[j + 1] = _split_seeds(expr.root_binaries[j], current,
                                                  left, right)
    leaf_seeds[0] = current

    for leaf, cache, s in zip(expr.leaves, forward.leaf_caches, leaf_seeds):
        _leaf_reverse(leaf, cache, X, s, out)
    return out


def param_grad(expr: Expression, x, seed_value=1.0, seed_grad=None, seed_lap=None):
    """Single-point convenience wrapper over param_grad_batch."""
    X = np.asarray(x, dtype=float)[None, :]
    sv = None if seed_value is None else np.asarray([seed_value], dtype=float)
    sg = None if seed_grad is None else np.asarray(seed_grad, dtype=float)[None, :]
    sl = None if seed_lap is None else np.asarray([seed_lap], dtype=float)
    return param_grad_batch(expr, X, sv, sg, sl)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _leaf_ir(leaf: LeafLayout, theta: np.ndarray, threshold: float):
    """Reduce a leaf to printable primitives.

    sum leaf  -> ("sum", [(coeff, factor), ...], bias)
    product   -> ("product", coeff, [factor, ...], bias)
    factor is one of ("pow", i, p) | ("trig", name, freq, i) | ("exp", a, i)
    with base_freq*alpha folded into freq and polynomial alphas folded into
    the coefficient.
    """
    a_sl, w_sl, b_ix = leaf.slices()
    alpha = theta[a_sl][leaf.alpha_ix]
    b = float(theta[b_ix])
    kind, k = leaf.unary.kind, leaf.unary.base_freq
    d = len(leaf.alpha_map)

    def factor_and_pull(i):
        """(pulled coefficient, factor or None for constant-1, is_zero)."""
        a = float(alpha[i])
        if kind == "zero":
            return 0.0, None, True
        if kind == "one":
            return 1.0, None, False
        if kind == "identity":
            return a, ("pow", i, 1), False
        if kind == "square":
            return a * a, ("pow", i, 2), False
        if kind == "cube":
            return a ** 3, ("pow", i, 3), False
        if kind == "quartic":
            return a ** 4, ("pow", i, 4), False
        if kind == "exp":
            return 1.0, ("exp", a, i), False
        return 1.0, ("trig", kind, k * a, i), False

    if leaf.combiner == "sum":
        w = theta[w_sl][leaf.w_ix]
        terms = []
        bias = b
        for i in range(d):
            pulled, factor, is_zero = factor_and_pull(i)
            if is_zero:
                continue
            coeff = float(w[i]) * pulled
            if factor is None:
                bias += coeff
                continue
            if abs(coeff) < threshold:
                continue
            terms.append((coeff, factor))
        if abs(bias) < threshold:
            bias = 0.0
        return ("sum", terms, bias)

    w = float(theta[w_sl][0])
    coeff = w
    factors = []
    for i in range(d):
        pulled, factor, is_zero = factor_and_pull(i)
        if is_zero:
            coeff = 0.0
            factors = []
            break
        coeff *= pulled
        if factor is not None:
            factors.append(factor)
    if abs(coeff) < threshold:
        coeff, factors = 0.0, []
    bias = 0.0 if abs(b) < threshold else b
    return ("product", coeff, factors, bias)


def _fmt(v: float, precision: int) -> str:
    s = f"{v:.{precision}f}"
    if float(s) == 0.0:
        s = f"{0.0:.{precision}f}"  # normalize -0.0000 to 0.0000
    return s


def _factor_text(factor, precision: int) -> str:
    if factor[0] == "pow":
        _, i, p = factor
        return "*".join([f"x{i + 1}"] * p)
    if factor[0] == "exp":
        _, a, i = factor
        return f"exp({_fmt(a, precision)}*x{i + 1})"
    _, name, freq, i = factor
    return f"{name}({_fmt(freq, precision)}*x{i + 1})"


def _product_text(coeff, factors, precision):
    parts = [_fmt(abs(coeff), precision)] + [_factor_text(f, precision) for f in factors]
    return ("-" if coeff < 0 else "") + "*".join(parts)


def _leaf_text(ir, precision: int):
    """Render a leaf IR; returns (text, is_single_product, single) where single
    is (coeff, factors) when the whole leaf is one coefficient*factors term."""
    if ir[0] == "sum":
        _, terms, bias = ir
        if not terms and bias == 0.0:
            return "0", False, None
        pieces = []
        for coeff, factor in terms:
            pieces.append((coeff, _factor_text(factor, precision)))
        text = ""
        for j, (coeff, ftext) in enumerate(pieces):
            mag = f"{_fmt(abs(coeff), precision)}*{ftext}"
            if j == 0:
                text = ("-" if coeff < 0 else "") + mag
            else:
                text += (" - " if coeff < 0 else " + ") + mag
        if bias != 0.0:
            if not text:
                text = _fmt(bias, precision)
            else:
                text += (" - " if bias < 0 else " + ") + _fmt(abs(bias), precision)
        elif not text:
            text = "0"
        single = (terms[0][0], [terms[0][1]]) if len(terms) == 1 and bias == 0.0 else None
        return text, single is not None, single

    _, coeff, factors, bias = ir
    if coeff == 0.0 and bias == 0.0:
        return "0", False, None
    if coeff == 0.0:
        return _fmt(bias, precision), False, None
    text = _product_text(coeff, factors, precision)
    if bias != 0.0:
        text += (" - " if bias < 0 else " + ") + _fmt(abs(bias), precision)
        return text, False, None
    return text, True, (coeff, factors)


def render(expr: Expression, precision: int = 4) -> str:
    """Deterministic text form using only the documented simplifications:
    terms with |coefficient| below the print threshold are dropped, base
    frequencies are folded into the printed argument, zero biases vanish.
    A product of two single-term leaves is merged into one leading
    coefficient (the published form of recovered solutions)."""
    irs = [_leaf_ir(leaf, expr.theta, PRINT_THRESHOLD) for leaf in expr.leaves]
    rendered = [_leaf_text(ir, precision) for ir in irs]
    text, _, single = rendered[0]
    for j, kind in enumerate(expr.root_binaries):
        rtext, _, rsingle = rendered[j + 1]
        if kind == "add":
            if rtext == "0":
                pass
            elif text == "0":
                text = rtext
            else:
                text = f"{text} + {_paren_if_sum(rtext)}"
            single = None
        elif kind == "sub":
            if rtext == "0":
                pass
            else:
                base = "0" if text == "0" else text
                text = f"{base} - {_paren_if_sum(rtext)}" if base != "0" else f"-{_paren_if_sum(rtext)}"
            single = None
        else:  # mul
            if text == "0" or rtext == "0":
                text, single = "0", None
            elif single is not None and rsingle is not None:
                coeff = single[0] * rsingle[0]
                factors = single[1] + rsingle[1]
                if abs(coeff) < PRINT_THRESHOLD:
                    text, single = "0", None
                else:
                    text = _product_text(coeff, factors, precision)
                    single = (coeff, factors)
            else:
                text = f"({text})*({rtext})"
                single = None
    return text


def _paren_if_sum(text: str) -> str:
    return f"({text})" if (" + " in text or " - " in text) else text


def folded_frequencies(expr: Expression, threshold: float = PRINT_THRESHOLD) -> list:
    """Absolute folded frequencies (base_freq * alpha) of every surviving
    periodic factor, in leaf/dimension order. Used to check recovered spectra."""
    freqs = []
    for leaf in expr.leaves:
        ir = _leaf_ir(leaf, expr.theta, threshold)
        if ir[0] == "sum":
            for _, factor in ir[1]:
                if factor[0] == "trig":
                    freqs.append(abs(factor[2]))
        else:
            if ir[1] != 0.0:
                for factor in ir[2]:
                    if factor[0] == "trig":
                        freqs.append(abs(factor[2]))
    return freqs


# ---------------------------------------------------------------------------
# parsing (the render grammar: literals, + - *, sin cos exp, x1..xd, parens)
# ---------------------------------------------------------------------------

_TOKEN = re.compile(r"\s*(?:(\d+\.?\d*(?:[eE][+-]?\d+)?)|(x\d+)|(sin|cos|exp)|([()+\-*]))")


class ParseError(ValueError):
    """Expression text does not follow the render grammar."""


class Parsed:
    """Tiny evaluable AST produced by parse()."""

    def __init__(self, fn, n_vars):
        self._fn = fn
        self.n_vars = n_vars

    def eval_batch(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] < self.n_vars:
            raise ValueError(f"need at least {self.n_vars} coordinates per point")
        return self._fn(X)

    def __call__(self, X):
        return self.eval_batch(X)


def parse(text: str) -> Parsed:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            if text[pos:].strip():
                raise ParseError(f"bad token at position {pos}: {text[pos:pos + 10]!r}")
            break
        tokens.append(m.groups())
        pos = m.end()
    tokens.append((None, None, None, None))  # sentinel

    state = {"i": 0, "max_var": 0}

    def peek():
        return tokens[state["i"]]

    def advance():
        state["i"] += 1

    def expect_sym(sym):
        if peek()[3] != sym:
            raise ParseError(f"expected {sym!r} at token {state['i']}")
        advance()

    def parse_expr():
        node = parse_term()
        while peek()[3] in ("+", "-"):
            op = peek()[3]
            advance()
            rhs = parse_term()
            node = (lambda a, b: (lambda X: a(X) + b(X)))(node, rhs) if op == "+" \
                else (lambda a, b: (lambda X: a(X) - b(X)))(node, rhs)
        return node

    def parse_term():
        node = parse_factor()
        while peek()[3] == "*":
            advance()
            rhs = parse_factor()
            node = (lambda a, b: (lambda X: a(X) * b(X)))(node, rhs)
        return node

    def parse_factor():
        num, var, fn, sym = peek()
        if sym == "-":
            advance()
            inner = parse_factor()
            return lambda X, f=inner: -f(X)
        if num is not None:
            advance()
            v = float(num)
            return lambda X, v=v: np.full(X.shape[0], v)
        if var is not None:
            advance()
            ix = int(var[1:]) - 1
            if ix < 0:
                raise ParseError(f"bad variable {var!r}")
            state["max_var"] = max(state["max_var"], ix + 1)
            return lambda X, ix=ix: X[:, ix]
        if fn is not None:
            advance()
            expect_sym("(")
            inner = parse_expr()
            expect_sym(")")
            f = {"sin": np.sin, "cos": np.cos, "exp": np.exp}[fn]
            return lambda X, f=f, inner=inner: f(inner(X))
        if sym == "(":
            advance()
            inner = parse_expr()
            expect_sym(")")
            return inner
        raise ParseError(f"unexpected end of expression at token {state['i']}")

    root = parse_expr()
    if any(g is not None for g in peek()):
        raise ParseError("trailing input after expression")
    return Parsed(root, state["max_var"])


# ---------------------------------------------------------------------------
# checkpoint (de)serialization
# ---------------------------------------------------------------------------

def expr_to_dict(expr: Expression) -> dict:
    return {
        "n_leaves": expr.shape.n_leaves,
        "ops": list(expr.ops),
        "d": expr.d,
        "library": {
            "unaries": [[u.kind, u.base_freq] for u in expr.library.unaries],
            "binaries": list(expr.library.binaries),
            "combiners": list(expr.library.combiners),
        },
        "has_lambda": expr.has_lambda,
        "theta": [float(v) for v in expr.theta],
        "leaves": [{
            "combiner": leaf.combiner,
            "unary_kind": leaf.unary.kind,
            "base_freq": leaf.unary.base_freq,
            "alpha_map": list(leaf.alpha_map),
            "w_map": list(leaf.w_map),
            "n_alpha": leaf.n_alpha,
            "n_w": leaf.n_w,
        } for leaf in expr.leaves],
    }


def expr_from_dict(data: dict, dtype=np.float64) -> Expression:
    shape = TreeShape(int(data["n_leaves"]))
    spec = data["library"]
    library = OperatorLibrary(tuple(UnaryOp(k, f) for k, f in spec["unaries"]),
                              tuple(spec["binaries"]), tuple(spec["combiners"]))
    ops = validate_ops(shape, data["ops"], library)
    leaves = []
    offset = 0
    for spec in data["leaves"]:
        leaf = LeafLayout(spec["combiner"],
                          UnaryOp(spec["unary_kind"], spec["base_freq"]),
                          tuple(spec["alpha_map"]), tuple(spec["w_map"]),
                          int(spec["n_alpha"]), int(spec["n_w"]), offset)
        leaves.append(leaf)
        offset += leaf.size
    root = tuple(library.binaries[ops[2 * shape.n_leaves + j]]
                 for j in range(shape.n_leaves - 1))
    theta = np.asarray(data["theta"], dtype=dtype)
    return Expression(shape, ops, int(data["d"]), library, tuple(leaves), root,
                      theta, bool(data["has_lambda"]))

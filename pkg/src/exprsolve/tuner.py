"""Continuous-parameter tuning: Adam, BFGS, staged schedules, grouping.

Candidates from the operator search are scored after a short coarse tune
(Adam then BFGS on one fixed batch) and the pool survivors are refined by a
long small-step fine tune that draws a fresh batch every iteration.  Between
the two stages, near-equal per-dimension leaf parameters can be fused into
shared slots by single-linkage clustering.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage

from . import expr as ex
from .problems import (DegenerateCandidateError, Problem, SampleBatch,
                       error_metrics, loss, loss_and_grad, rayleigh_init,
                       sample_batch)


@dataclass(frozen=True)
class TuneSchedule:
    """Iteration counts and learning rates for the tuning stages.

    t1/t2 form the coarse stage (Adam then BFGS) used to score candidates,
    t3 the post-grouping retrain, t4 the pool fine-tune; polish is the
    quasi-Newton cleanup applied to the final selection.  eta is the
    grouping merge threshold (non-positive disables grouping).
    """

    t1: int = 100
    lr1: float = 1e-2
    t2: int = 20
    t3: int = 200
    lr3: float = 1e-3
    t4: int = 2000
    lr4: float = 1e-4
    eta: float = 0.05
    polish: int = 40

    def __post_init__(self):
        for name in ("t1", "t2", "t3", "t4", "polish"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("lr1", "lr3", "lr4"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be > 0")


@dataclass
class TuneFlags:
    """Mutable counters for anomalies met while tuning; informational only,
    none of them aborts a run."""

    adam_skipped: int = 0
    line_search_failures: int = 0
    curvature_skipped: int = 0
    degenerate_candidates: int = 0


class Adam:
    """Adam with bias correction; non-finite gradients skip the step."""

    def __init__(self, n: int, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0
        self.skipped = 0

    def step(self, theta: np.ndarray, grad) -> np.ndarray:
        if grad is None or not np.all(np.isfinite(grad)):
            self.skipped += 1
            return theta
        g = np.asarray(grad, dtype=float)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * g
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * g * g
        mhat = self.m / (1.0 - self.beta1 ** self.t)
        vhat = self.v / (1.0 - self.beta2 ** self.t)
        return theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)


class BFGS:
    """Dense inverse-Hessian quasi-Newton with Armijo backtracking.

    The inverse-Hessian update is applied only under a strict curvature
    condition, which keeps H symmetric positive definite.  A failed line
    search leaves the iterate in place and is counted, never raised;
    parameter vectors are small enough that the dense matrix is cheap.
    """

    def __init__(self, n: int, c1: float = 1e-4, max_halvings: int = 30,
                 curvature_floor: float = 1e-10):
        self.c1 = float(c1)
        self.max_halvings = int(max_halvings)
        self.curvature_floor = float(curvature_floor)
        self.H = np.eye(n)
        self.line_search_failures = 0
        self.curvature_skipped = 0

    def step(self, theta, f, g, f_and_g, f_only=None):
        """One line-searched step from (theta, f, g).

        Returns (theta, f, g, moved); moved is False when the step failed
        (iterate unchanged) or the gradient already vanished.  When f_only
        is given, backtracking trials past the first skip the gradient and
        a full evaluation is repeated only on Armijo acceptance; the
        iterates are identical either way, gradients are just not computed
        at points the search rejects.
        """
        p = -self.H @ g
        gtp = float(g @ p)
        if gtp >= 0.0:
            # numerical loss of descent: restart from steepest descent
            self.H = np.eye(len(theta))
            p = -g
            gtp = -float(g @ g)
        if gtp == 0.0:
            return theta, f, g, False
        step = 1.0
        for k in range(self.max_halvings):
            cand = theta + step * p
            if f_only is None or k == 0:
                fc, gc = f_and_g(cand)
            else:
                fc, gc = f_only(cand), None
                if np.isfinite(fc) and fc <= f + self.c1 * step * gtp:
                    fc, gc = f_and_g(cand)
            if (gc is not None and np.isfinite(fc) and np.all(np.isfinite(gc))
                    and fc <= f + self.c1 * step * gtp):
                gc = np.asarray(gc, dtype=float)
                s = step * p
                y = gc - g
                sy = float(s @ y)
                if sy > self.curvature_floor * np.linalg.norm(s) * np.linalg.norm(y):
                    rho = 1.0 / sy
                    hy = self.H @ y
                    syh = np.outer(s, hy)
                    self.H = (self.H - rho * (syh + syh.T)
                              + (rho * rho * float(y @ hy) + rho) * np.outer(s, s))
                    self.H = 0.5 * (self.H + self.H.T)
                else:
                    self.curvature_skipped += 1
                return cand, float(fc), gc, True
            step *= 0.5
        self.line_search_failures += 1
        return theta, f, g, False


def _objective(problem: Problem, expression: ex.Expression, batch: SampleBatch):
    def f_and_g(theta):
        report, grad = loss_and_grad(problem, expression.with_params(theta), batch)
        return report.total, grad

    def f_only(theta):
        return loss(problem, expression.with_params(theta), batch).total

    return f_and_g, f_only


def _adam_phase(theta, f_and_g, iters, lr, best_f, best_theta, flags=None):
    opt = Adam(len(theta), lr)
    for _ in range(iters):
        f, g = f_and_g(theta)
        if f < best_f:
            best_f, best_theta = f, theta
        theta = opt.step(theta, g)
    if flags is not None:
        flags.adam_skipped += opt.skipped
    return theta, best_f, best_theta


def _bfgs_phase(theta, f_and_g, iters, best_f, best_theta, flags=None,
                f_only=None):
    # evaluates the incoming iterate even with iters == 0, so the Adam
    # phase's last step is always scored
    f, g = f_and_g(theta)
    if f < best_f:
        best_f, best_theta = f, theta
    if iters > 0 and g is not None and np.all(np.isfinite(g)):
        opt = BFGS(len(theta))
        f = float(f)
        g = np.asarray(g, dtype=float)
        for _ in range(iters):
            theta, f, g, moved = opt.step(theta, f, g, f_and_g, f_only)
            if f < best_f:
                best_f, best_theta = f, theta
            if not moved:
                break
        if flags is not None:
            flags.line_search_failures += opt.line_search_failures
            flags.curvature_skipped += opt.curvature_skipped
    return theta, best_f, best_theta


def _adopt_dtype(expression: ex.Expression, batch: SampleBatch) -> ex.Expression:
    """Parameters are stored in the batch's precision; optimizer internals
    may still accumulate in double."""
    dtype = batch.interior.dtype
    if expression.theta.dtype == dtype:
        return expression
    return replace(expression, theta=expression.theta.astype(dtype))


def coarse_tune(expression: ex.Expression, problem: Problem, batch: SampleBatch,
                schedule: TuneSchedule, rng=None, flags: TuneFlags | None = None):
    """Score-stage tuning: t1 Adam steps then t2 BFGS steps on a fixed batch.

    Eigenvalue problems get their spectral parameter initialized from the
    batch Rayleigh quotient before the first step; degenerate candidates
    come back with an infinite loss instead of raising.  Returns the best
    iterate seen and its loss.  rng is accepted for interface symmetry; the
    coarse stage is deterministic given the batch.
    """
    expression = _adopt_dtype(expression, batch)
    if problem.is_eigen:
        try:
            lam0 = rayleigh_init(problem, expression, batch)
        except DegenerateCandidateError:
            if flags is not None:
                flags.degenerate_candidates += 1
            return expression.with_lambda(0.0), float("inf")
        expression = expression.with_lambda(lam0)
    f_and_g, f_only = _objective(problem, expression, batch)
    theta = expression.theta.copy()
    theta, best_f, best_theta = _adam_phase(theta, f_and_g, schedule.t1,
                                            schedule.lr1, np.inf, theta, flags)
    theta, best_f, best_theta = _bfgs_phase(theta, f_and_g, schedule.t2,
                                            best_f, best_theta, flags, f_only)
    return expression.with_params(best_theta), float(best_f)


def adam_retrain(expression: ex.Expression, problem: Problem, batch: SampleBatch,
                 iters: int, lr: float, flags: TuneFlags | None = None):
    """Best-seen Adam loop on a fixed batch (the post-grouping retrain)."""
    expression = _adopt_dtype(expression, batch)
    f_and_g, _ = _objective(problem, expression, batch)
    theta = expression.theta.copy()
    theta, best_f, best_theta = _adam_phase(theta, f_and_g, iters, lr,
                                            np.inf, theta, flags)
    final = loss(problem, expression.with_params(theta), batch).total
    if final < best_f:
        best_f, best_theta = final, theta
    return expression.with_params(best_theta), float(best_f)


def bfgs_polish(expression: ex.Expression, problem: Problem, batch: SampleBatch,
                iters: int, flags: TuneFlags | None = None):
    """Quasi-Newton cleanup of an already-good candidate on a fixed batch."""
    expression = _adopt_dtype(expression, batch)
    f_and_g, f_only = _objective(problem, expression, batch)
    theta = expression.theta.copy()
    theta, best_f, best_theta = _bfgs_phase(theta, f_and_g, iters,
                                            np.inf, theta, flags, f_only)
    return expression.with_params(best_theta), float(best_f)


@dataclass(frozen=True)
class TraceRow:
    """One fine-tune iteration: loss, error metrics when an exact solution
    is available, and the spectral parameter when present."""

    iteration: int
    loss: float
    rel_l2: float | None
    abs_rel: float | None
    lam: float | None


def fine_tune(expression: ex.Expression, problem: Problem,
              schedule: TuneSchedule, rng: np.random.Generator,
              flags: TuneFlags | None = None):
    """Pool-stage tuning: t4 small-step Adam iterations, fresh batch each
    iteration.

    Error columns in the trace are evaluated on one fixed metric batch drawn
    up front, so they are comparable across iterations.  Returns the
    best-seen parameters and the trace; t4 == 0 returns the input unchanged
    with an empty trace.
    """
    if schedule.t4 <= 0:
        return expression, []
    metric_X = None
    if problem.exact is not None:
        metric_X = problem.domain.sample_interior(problem.n_interior, rng)
    opt = Adam(expression.n_params, schedule.lr4)
    theta = expression.theta.copy()
    best_f, best_theta = np.inf, theta
    trace = []
    for it in range(schedule.t4):
        batch = sample_batch(problem, rng, dtype=expression.theta.dtype)
        report, grad = loss_and_grad(problem, expression.with_params(theta), batch)
        f = report.total
        if f < best_f:
            best_f, best_theta = f, theta
        rel = ab = None
        if metric_X is not None:
            m = error_metrics(expression.with_params(theta), problem.exact, metric_X)
            rel, ab = m["relative_L2"], m["absolute_relative"]
        lam = float(theta[-1]) if expression.has_lambda else None
        trace.append(TraceRow(it, float(f), rel, ab, lam))
        theta = opt.step(theta, grad)
    if flags is not None:
        flags.adam_skipped += opt.skipped
    return expression.with_params(best_theta), trace


# ---------------------------------------------------------------------------
# parameter grouping
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LeafGrouping:
    """Clusters of dimension indices for one leaf, with the shared values.

    w_clusters/w_values are empty for product combiners (single weight,
    nothing to group)."""

    alpha_clusters: tuple
    alpha_values: tuple
    w_clusters: tuple
    w_values: tuple


@dataclass(frozen=True)
class GroupingPlan:
    """Per-leaf fusion of near-equal parameters into shared slots."""

    eta: float
    leaves: tuple
    n_params_before: int
    n_params_after: int


def _cluster_slots(values: np.ndarray, eta: float):
    """Single-linkage flat clusters of 1-d slot values at merge threshold
    eta; labels are dense ints ordered by first occurrence."""
    n = len(values)
    if n <= 1:
        return np.zeros(n, dtype=int), np.asarray(values, dtype=float).copy()
    z = linkage(np.asarray(values, dtype=float).reshape(-1, 1), method="single")
    raw = fcluster(z, t=eta, criterion="distance")
    order: dict = {}
    labels = np.empty(n, dtype=int)
    for i, r in enumerate(raw):
        labels[i] = order.setdefault(int(r), len(order))
    means = np.array([float(np.mean(values[labels == k]))
                      for k in range(len(order))])
    return labels, means


def _partition(mapping, n_slots: int) -> tuple:
    groups = [[] for _ in range(n_slots)]
    for dim, slot in enumerate(mapping):
        groups[slot].append(dim)
    return tuple(tuple(g) for g in groups)


def _current_grouping(leaf: ex.LeafLayout, theta: np.ndarray) -> LeafGrouping:
    a_sl, w_sl, _ = leaf.slices()
    alpha_clusters = _partition(leaf.alpha_map, leaf.n_alpha)
    alpha_values = tuple(float(v) for v in theta[a_sl])
    if leaf.combiner == "sum":
        return LeafGrouping(alpha_clusters, alpha_values,
                            _partition(leaf.w_map, leaf.n_w),
                            tuple(float(v) for v in theta[w_sl]))
    return LeafGrouping(alpha_clusters, alpha_values, (), ())


def group_parameters(expression: ex.Expression, eta: float):
    """Fuse near-equal leaf parameters into shared slots.

    Per leaf, the input coefficients (and, for sum combiners, the output
    weights) are clustered by single-linkage with merge threshold eta; each
    cluster collapses to one trainable slot at the mean of its members.
    Maps compose, so an already-grouped leaf regroups cleanly; applying the
    same eta twice changes nothing, because adjacent cluster means end up
    more than eta apart.  eta <= 0 returns the expression unchanged.
    """
    theta = expression.theta
    if eta <= 0.0:
        plan = GroupingPlan(float(eta),
                            tuple(_current_grouping(leaf, theta)
                                  for leaf in expression.leaves),
                            expression.n_params, expression.n_params)
        return plan, expression

    new_leaves = []
    blocks = []
    groupings = []
    offset = 0
    for leaf in expression.leaves:
        a_sl, w_sl, b_ix = leaf.slices()
        a_labels, a_means = _cluster_slots(theta[a_sl], eta)
        alpha_map = tuple(int(a_labels[s]) for s in leaf.alpha_map)
        if leaf.combiner == "sum":
            w_labels, w_means = _cluster_slots(theta[w_sl], eta)
            w_map = tuple(int(w_labels[s]) for s in leaf.w_map)
            n_w = len(w_means)
            w_clusters = _partition(w_map, n_w)
            w_values = tuple(float(v) for v in w_means)
        else:
            w_map = leaf.w_map
            w_means = theta[w_sl].copy()
            n_w = leaf.n_w
            w_clusters, w_values = (), ()
        new_leaf = ex.LeafLayout(leaf.combiner, leaf.unary, alpha_map, w_map,
                                 len(a_means), n_w, offset)
        offset += new_leaf.size
        new_leaves.append(new_leaf)
        blocks.append(np.concatenate([a_means, w_means, theta[b_ix:b_ix + 1]]))
        groupings.append(LeafGrouping(_partition(alpha_map, len(a_means)),
                                      tuple(float(v) for v in a_means),
                                      w_clusters, w_values))
    if expression.has_lambda:
        blocks.append(theta[-1:])
    regrouped = replace(expression, leaves=tuple(new_leaves),
                        theta=np.concatenate(blocks).astype(theta.dtype,
                                                            copy=False))
    plan = GroupingPlan(float(eta), tuple(groupings),
                        expression.n_params, regrouped.n_params)
    return plan, regrouped

"""Tuning oracles.

Adam is checked step-for-step against a textbook reimplementation, BFGS
against closed-form quadratic optima with the inverse-Hessian matrix
inspected for symmetry and positive definiteness, grouping against
hand-worked clusterings, and the staged tuners against small problems whose
global optimum is known exactly.
"""

import numpy as np
import pytest

import exprsolve.expr as ex
import exprsolve.problems as pr
import exprsolve.tuner as tu
from exprsolve.geometry import Hypercube

LIB = ex.default_library()
CIX = {"sum": 0, "product": 1}
BIX = {"add": 0, "sub": 1, "mul": 2}


def uix(kind, k=1):
    return LIB.unaries.index(ex.UnaryOp(kind, k))


def build(named_ops, d, seed=0):
    """named_ops = (comb1, unary1, comb2, unary2, binary); unaries may be a
    plain kind or (kind, base_freq)."""
    c1, u1, c2, u2, b = named_ops

    def u(spec):
        return uix(*spec) if isinstance(spec, tuple) else uix(spec)

    ops = (CIX[c1], u(u1), CIX[c2], u(u2), BIX[b])
    return ex.build_expression(ex.TreeShape(2), ops, d,
                               rng=np.random.default_rng(seed))


def line_fit_problem():
    """d=1 Laplace problem whose loss is a pure boundary fit to the line 3x;
    any linear candidate has zero interior residual."""
    return pr.Problem(
        name="line_fit", domain=Hypercube((0.5,), 1.0), d=1,
        residual_kind="neg_lap", rhs=lambda X: np.zeros(len(X)),
        boundary_fn=lambda X: 3.0 * X[:, 0], exact=lambda X: 3.0 * X[:, 0],
        n_interior=32, n_boundary=64)


def line_candidate(seed=1):
    return build(("sum", "identity", "sum", "zero", "add"), d=1, seed=seed)


def exact_eigen_expr(d):
    """Product of sin(pi x_i) as (product, sin base 3) x (product, one)."""
    e = build(("product", ("sin", 3), "product", "one", "mul"), d=d, seed=0)
    th = np.zeros_like(e.theta)
    for leaf, alpha in zip(e.leaves, (np.pi / 3.0, 1.0)):
        a_sl, w_sl, b_ix = leaf.slices()
        th[a_sl] = alpha
        th[w_sl] = 1.0
        th[b_ix] = 0.0
    return e.with_params(th)


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

def test_schedule_defaults():
    s = tu.TuneSchedule()
    assert (s.t1, s.t2, s.t3, s.t4) == (100, 20, 200, 2000)
    assert (s.lr1, s.lr3, s.lr4) == (1e-2, 1e-3, 1e-4)
    assert s.eta == 0.05
    assert s.polish == 40


def test_schedule_validation():
    with pytest.raises(ValueError):
        tu.TuneSchedule(t1=-1)
    with pytest.raises(ValueError):
        tu.TuneSchedule(lr4=0.0)
    tu.TuneSchedule(eta=-1.0)  # non-positive eta just disables grouping


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def textbook_adam(theta0, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    th = np.asarray(theta0, dtype=float).copy()
    m = np.zeros_like(th)
    v = np.zeros_like(th)
    for t, g in enumerate(grads, start=1):
        g = np.asarray(g, dtype=float)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        th = th - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return th


def test_adam_matches_textbook_updates():
    rng = np.random.default_rng(3)
    grads = [rng.normal(size=4) for _ in range(10)]
    th0 = np.array([1.0, -2.0, 0.5, 3.0])
    opt = tu.Adam(4, lr=0.05)
    th = th0.copy()
    for g in grads:
        th = opt.step(th, g)
    assert np.array_equal(th, textbook_adam(th0, grads, 0.05))


def test_adam_quadratic_converges():
    th = np.array([1.0])
    opt = tu.Adam(1, lr=0.1)
    for _ in range(200):
        th = opt.step(th, 2.0 * th)
    assert abs(th[0]) <= 1e-3


def test_adam_skips_nonfinite_gradient():
    g0 = np.array([0.3, -0.7])
    g1 = np.array([-1.1, 0.2])
    bad = np.array([np.nan, 1.0])
    a = tu.Adam(2, lr=0.01)
    b = tu.Adam(2, lr=0.01)
    th_a = np.array([1.0, 1.0])
    th_b = th_a.copy()
    for g in (g0, bad, g1):
        th_a = a.step(th_a, g)
    for g in (g0, g1):
        th_b = b.step(th_b, g)
    assert np.array_equal(th_a, th_b)
    assert a.skipped == 1 and b.skipped == 0
    th_c = a.step(th_a, None)  # poisoned losses hand the optimizer None
    assert np.array_equal(th_c, th_a)
    assert a.skipped == 2


# ---------------------------------------------------------------------------
# BFGS
# ---------------------------------------------------------------------------

def quad_objective(n, seed, cond=30.0):
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    a = q @ np.diag(np.geomspace(1.0, cond, n)) @ q.T
    x_star = rng.normal(size=n)

    def f_and_g(x):
        r = x - x_star
        return 0.5 * float(r @ a @ r), a @ r

    return f_and_g, x_star


def run_bfgs(opt, theta, f_and_g, iters, after_step=None):
    f, g = f_and_g(theta)
    for _ in range(iters):
        theta, f, g, moved = opt.step(theta, f, g, f_and_g)
        if after_step is not None:
            after_step(opt)
        if not moved:
            break
    return theta, f, g


def test_bfgs_quadratic_convergence():
    f_and_g, x_star = quad_objective(10, seed=5)
    opt = tu.BFGS(10)
    th, _, g = run_bfgs(opt, np.zeros(10), f_and_g, 30)
    assert np.linalg.norm(g) <= 1e-10
    assert np.linalg.norm(th - x_star) <= 1e-9
    assert opt.line_search_failures == 0


def test_bfgs_inverse_hessian_stays_spd():
    f_and_g, _ = quad_objective(6, seed=11)
    opt = tu.BFGS(6)
    min_eigs = []

    def check(o):
        assert np.array_equal(o.H, o.H.T)
        min_eigs.append(float(np.linalg.eigvalsh(o.H).min()))

    run_bfgs(opt, np.full(6, 2.0), f_and_g, 25, after_step=check)
    assert min_eigs and min(min_eigs) > 0.0


def test_bfgs_line_search_failure_keeps_point():
    # adversarial oracle: reported gradient points uphill, so the Armijo
    # condition can never be met along the proposed direction
    def lying(x):
        return float(x @ x), -2.0 * x

    opt = tu.BFGS(3)
    x0 = np.array([1.0, -1.0, 2.0])
    f, g = lying(x0)
    th, f2, g2, moved = opt.step(x0, f, g, lying)
    assert not moved
    assert np.array_equal(th, x0)
    assert f2 == f
    assert opt.line_search_failures == 1


def test_bfgs_backtracks_past_poisoned_region():
    # quartic bowl with evaluations poisoned outside radius 1.1: the full
    # step lands there and must be rejected, halvings recover
    def f_and_g(x):
        if np.linalg.norm(x) > 1.1:
            return float("inf"), None
        n2 = float(x @ x)
        return n2 * n2, 4.0 * n2 * x

    opt = tu.BFGS(2)
    x0 = np.array([1.0, 0.0])
    th, f, _ = run_bfgs(opt, x0, f_and_g, 1)
    assert np.isfinite(f) and f < 1.0
    assert np.linalg.norm(th) <= 1.1
    assert opt.line_search_failures == 0


# ---------------------------------------------------------------------------
# coarse_tune
# ---------------------------------------------------------------------------

def test_coarse_tune_linear_boundary_fit():
    problem = line_fit_problem()
    batch = pr.sample_batch(problem, np.random.default_rng(7))
    out, best = tu.coarse_tune(line_candidate(seed=1), problem, batch,
                               tu.TuneSchedule())
    assert best <= 1e-16
    vals, ok = ex.eval_batch(out, np.array([[0.0], [0.25], [1.0]]))
    assert ok
    assert abs(vals[0]) <= 1e-7          # intercept
    assert abs(vals[2] - 3.0) <= 1e-7    # slope via u(1)
    assert abs(vals[1] - 0.75) <= 1e-7


def test_coarse_tune_best_seen_and_reported_loss_consistent():
    problem = line_fit_problem()
    batch = pr.sample_batch(problem, np.random.default_rng(9))
    e = line_candidate(seed=2)
    init = pr.loss(problem, e, batch).total
    # deliberately unstable schedule: huge steps oscillate
    out, best = tu.coarse_tune(e, problem, batch,
                               tu.TuneSchedule(t1=30, lr1=5.0, t2=0))
    assert best <= init
    assert pr.loss(problem, out, batch).total == best


def test_coarse_tune_deterministic():
    problem = pr.make_benchmark("poisson2d_holes_a")
    batch = pr.sample_batch(problem, np.random.default_rng(3), n=300, m=300)
    e = build(("product", ("sin", 24), "product", "one", "mul"), d=2, seed=8)
    sched = tu.TuneSchedule(t1=25, t2=5)
    out1, loss1 = tu.coarse_tune(e, problem, batch, sched)
    out2, loss2 = tu.coarse_tune(e, problem, batch, sched)
    assert loss1 == loss2
    assert np.array_equal(out1.theta, out2.theta)


def test_coarse_tune_recovers_quadratic_benchmark():
    problem = pr.make_benchmark("pb_ex2_10d")
    batch = pr.sample_batch(problem, np.random.default_rng(21), n=1000, m=1000)
    e = build(("sum", "square", "sum", "square", "add"), d=10, seed=4)
    # 42 parameters need more quasi-Newton iterations than the scoring default
    out, best = tu.coarse_tune(e, problem, batch, tu.TuneSchedule(t2=80))
    assert best <= 1e-6
    # the two leaves together must supply coefficient 2 per dimension
    th = out.theta
    coeff = np.zeros(10)
    bias = 0.0
    for leaf in out.leaves:
        a_sl, w_sl, b_ix = leaf.slices()
        coeff += th[w_sl][leaf.w_ix] * th[a_sl][leaf.alpha_ix] ** 2
        bias += th[b_ix]
    assert np.all(np.abs(coeff - 2.0) <= 1e-3)
    assert abs(bias) <= 1e-3
    # w and alpha are only identified through w*alpha^2, so check the function
    X = problem.domain.sample_interior(2000, np.random.default_rng(77))
    m = pr.error_metrics(out, problem.exact, X)
    assert m["relative_L2"] <= 1e-8


def test_coarse_tune_frequency_mismatch_orders_losses():
    problem = pr.make_benchmark("poisson2d_holes_a")
    batch = pr.sample_batch(problem, np.random.default_rng(33), n=1000, m=1000)
    sched = tu.TuneSchedule()
    right = build(("product", ("sin", 24), "product", "one", "mul"), d=2, seed=5)
    wrong = build(("product", ("sin", 3), "product", "one", "mul"), d=2, seed=5)
    _, loss_right = tu.coarse_tune(right, problem, batch, sched)
    _, loss_wrong = tu.coarse_tune(wrong, problem, batch, sched)
    assert loss_right < loss_wrong


def test_coarse_tune_eigen_rayleigh_initialization():
    problem = pr.make_benchmark("laplace_eigen_2d")
    batch = pr.sample_batch(problem, np.random.default_rng(12), n=1000, m=1000)
    e = exact_eigen_expr(2)
    want = pr.rayleigh_init(problem, e, batch)
    # zero-iteration coarse stage: only the initializer runs
    out, best = tu.coarse_tune(e, problem, batch, tu.TuneSchedule(t1=0, t2=0))
    assert out.has_lambda
    assert out.lam == pytest.approx(want, rel=1e-12)
    assert np.isfinite(best)


def test_coarse_tune_eigen_improves_lambda():
    problem = pr.make_benchmark("laplace_eigen_2d")
    batch = pr.sample_batch(problem, np.random.default_rng(12), n=2000, m=2000)
    out, best = tu.coarse_tune(exact_eigen_expr(2), problem, batch,
                               tu.TuneSchedule())
    target = 2.0 * np.pi ** 2
    assert best < 1.0
    assert abs(out.lam - target) / target <= 0.02


def test_coarse_tune_degenerate_eigen_candidate_contained():
    problem = pr.make_benchmark("laplace_eigen_2d")
    batch = pr.sample_batch(problem, np.random.default_rng(1), n=200, m=200)
    e = build(("sum", "zero", "sum", "zero", "add"), d=2, seed=1)
    e = e.with_params(np.zeros_like(e.theta))
    flags = tu.TuneFlags()
    out, best = tu.coarse_tune(e, problem, batch, tu.TuneSchedule(), flags=flags)
    assert best == float("inf")
    assert flags.degenerate_candidates == 1
    assert out.has_lambda  # downstream code may still evaluate the loss


# ---------------------------------------------------------------------------
# retrain / polish / fine_tune
# ---------------------------------------------------------------------------

def test_adam_retrain_and_bfgs_polish_improve():
    problem = line_fit_problem()
    batch = pr.sample_batch(problem, np.random.default_rng(17))
    e = line_candidate(seed=6)
    before = pr.loss(problem, e, batch).total
    mid, mid_loss = tu.adam_retrain(e, problem, batch, iters=200, lr=1e-2)
    assert mid_loss < before
    out, polished = tu.bfgs_polish(mid, problem, batch, iters=40)
    assert polished <= mid_loss
    assert polished <= 1e-18


def test_fine_tune_zero_iterations_returns_input():
    problem = line_fit_problem()
    e = line_candidate(seed=3)
    out, trace = tu.fine_tune(e, problem, tu.TuneSchedule(t4=0),
                              np.random.default_rng(0))
    assert trace == []
    assert np.array_equal(out.theta, e.theta)


def test_fine_tune_trace_columns_and_improvement():
    problem = line_fit_problem()
    batch = pr.sample_batch(problem, np.random.default_rng(8))
    e, _ = tu.coarse_tune(line_candidate(seed=3), problem, batch,
                          tu.TuneSchedule(t1=40, t2=0))
    out, trace = tu.fine_tune(e, problem, tu.TuneSchedule(t4=150, lr4=1e-2),
                              np.random.default_rng(5))
    assert len(trace) == 150
    assert [r.iteration for r in trace] == list(range(150))
    assert all(r.lam is None for r in trace)
    rels = [r.rel_l2 for r in trace]
    assert all(np.isfinite(r) for r in rels)
    assert rels[-1] <= rels[0]
    # best-seen bookkeeping: the returned parameters score at least as well
    # as the worst traced iterate on a fresh batch
    final = pr.loss(problem, out,
                    pr.sample_batch(problem, np.random.default_rng(99))).total
    assert final <= trace[0].loss


def test_fine_tune_traces_lambda_for_eigen():
    problem = pr.make_benchmark("laplace_eigen_2d")
    batch = pr.sample_batch(problem, np.random.default_rng(2), n=400, m=400)
    e, _ = tu.coarse_tune(exact_eigen_expr(2), problem, batch,
                          tu.TuneSchedule(t1=5, t2=0))
    out, trace = tu.fine_tune(e, problem, tu.TuneSchedule(t4=10),
                              np.random.default_rng(3))
    assert len(trace) == 10
    assert all(isinstance(r.lam, float) for r in trace)
    assert out.has_lambda


# ---------------------------------------------------------------------------
# grouping
# ---------------------------------------------------------------------------

def with_leaf_block(e, leaf_index, alphas=None, weights=None):
    th = e.theta.copy()
    a_sl, w_sl, _ = e.leaves[leaf_index].slices()
    if alphas is not None:
        th[a_sl] = alphas
    if weights is not None:
        th[w_sl] = weights
    return e.with_params(th)


def test_grouping_clusters_close_alphas():
    e = build(("sum", "identity", "sum", "identity", "add"), d=3, seed=0)
    e = with_leaf_block(e, 0, alphas=[0.99, 1.01, 5.0])
    plan, out = tu.group_parameters(e, 0.1)
    g = plan.leaves[0]
    assert g.alpha_clusters == ((0, 1), (2,))
    assert g.alpha_values == (1.0, 5.0)
    lf = out.leaves[0]
    assert lf.alpha_map == (0, 0, 1)
    assert lf.n_alpha == 2
    assert out.theta[lf.slices()[0]].tolist() == [1.0, 5.0]


def test_grouping_all_equal_collapses_to_one():
    # build_expression starts every alpha at exactly 1
    e = build(("sum", "square", "sum", "square", "add"), d=6, seed=1)
    plan, out = tu.group_parameters(e, 0.05)
    for lf, g in zip(out.leaves, plan.leaves):
        assert lf.n_alpha == 1
        assert g.alpha_clusters == ((0, 1, 2, 3, 4, 5),)
        assert g.alpha_values == (1.0,)
    assert out.n_params == plan.n_params_after
    assert plan.n_params_after < plan.n_params_before == e.n_params


def test_grouping_sum_weights_grouped_separately():
    e = build(("sum", "identity", "sum", "zero", "add"), d=3, seed=2)
    e = with_leaf_block(e, 0, alphas=[1.0, 1.0, 1.0], weights=[2.0, 2.01, -1.0])
    plan, out = tu.group_parameters(e, 0.05)
    g = plan.leaves[0]
    assert g.alpha_clusters == ((0, 1, 2),)
    assert g.w_clusters == ((0, 1), (2,))
    assert g.w_values == (2.005, -1.0)
    assert out.leaves[0].w_map == (0, 0, 1)
    assert out.leaves[0].n_w == 2


def test_grouping_product_weight_untouched():
    e = build(("product", ("sin", 3), "product", "one", "mul"), d=4, seed=3)
    w_before = float(e.theta[e.leaves[0].slices()[1]][0])
    plan, out = tu.group_parameters(e, 0.05)
    g = plan.leaves[0]
    assert g.w_clusters == ()
    assert g.w_values == ()
    lf = out.leaves[0]
    assert lf.n_w == 1
    assert float(out.theta[lf.slices()[1]][0]) == w_before


def test_grouping_idempotent():
    rng = np.random.default_rng(9)
    e = build(("sum", "sin", "sum", "identity", "add"), d=6, seed=9)
    th = e.theta.copy()
    for leaf in e.leaves:
        a_sl, w_sl, _ = leaf.slices()
        th[a_sl] = rng.uniform(0.5, 1.5, size=leaf.n_alpha)
        th[w_sl] = rng.uniform(-2.0, 2.0, size=leaf.n_w)
    e = e.with_params(th)
    plan1, once = tu.group_parameters(e, 0.3)
    plan2, twice = tu.group_parameters(once, 0.3)
    assert np.array_equal(once.theta, twice.theta)
    assert [l.alpha_map for l in once.leaves] == [l.alpha_map for l in twice.leaves]
    assert [l.w_map for l in once.leaves] == [l.w_map for l in twice.leaves]
    assert plan2.n_params_before == plan2.n_params_after == plan1.n_params_after


def test_grouping_eta_nonpositive_is_noop():
    e = build(("sum", "cos", "sum", "one", "add"), d=4, seed=4)
    plan, out = tu.group_parameters(e, 0.0)
    assert out is e
    assert plan.n_params_before == plan.n_params_after == e.n_params
    assert plan.leaves[0].alpha_clusters == ((0,), (1,), (2,), (3,))


def test_grouping_partition_covers_dimensions():
    rng = np.random.default_rng(10)
    for _ in range(20):
        e = build(("sum", "sin", "product", "cos", "add"), d=5, seed=11)
        th = e.theta.copy()
        for leaf in e.leaves:
            a_sl, w_sl, _ = leaf.slices()
            th[a_sl] = rng.uniform(0.0, 2.0, size=leaf.n_alpha)
            th[w_sl] = rng.uniform(-2.0, 2.0, size=leaf.n_w)
        e = e.with_params(th)
        plan, out = tu.group_parameters(e, float(rng.uniform(0.01, 1.0)))
        for g, lf in zip(plan.leaves, out.leaves):
            assert sorted(i for c in g.alpha_clusters for i in c) == list(range(5))
            assert max(lf.alpha_map) + 1 == lf.n_alpha == len(g.alpha_values)
            if lf.combiner == "sum":
                assert sorted(i for c in g.w_clusters for i in c) == list(range(5))


def test_grouping_value_semantics_at_cluster_means():
    # the regrouped tree must evaluate exactly like the original tree with
    # every per-dimension value replaced by its cluster mean
    e = build(("sum", "sin", "product", "cos", "mul"), d=5, seed=13)
    e = with_leaf_block(e, 0, alphas=[1.0, 1.02, 1.5, 0.2, 0.21])
    e = with_leaf_block(e, 1, alphas=[0.8, 0.83, 2.0, 2.01, 5.0])
    plan, out = tu.group_parameters(e, 0.1)
    ref = e.theta.copy()
    for leaf, g in zip(e.leaves, plan.leaves):
        a_sl = leaf.slices()[0]
        for value, cluster in zip(g.alpha_values, g.alpha_clusters):
            for dim in cluster:
                ref[a_sl][leaf.alpha_map[dim]] = value
        if leaf.combiner == "sum":
            w_sl = leaf.slices()[1]
            for value, cluster in zip(g.w_values, g.w_clusters):
                for dim in cluster:
                    ref[w_sl][leaf.w_map[dim]] = value
    expected = e.with_params(ref)
    X = np.random.default_rng(14).uniform(-1.0, 1.0, size=(64, 5))
    va, oka = ex.eval_batch(out, X)
    vb, okb = ex.eval_batch(expected, X)
    assert oka and okb
    assert np.array_equal(va, vb)


def test_grouping_preserves_lambda():
    e = exact_eigen_expr(4).with_lambda(39.0)
    plan, out = tu.group_parameters(e, 0.05)
    assert out.has_lambda
    assert out.lam == 39.0
    # product leaves: 4 alphas + w + b collapse to 1 + w + b, lambda kept
    assert plan.n_params_before == 13
    assert plan.n_params_after == 7
    assert out.n_params == 7


def test_grouping_then_retrain_runs_end_to_end():
    problem = pr.make_benchmark("poisson2d_holes_a")
    batch = pr.sample_batch(problem, np.random.default_rng(23), n=800, m=800)
    e = build(("product", ("sin", 24), "product", "one", "mul"), d=2, seed=7)
    coarse, _ = tu.coarse_tune(e, problem, batch, tu.TuneSchedule())
    plan, grouped = tu.group_parameters(coarse, 0.05)
    assert plan.n_params_after <= plan.n_params_before
    sched = tu.TuneSchedule()
    g_loss = pr.loss(problem, grouped, batch).total
    retrained, r_loss = tu.adam_retrain(grouped, problem, batch,
                                        sched.t3, sched.lr3)
    assert r_loss <= g_loss
    assert retrained.n_params == grouped.n_params

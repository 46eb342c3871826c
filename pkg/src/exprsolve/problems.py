"""PDE benchmarks: residual functionals, discretized losses with exact
parameter gradients, eigenvalue initialization, and error metrics.

A Problem couples a sampling domain with a pointwise residual
D(value, laplacian, x) and boundary data. The standard loss is
    (1/N) sum |D(u(x_i))|^2  +  alpha_b (1/M) sum |u(x_j) - g(x_j)|^2
and eigenvalue problems add alpha_n * min_i (|u(x_i)|^p - c)^2 plus a
trainable eigenvalue lambda inside the residual.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import expr as ex
from . import geometry as geo

RESIDUAL_KINDS = ("lap_plus_cu", "neg_lap_plus_sinh", "neg_lap", "eigen")

# published average relative L2 errors, used by the reproduce command to
# report how close a run came to the reference results
REFERENCE_REL_L2 = {
    "pb_ex1_100d": 1e-6,
    "pb_ex2_10d": 3.3e-6,
    "poisson2d_holes_a": 4.9e-7,
    "poisson2d_holes_b": 8.6e-7,
    "poisson3d_product": 4.1e-14,
    "poisson3d_exp": 3.2e-15,
    "laplace_eigen_10d": 3e-3,
}


class DegenerateCandidateError(RuntimeError):
    """Candidate is numerically zero (or flat) where a quotient needs it."""


class MetricsError(ValueError):
    """Error metrics are undefined (exact solution vanishes on the batch)."""


@dataclass(frozen=True)
class SampleBatch:
    interior: np.ndarray
    boundary: np.ndarray
    boundary_strata: tuple = ()

    @property
    def n(self) -> int:
        return len(self.interior)

    @property
    def m(self) -> int:
        return len(self.boundary)


@dataclass(frozen=True)
class Problem:
    name: str
    domain: object
    d: int
    residual_kind: str
    rhs: object = None            # f(X) -> (n,); None means f == 0
    boundary_fn: object = None    # g(X) -> (m,); None means g == 0
    exact: object = None          # u*(X) -> (n,), optional
    exact_lambda: float = None
    c_coeff: float = 0.0          # zeroth-order coefficient of lap_plus_cu
    alpha_b: float = 1.0
    alpha_n: float = 1.0
    p_norm: float = 1.0
    c_norm: float = 1.0
    n_interior: int = 2000
    n_boundary: int = 2000

    def __post_init__(self):
        if self.residual_kind not in RESIDUAL_KINDS:
            raise ValueError(f"unknown residual kind {self.residual_kind!r}")

    @property
    def is_eigen(self) -> bool:
        return self.residual_kind == "eigen"


@dataclass
class LossReport:
    total: float
    interior: float
    boundary: float
    normalization: float
    n_interior: int
    n_boundary: int
    ok: bool

    @classmethod
    def poisoned(cls, n: int, m: int) -> "LossReport":
        return cls(math.inf, math.inf, math.inf, math.inf, n, m, False)


def sample_batch(problem: Problem, rng: np.random.Generator,
                 n: int | None = None, m: int | None = None,
                 dtype=np.float64) -> SampleBatch:
    n = problem.n_interior if n is None else n
    m = problem.n_boundary if m is None else m
    interior = problem.domain.sample_interior(n, rng).astype(dtype, copy=False)
    boundary = problem.domain.sample_boundary(m, rng).astype(dtype, copy=False)
    strata = (m,)
    holes = getattr(problem.domain, "holes", ())
    if holes:
        m_walls = m // 2
        base, extra = divmod(m - m_walls, len(holes))
        strata = (m_walls,) + tuple(base + (1 if k < extra else 0)
                                    for k in range(len(holes)))
    return SampleBatch(interior, boundary, strata)


# ---------------------------------------------------------------------------
# residual catalog: values plus partial derivatives wrt (value, laplacian)
# ---------------------------------------------------------------------------

def _residual(problem: Problem, value: np.ndarray, lap: np.ndarray,
              lam: float | None, X: np.ndarray):
    """Returns (D, dD/dvalue, dD/dlap, dD/dlambda or None)."""
    f = problem.rhs(X) if problem.rhs is not None else 0.0
    kind = problem.residual_kind
    if kind == "lap_plus_cu":
        c = problem.c_coeff
        return lap + c * value - f, np.full_like(value, c), 1.0, None
    if kind == "neg_lap_plus_sinh":
        return -lap + np.sinh(value) - f, np.cosh(value), -1.0, None
    if kind == "neg_lap":
        return -lap - f, np.zeros_like(value), -1.0, None
    # eigen: lap + lambda * value, f unused (homogeneous). The positive
    # Dirichlet spectrum convention: -lap(u) = lambda*u, matching the
    # Rayleigh-quotient initializer which is positive by construction.
    return lap + lam * value, np.full_like(value, lam), 1.0, value


def loss(problem: Problem, expression: ex.Expression,
         batch: SampleBatch) -> LossReport:
    report, _ = loss_and_grad(problem, expression, batch, need_grad=False)
    return report


def loss_and_grad(problem: Problem, expression: ex.Expression,
                  batch: SampleBatch, need_grad: bool = True):
    """LossReport plus the exact gradient over expression.theta (None when the
    evaluation is poisoned by overflow or non-finite intermediates)."""
    if problem.is_eigen and not expression.has_lambda:
        raise ValueError("eigenvalue problems need the lambda parameter slot")
    n, m = batch.n, batch.m
    if n < 1 or m < 1:
        raise ValueError("batches need at least one interior and boundary point")

    fw = ex.forward_batch(expression, batch.interior)
    if need_grad:
        # one order-1 forward covers the boundary values and everything the
        # value-seeded reverse pass reads
        fwb = ex.forward_batch(expression, batch.boundary, 1)
        vb, ok_b = fwb.value, fwb.ok
    else:
        fwb = None
        vb, ok_b = ex.eval_batch(expression, batch.boundary)
    if not (fw.ok and ok_b):
        return LossReport.poisoned(n, m), None

    with np.errstate(over="ignore", invalid="ignore"):
        D, d_val, d_lap, d_lam = _residual(problem, fw.value, fw.lap,
                                           expression.lam, batch.interior)
        interior = float(np.mean(D * D))
        g = problem.boundary_fn(batch.boundary) if problem.boundary_fn is not None else 0.0
        r_b = vb - g
        boundary = float(np.mean(r_b * r_b))

        normalization = 0.0
        i_star = None
        if problem.is_eigen:
            p, c = problem.p_norm, problem.c_norm
            q = np.abs(fw.value) ** p - c
            i_star = int(np.argmin(q * q))
            normalization = float(q[i_star] ** 2)

        total = interior + problem.alpha_b * boundary + problem.alpha_n * normalization
    if not np.isfinite(total):
        return LossReport.poisoned(n, m), None
    report = LossReport(total, interior, boundary, normalization, n, m, True)
    if not need_grad:
        return report, None

    with np.errstate(over="ignore", invalid="ignore"):
        s_val = (2.0 / n) * D * d_val
        s_lap = (2.0 / n) * D * d_lap
        if problem.is_eigen:
            p, c = problem.p_norm, problem.c_norm
            v = fw.value[i_star]
            q_star = abs(v) ** p - c
            if v != 0.0:
                s_val[i_star] += (problem.alpha_n * 2.0 * q_star * p
                                  * abs(v) ** (p - 1.0) * np.sign(v))
        grad = ex.param_grad_batch(expression, batch.interior, s_val, None, s_lap,
                                   forward=fw)
        s_b = (2.0 / m) * problem.alpha_b * r_b
        grad += ex.param_grad_batch(expression, batch.boundary, s_b, None, None,
                                    forward=fwb)
        if problem.is_eigen:
            grad[-1] += (2.0 / n) * float(np.sum(D * d_lam))
    if not np.isfinite(grad).all():
        return report, None
    return report, grad


def rayleigh_init(problem: Problem, expression: ex.Expression,
                  batch: SampleBatch) -> float:
    """Eigenvalue initializer: batch quotient of mean squared gradient norm to
    mean squared value."""
    fw = ex.forward_batch(expression, batch.interior)
    if not fw.ok:
        raise DegenerateCandidateError("candidate is non-finite on the batch")
    num = float(np.mean((fw.grad * fw.grad).sum(axis=1)))
    den = float(np.mean(fw.value * fw.value))
    if den < 1e-12 or num < 1e-12:
        raise DegenerateCandidateError(
            f"quotient degenerate (numerator {num:.3e}, denominator {den:.3e})")
    return num / den


def metrics_from_values(u, v) -> dict:
    """relative_L2 = ||v - u|| / ||u||, absolute_relative = sum|v - u| / sum|u|;
    v = None marks a prediction that overflowed and scores infinite."""
    u = np.asarray(u, dtype=float)
    denom_l2 = float(np.sqrt(np.sum(u * u)))
    denom_l1 = float(np.sum(np.abs(u)))
    if denom_l1 == 0.0 or denom_l2 == 0.0:
        raise MetricsError("exact solution vanishes on the test batch")
    if v is None:
        return {"relative_L2": math.inf, "absolute_relative": math.inf}
    diff = np.asarray(v, dtype=float) - u
    return {
        "relative_L2": float(np.sqrt(np.sum(diff * diff))) / denom_l2,
        "absolute_relative": float(np.sum(np.abs(diff))) / denom_l1,
    }


def error_metrics(expression: ex.Expression, exact, X: np.ndarray) -> dict:
    v, ok = ex.eval_batch(expression, X)
    return metrics_from_values(exact(X), v if ok else None)


def scale_invariant_relative_l2(expression: ex.Expression, exact,
                                X: np.ndarray) -> float:
    """min over s of ||s*u~ - u|| / ||u||: eigenfunctions are defined up to a
    constant multiple, so metrics for them quotient out the scale."""
    u = np.asarray(exact(X), dtype=float)
    norm_u = float(np.sqrt(np.sum(u * u)))
    if norm_u == 0.0:
        raise MetricsError("exact solution vanishes on the test batch")
    v, ok = ex.eval_batch(expression, X)
    if not ok:
        return math.inf
    vv = float(np.sum(v * v))
    if vv == 0.0:
        return 1.0
    s = float(np.sum(v * u)) / vv
    diff = s * v - u
    return float(np.sqrt(np.sum(diff * diff))) / norm_u


# ---------------------------------------------------------------------------
# benchmark catalog
# ---------------------------------------------------------------------------

def _pb_ex1(name: str) -> Problem:
    d = 100

    def exact(X):
        return np.cos(2.0 * X).sum(axis=1)

    return Problem(
        name=name, domain=geo.Ball((0.0,) * d, 1.0), d=d,
        residual_kind="lap_plus_cu", c_coeff=-1.0,
        rhs=lambda X: -5.0 * np.cos(2.0 * X).sum(axis=1),
        boundary_fn=exact, exact=exact,
        n_interior=2000, n_boundary=2000)


def _pb_ex2(name: str) -> Problem:
    d = 10

    def exact(X):
        return 2.0 * (X * X).sum(axis=1)

    def rhs(X):
        return -4.0 * d + np.sinh(2.0 * (X * X).sum(axis=1))

    return Problem(
        name=name, domain=geo.Ball((0.0,) * d, 1.0), d=d,
        residual_kind="neg_lap_plus_sinh", rhs=rhs,
        boundary_fn=exact, exact=exact,
        n_interior=2000, n_boundary=2000)


MU = 7.0 * np.pi


def _poisson2d(name: str, holes: tuple) -> Problem:
    def exact(X):
        return np.sin(MU * X[:, 0]) * np.sin(MU * X[:, 1])

    return Problem(
        name=name,
        domain=geo.PerforatedBox(geo.Hypercube((0.0, 0.0), 2.0), holes), d=2,
        residual_kind="neg_lap",
        rhs=lambda X: 2.0 * MU ** 2 * np.sin(MU * X[:, 0]) * np.sin(MU * X[:, 1]),
        boundary_fn=exact, exact=exact,
        n_interior=2000, n_boundary=2000)


def _poisson3d(name: str, geometry_seed: int) -> Problem:
    box = geo.Hypercube((0.0, 0.0, 0.0), 2.0)
    holes = geo.build_grid_holes(box, 5, (0.04, 0.12),
                                 np.random.default_rng(geometry_seed))
    domain = geo.PerforatedBox(box, holes)
    if name == "poisson3d_product":
        def exact(X):
            return np.prod(np.sin(MU * X), axis=1)

        return Problem(
            name=name, domain=domain, d=3, residual_kind="neg_lap",
            rhs=lambda X: 3.0 * MU ** 2 * np.prod(np.sin(MU * X), axis=1),
            boundary_fn=exact, exact=exact,
            n_interior=5000, n_boundary=5000)

    def exact(X):
        return np.exp(np.sin(MU * X).sum(axis=1))

    def rhs(X):
        s = np.sin(MU * X)
        c = np.cos(MU * X)
        return MU ** 2 * np.exp(s.sum(axis=1)) * ((c * c).sum(axis=1) - s.sum(axis=1))

    return Problem(
        name=name, domain=domain, d=3, residual_kind="neg_lap",
        rhs=rhs, boundary_fn=exact, exact=exact,
        n_interior=2500, n_boundary=2500)


def laplace_eigen(d: int) -> Problem:
    """Dirichlet laplacian eigenproblem on the d-dimensional unit cube; the
    smallest eigenpair is prod sin(pi x_i) with eigenvalue d*pi^2."""

    def exact(X):
        return np.prod(np.sin(np.pi * X), axis=1)

    return Problem(
        name=f"laplace_eigen_{d}d",
        domain=geo.Hypercube((0.5,) * d, 1.0), d=d,
        residual_kind="eigen", rhs=None, boundary_fn=None,
        exact=exact, exact_lambda=float(d) * math.pi ** 2,
        alpha_b=100.0, alpha_n=100.0, p_norm=1.0, c_norm=1.0,
        n_interior=2000, n_boundary=2000)


_HOLES_A = (geo.Circle((-0.5, 0.5), 0.1), geo.Circle((0.5, 0.5), 0.2),
            geo.Circle((0.5, -0.5), 0.2))
_HOLES_B = (geo.Circle((-0.6, -0.6), 0.3), geo.Circle((0.3, -0.3), 0.6),
            geo.Circle((0.6, 0.6), 0.3), geo.Ellipse((-0.5, 0.5), (0.25, 0.125)))

BENCHMARKS = ("pb_ex1_100d", "pb_ex2_10d", "poisson2d_holes_a",
              "poisson2d_holes_b", "poisson3d_product", "poisson3d_exp",
              "laplace_eigen_10d")


def make_benchmark(name: str, geometry_seed: int = 0) -> Problem:
    if name == "pb_ex1_100d":
        return _pb_ex1(name)
    if name == "pb_ex2_10d":
        return _pb_ex2(name)
    if name == "poisson2d_holes_a":
        return _poisson2d(name, _HOLES_A)
    if name == "poisson2d_holes_b":
        return _poisson2d(name, _HOLES_B)
    if name in ("poisson3d_product", "poisson3d_exp"):
        return _poisson3d(name, geometry_seed)
    if name.startswith("laplace_eigen_") and name.endswith("d"):
        try:
            d = int(name[len("laplace_eigen_"):-1])
        except ValueError:
            raise ValueError(f"unknown benchmark {name!r}") from None
        if d < 1:
            raise ValueError(f"unknown benchmark {name!r}")
        return laplace_eigen(d)
    raise ValueError(f"unknown benchmark {name!r}")

"""Supported training objectives: F(alpha) = f(A alpha) + sum_i g_i(alpha_i).

Four instances are implemented:

  dual_l2_logistic   f(v) = ||v||^2 / (2 lambda),  g_i(a) = a log a + (1-a) log(1-a)
                     (columns of A are y_i x_i; primal weights w = v / lambda)
  dual_l2_svm        f(v) = ||v||^2 / (2 lambda),  g_i(a) = -a + indicator[0,1](a)
  ridge_primal       f(v) = ||v - b||^2 / 2,       g_i(a) = lambda a^2 / 2
  lasso_primal       f(v) = ||v - b||^2 / 2,       g_i(a) = lambda |a|

The smoothness constant of f is beta, the strong convexity of g_i is mu, and R
bounds ||alpha|| over iterates when g_i is not strongly convex.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

KINDS = ("dual_l2_logistic", "dual_l2_svm", "ridge_primal", "lasso_primal")

# entropy updates are clipped into [BOUNDARY_EPS, 1 - BOUNDARY_EPS]; the
# derivative of g is unbounded at the endpoints
BOUNDARY_EPS = 1e-12


class UnsupportedObjectiveError(ValueError):
    pass


class ReferenceSolverError(RuntimeError):
    def __init__(self, msg, best_value):
        super().__init__(msg)
        self.best_value = best_value


@dataclass(frozen=True)
class ObjectiveSpec:
    """Objective selection plus the constants the rate bounds need."""

    kind: str
    lam: float
    n_examples: int
    n_features: int
    target: np.ndarray | None = None  # b for the primal kinds

    def __post_init__(self):
        if self.kind not in KINDS:
            raise UnsupportedObjectiveError(f"unknown objective kind {self.kind!r}")
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if self.kind in ("ridge_primal", "lasso_primal") and self.target is None:
            raise ValueError(f"{self.kind} requires a target vector")

    @property
    def n_coordinates(self):
        """Length of alpha: examples for dual kinds, features for primal."""
        if self.kind.startswith("dual_"):
            return self.n_examples
        return self.n_features

    @property
    def dim(self):
        """Length of the shared vector v = A alpha."""
        if self.kind.startswith("dual_"):
            return self.n_features
        return self.n_examples

    @property
    def beta(self):
        return 1.0 / self.lam if self.kind.startswith("dual_") else 1.0

    @property
    def mu(self):
        if self.kind == "dual_l2_logistic":
            return 4.0
        if self.kind == "ridge_primal":
            return self.lam
        return 0.0

    @property
    def support_radius(self):
        """R with ||alpha|| <= R over iterates; inf when not certified."""
        if self.kind == "dual_l2_svm":
            return math.sqrt(self.n_coordinates)
        return math.inf

    def init_alpha(self):
        n = self.n_coordinates
        if self.kind == "dual_l2_logistic":
            return np.full(n, 0.5)
        return np.zeros(n)

    def domain(self):
        """(lo, hi) box for alpha entries; open interval for the entropy kind."""
        if self.kind == "dual_l2_logistic":
            return (BOUNDARY_EPS, 1.0 - BOUNDARY_EPS)
        if self.kind == "dual_l2_svm":
            return (0.0, 1.0)
        return (-math.inf, math.inf)

    def check_alpha(self, alpha):
        if not np.all(np.isfinite(alpha)):
            raise ValueError("alpha contains non-finite entries")
        if self.kind == "dual_l2_logistic":
            if np.any(alpha <= 0.0) or np.any(alpha >= 1.0):
                raise ValueError("dual logistic alpha must stay inside (0, 1)")
        elif self.kind == "dual_l2_svm":
            if np.any(alpha < 0.0) or np.any(alpha > 1.0):
                raise ValueError("dual svm alpha must stay inside [0, 1]")


@dataclass
class Model:
    """Optimization variable plus the objective it belongs to."""
    alpha: np.ndarray
    spec: ObjectiveSpec


@dataclass
class SharedVector:
    """v = A alpha, re-synchronized at every reduce; stamp counts rounds."""
    v: np.ndarray
    stamp: int = 0


def f_eval(spec, v):
    if spec.kind.startswith("dual_"):
        return float(np.dot(v, v)) / (2.0 * spec.lam)
    r = v - spec.target
    return 0.5 * float(np.dot(r, r))


def f_grad(spec, v):
    if spec.kind.startswith("dual_"):
        return v / spec.lam
    return v - spec.target


def _entropy(a):
    a = np.asarray(a, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = np.where(a > 0.0, a * np.log(np.maximum(a, 1e-320)), 0.0)
        t2 = np.where(a < 1.0, (1.0 - a) * np.log(np.maximum(1.0 - a, 1e-320)), 0.0)
    return t1 + t2


def g_eval(spec, i, a):
    """g_i(a); +inf outside the domain, boundary limits for the entropy term."""
    if spec.kind == "dual_l2_logistic":
        if a < 0.0 or a > 1.0:
            return math.inf
        return float(_entropy(a))
    if spec.kind == "dual_l2_svm":
        if a < 0.0 or a > 1.0:
            return math.inf
        return -a
    if spec.kind == "ridge_primal":
        return 0.5 * spec.lam * a * a
    return spec.lam * abs(a)


def g_sum(spec, alpha):
    """Vectorized sum_i g_i(alpha_i) for in-domain alpha."""
    if spec.kind == "dual_l2_logistic":
        return float(np.sum(_entropy(alpha)))
    if spec.kind == "dual_l2_svm":
        return -float(np.sum(alpha))
    if spec.kind == "ridge_primal":
        return 0.5 * spec.lam * float(np.dot(alpha, alpha))
    return spec.lam * float(np.sum(np.abs(alpha)))


def g_deriv(spec, i, a):
    """Derivative of g_i (a subgradient for lasso; unbounded at entropy ends)."""
    if spec.kind == "dual_l2_logistic":
        if a <= 0.0:
            return -math.inf
        if a >= 1.0:
            return math.inf
        return math.log(a / (1.0 - a))
    if spec.kind == "dual_l2_svm":
        return -1.0
    if spec.kind == "ridge_primal":
        return spec.lam * a
    return spec.lam * float(np.sign(a))


def g_curvature(spec, a):
    """Second derivative of g_i where it exists (0 for svm/lasso interiors)."""
    if spec.kind == "dual_l2_logistic":
        return 1.0 / (a * (1.0 - a))
    if spec.kind == "ridge_primal":
        return spec.lam
    return 0.0


def primal_objective(spec, matrix, alpha):
    """F(alpha) = f(A alpha) + sum_i g_i(alpha_i)."""
    return f_eval(spec, matrix.matvec(alpha)) + g_sum(spec, alpha)


def f_conjugate(spec, w):
    if spec.kind.startswith("dual_"):
        return 0.5 * spec.lam * float(np.dot(w, w))
    return 0.5 * float(np.dot(w, w)) + float(np.dot(w, spec.target))


def g_conjugate_sum(spec, s):
    """sum_i g_i*(s_i) for a vector s."""
    if spec.kind == "dual_l2_logistic":
        # conjugate of binary entropy on [0,1] is softplus
        return float(np.sum(np.logaddexp(0.0, s)))
    if spec.kind == "dual_l2_svm":
        return float(np.sum(np.maximum(0.0, s + 1.0)))
    if spec.kind == "ridge_primal":
        return float(np.dot(s, s)) / (2.0 * spec.lam)
    raise UnsupportedObjectiveError("no closed-form conjugate for lasso_primal")


def duality_gap(spec, matrix, alpha, v):
    """Fenchel gap f(v) + f*(w) + sum_i [g_i(a_i) + g_i*(-a_i^T w)], w = grad f(v).

    Upper-bounds the suboptimality F(alpha) - F*; requires v = A alpha.
    """
    if spec.kind == "lasso_primal":
        raise UnsupportedObjectiveError(
            "duality gap is not available for lasso_primal; use reference_optimum")
    w = f_grad(spec, v)
    s = -matrix.rmatvec(w)
    return f_eval(spec, v) + f_conjugate(spec, w) + g_sum(spec, alpha) + \
        g_conjugate_sum(spec, s)


_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


def golden_section_min(fun, lo, hi, iters=90):
    """Golden-section minimization of a unimodal function on [lo, hi]."""
    a, b = lo, hi
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = fun(c), fun(d)
    for _ in range(iters):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = fun(d)
    return (a + b) / 2.0


def _golden_bracket(fun, t):
    """Expanding bracket around t for a coercive convex 1-D function."""
    span = 1.0 + abs(t)
    f0 = fun(t)
    for _ in range(80):
        if fun(t - span) > f0 and fun(t + span) > f0:
            return t - span, t + span
        span *= 2.0
    return t - span, t + span


def reference_optimum(spec, matrix, tolerance, max_sweeps=5000):
    """High-accuracy F* via cyclic coordinate descent with golden-section steps.

    This is the suboptimality oracle for the convergence tests: the 1-D
    subproblems are minimized by golden-section search on the directly
    evaluated objective restriction, independent of the production update
    formulas. Stops when the duality gap drops below `tolerance` (per-sweep
    objective decrease for lasso). Raises ReferenceSolverError with the best
    value found if max_sweeps is exhausted.
    """
    n = matrix.n_cols
    alpha = spec.init_alpha()
    v = matrix.matvec(alpha)
    sq = matrix.col_sqnorms()
    qf = spec.beta  # curvature of f along any direction a: beta * ||a||^2
    lo_dom, hi_dom = spec.domain()
    has_gap = spec.kind != "lasso_primal"
    value = f_eval(spec, v) + g_sum(spec, alpha)
    for sweep in range(max_sweeps):
        for j in range(n):
            rows, vals = matrix.col(j)
            if len(rows) == 0 and spec.kind in ("dual_l2_svm", "lasso_primal",
                                                "ridge_primal", "dual_l2_logistic"):
                ga = 0.0
            else:
                ga = float(np.dot(vals, f_grad_at(spec, v, rows)))
            t = alpha[j]
            c = qf * sq[j]

            def phi(tt, ga=ga, c=c, t=t, j=j):
                d = tt - t
                return ga * d + 0.5 * c * d * d + g_eval(spec, j, tt)

            if math.isinf(lo_dom):
                blo, bhi = _golden_bracket(phi, t)
            else:
                blo, bhi = lo_dom, hi_dom
            t_new = golden_section_min(phi, blo, bhi)
            if t_new != t:
                step = t_new - t
                alpha[j] = t_new
                if len(rows):
                    v[rows] += step * vals
        new_value = f_eval(spec, v) + g_sum(spec, alpha)
        if has_gap:
            gap = duality_gap(spec, matrix, alpha, v)
            if gap < tolerance:
                return new_value, alpha
        else:
            if value - new_value < tolerance * 1e-3 and sweep > 0:
                return new_value, alpha
        value = new_value
    raise ReferenceSolverError(
        f"reference solver did not reach tolerance in {max_sweeps} sweeps",
        best_value=value)


def f_grad_at(spec, v, rows):
    """grad f(v) restricted to `rows` (avoids forming the full gradient)."""
    if spec.kind.startswith("dual_"):
        return v[rows] / spec.lam
    return v[rows] - spec.target[rows]

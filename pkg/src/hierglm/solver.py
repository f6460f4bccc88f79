"""Per-device subproblem solver: asynchronous stochastic coordinate descent.

Every level of the hierarchy hands the device the same shape of problem,

    G(delta) = const + lin . (B delta) + (quad / 2) ||B delta||^2
               + sum_i g_i(base_i + delta_i),

where B holds the device's columns. The solver keeps a running view
r = lin + quad * (B delta); the one-dimensional restriction at coordinate i is
then phi(s) = (a_i . r) s + (quad ||a_i||^2 / 2) s^2 + g_i(t + s). Worker
threads pop coordinates off a shared queue and update the view without locks,
so reads may be stale; the adaptive damping heuristic discards any epoch that
fails to decrease the subproblem value and halves the step factor.
"""

from __future__ import annotations

import itertools
import math
import threading
from dataclasses import dataclass, field

import numpy as np

from .objectives import BOUNDARY_EPS, g_eval, g_sum

_MASK64 = (1 << 64) - 1
DAMPING_FLOOR = 2.0 ** -20


class SolverError(RuntimeError):
    pass


class SolverDivergence(SolverError):
    def __init__(self, msg, diagnostics=None):
        super().__init__(msg)
        self.diagnostics = diagnostics or {}


def xorshift64_step(state):
    """One step of the 64-bit xorshift generator with shifts (13, 7, 17)."""
    state ^= (state << 13) & _MASK64
    state ^= state >> 7
    state ^= (state << 17) & _MASK64
    return state


def splitmix64(x):
    """Seed-mixing finalizer; used to derive independent streams."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def derive_seed(base, *indices):
    s = splitmix64(base & _MASK64)
    for ix in indices:
        s = splitmix64(s ^ ((ix + 0x632BE59BD9B4E019) & _MASK64))
    return s or 0x9E3779B97F4A7C15  # xorshift state must never be zero


class PermutationGenerator:
    """Deterministic permutation stream: xorshift keys sorted by value.

    Ties between equal 32-bit keys are broken by index (stable sort).
    """

    def __init__(self, seed):
        self.state = (seed & _MASK64) or 0x9E3779B97F4A7C15

    def next_u64(self):
        self.state = xorshift64_step(self.state)
        return self.state

    def keys(self, n):
        out = np.empty(n, dtype=np.uint32)
        s = self.state
        for i in range(n):
            s = xorshift64_step(s)
            out[i] = s & 0xFFFFFFFF
        self.state = s
        return out

    def permute(self, n):
        if n <= 0:
            return np.empty(0, dtype=np.int64)
        return np.argsort(self.keys(n), kind="stable").astype(np.int64)


@dataclass
class DampingState:
    """Step-scaling factor; only powers of two, never increased mid-solve."""
    delta: float = 1.0
    last_subproblem_value: float = math.nan

    def halve(self):
        self.delta *= 0.5
        return self.delta

    def reset(self):
        self.delta = 1.0
        self.last_subproblem_value = math.nan


@dataclass
class LocalSubproblem:
    """Quadratic-plus-separable model handed to a device solver.

    `data` holds the device's columns of A; `col_ids` are their global
    coordinate indices; `base` are the current total coordinate values the
    g-terms are evaluated at.
    """
    spec: object
    lin: np.ndarray
    quad: float
    const: float
    base: np.ndarray
    data: object
    col_ids: np.ndarray

    @property
    def n_local(self):
        return len(self.base)

    def value(self, delta):
        """G(delta), with B delta recomputed sequentially (exact)."""
        w = self.data.matvec(delta)
        return self.value_given_w(delta, w)

    def value_given_w(self, delta, w):
        return (self.const + float(np.dot(self.lin, w))
                + 0.5 * self.quad * float(np.dot(w, w))
                + g_sum(self.spec, self.base + delta))


@dataclass
class SubtaskResult:
    """Device update: sparse delta over its coordinates plus dense B delta."""
    col_ids: np.ndarray
    delta_alpha: np.ndarray
    delta_v: np.ndarray
    epochs_run: int
    final_subproblem_value: float
    initial_subproblem_value: float
    epoch_values: list = field(default_factory=list)
    retries: int = 0
    measured_theta: float | None = None


def coordinate_update(spec, rows, vals, sqnorm, t_cur, view, quad):
    """Undamped 1-D step for one coordinate against the current view.

    Exact minimizer for the quadratic-family kinds (clipped to the box for
    svm), one Newton step clipped into the open interval for dual logistic.
    Returns the raw step; the caller applies damping.
    """
    ga = float(np.dot(vals, view[rows])) if len(rows) else 0.0
    if not math.isfinite(ga):
        raise SolverError("non-finite shared-view dot product")
    c = quad * sqnorm
    kind = spec.kind
    if kind == "ridge_primal":
        denom = c + spec.lam
        return -(ga + spec.lam * t_cur) / denom
    if kind == "lasso_primal":
        if c == 0.0:
            return -t_cur  # no data term: g alone sends the coordinate to 0
        u = t_cur - ga / c
        thr = spec.lam / c
        t_new = math.copysign(max(abs(u) - thr, 0.0), u)
        return t_new - t_cur
    if kind == "dual_l2_svm":
        if c == 0.0:
            t_new = 1.0 if ga < 1.0 else 0.0  # minimize (ga - 1) t on [0, 1]
        else:
            t_new = min(1.0, max(0.0, t_cur + (1.0 - ga) / c))
        return t_new - t_cur
    # dual_l2_logistic: single Newton step from the current point
    grad = ga + math.log(t_cur / (1.0 - t_cur))
    curv = c + 1.0 / (t_cur * (1.0 - t_cur))
    t_new = t_cur - grad / curv
    t_new = min(1.0 - BOUNDARY_EPS, max(BOUNDARY_EPS, t_new))
    if not math.isfinite(t_new):
        raise SolverError("non-finite coordinate update")
    return t_new - t_cur


def run_pass(sub, delta, view, order, n_threads=1, damping=1.0):
    """Apply damped coordinate updates in the given order (one pass).

    Mutates `delta` (per-coordinate accumulation, race-free: each coordinate
    appears once per pass) and `view` (shared, updated without locks). Thread
    errors propagate to the caller.
    """
    spec = sub.spec
    data = sub.data
    sq = data.col_sqnorms()
    base = sub.base
    quad = sub.quad
    if n_threads <= 1:
        for i in order:
            rows, vals = data.col(i)
            raw = coordinate_update(spec, rows, vals, sq[i], base[i] + delta[i],
                                    view, quad)
            step = damping * raw
            if step != 0.0:
                delta[i] += step
                view[rows] += (quad * step) * vals
        return

    counter = itertools.count()
    errors = []

    def worker():
        try:
            while True:
                pos = next(counter)
                if pos >= len(order):
                    return
                i = order[pos]
                rows, vals = data.col(i)
                raw = coordinate_update(spec, rows, vals, sq[i],
                                        base[i] + delta[i], view, quad)
                step = damping * raw
                if step != 0.0:
                    delta[i] += step
                    view[rows] += (quad * step) * vals
        except BaseException as exc:  # propagate as solver error
            errors.append(exc)

    threads = [threading.Thread(target=worker) for _ in range(n_threads)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise SolverError(f"worker thread failed: {errors[0]!r}") from errors[0]


def scd_epoch(sub, delta, view, gen, n_threads=1, damping=1.0):
    """One pass over a fresh permutation of the device's coordinates."""
    run_pass(sub, delta, view, gen.permute(sub.n_local), n_threads, damping)


PLATEAU_REL = 1e-12


def damped_solve(sub, gen, t_epochs, n_threads=1, damping=None):
    """Run up to t_epochs SCD passes, discarding any pass that increases G.

    After every epoch the exact subproblem value is evaluated; on an increase
    the pre-epoch state is restored, the damping factor is halved and the
    epoch repeats. An "increase" within float-evaluation noise means the
    subproblem is solved to machine precision: the state is restored and the
    solve stops early instead of halving. delta < 2^-20 is declared
    divergence.
    """
    if t_epochs < 1:
        raise ValueError("t_epochs must be >= 1")
    state = damping if damping is not None else DampingState()
    m = sub.n_local
    delta = np.zeros(m)
    view = sub.lin.copy()
    value = sub.value(delta)
    initial = value
    epoch_values = []
    retries = 0
    epochs_run = 0
    plateaued = False
    for _ in range(t_epochs):
        if plateaued:
            break
        while True:
            snap_delta = delta.copy()
            snap_view = view.copy()
            scd_epoch(sub, delta, view, gen, n_threads, state.delta)
            if not np.all(np.isfinite(view)):
                raise SolverError("non-finite entries in shared view")
            new_value = sub.value(delta)
            if new_value > value:
                delta[:] = snap_delta
                view[:] = snap_view
                if new_value - value <= PLATEAU_REL * (1.0 + abs(value)):
                    plateaued = True  # converged to evaluation precision
                    break
                retries += 1
                if state.halve() < DAMPING_FLOOR:
                    raise SolverDivergence(
                        "damping floor reached without subproblem decrease",
                        diagnostics={"value": value, "attempted": new_value,
                                     "retries": retries})
                continue
            value = new_value
            epochs_run += 1
            epoch_values.append(value)
            break
    state.last_subproblem_value = value
    delta_v = sub.data.matvec(delta)  # exact recompute, independent of races
    return SubtaskResult(col_ids=sub.col_ids, delta_alpha=delta,
                         delta_v=delta_v, epochs_run=epochs_run,
                         final_subproblem_value=value,
                         initial_subproblem_value=initial,
                         epoch_values=epoch_values, retries=retries)


def _exact_1d_logistic(ga, c, t):
    """Exact minimizer of ga*s + c/2 s^2 + g(t+s) for the entropy g (bisection).

    The derivative h(u) = ga + c (u - t) + log(u / (1-u)) is strictly
    increasing on (0, 1) with infinite limits, so the root is bracketed.
    """
    lo, hi = 1e-300, 1.0 - 1e-16
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        h = ga + c * (mid - t) + math.log(mid / (1.0 - mid))
        if h < 0.0:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-17 * max(1.0, abs(mid)):
            break
    return 0.5 * (lo + hi)


def exact_subproblem_solve(sub, tol=1e-10, max_sweeps=2000, warm_delta=None):
    """Sequential exact cyclic coordinate solver for a LocalSubproblem.

    Independent reference for measure_theta: exact 1-D minimization per
    coordinate (closed forms for the quadratic-family kinds, bisection on the
    monotone derivative for dual logistic), cyclic order, no damping. Stops
    when a full sweep decreases G by less than tol * (1 + |G|).
    """
    spec = sub.spec
    data = sub.data
    sq = data.col_sqnorms()
    m = sub.n_local
    delta = np.zeros(m) if warm_delta is None else warm_delta.copy()
    view = sub.lin + sub.quad * data.matvec(delta)
    value = sub.value(delta)
    for _ in range(max_sweeps):
        for i in range(m):
            rows, vals = data.col(i)
            ga = float(np.dot(vals, view[rows])) if len(rows) else 0.0
            c = sub.quad * sq[i]
            t = sub.base[i] + delta[i]
            kind = spec.kind
            if kind == "ridge_primal":
                t_new = t - (ga + spec.lam * t) / (c + spec.lam)
            elif kind == "lasso_primal":
                if c == 0.0:
                    t_new = 0.0
                else:
                    u = t - ga / c
                    t_new = math.copysign(max(abs(u) - spec.lam / c, 0.0), u)
            elif kind == "dual_l2_svm":
                if c == 0.0:
                    t_new = 1.0 if ga < 1.0 else 0.0
                else:
                    t_new = min(1.0, max(0.0, t + (1.0 - ga) / c))
            else:
                t_new = _exact_1d_logistic(ga, c, t)
            step = t_new - t
            if step != 0.0:
                delta[i] += step
                if len(rows):
                    view[rows] += (sub.quad * step) * vals
        new_value = sub.value(delta)
        if value - new_value <= tol * (1.0 + abs(new_value)):
            return delta
        value = new_value
    return delta


def measure_theta(sub, result, tol=1e-10):
    """Definition-1 approximation quality of a SubtaskResult (test mode).

    theta = [G(delta) - G(delta*)] / [G(0) - G(delta*)] with delta* from the
    sequential exact reference solve; 0 when the subproblem was already
    optimal at zero.
    """
    g0 = sub.value(np.zeros(sub.n_local))
    g_res = sub.value(result.delta_alpha)
    star = exact_subproblem_solve(sub, tol=tol, warm_delta=result.delta_alpha)
    g_star = sub.value(star)
    denom = g0 - g_star
    if denom <= 1e-15 * (1.0 + abs(g0)):
        return 0.0
    theta = (g_res - g_star) / denom
    return min(1.0, max(0.0, theta))

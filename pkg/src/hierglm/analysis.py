"""Convergence-rate bounds and (t1, t2) schedule optimization under a cost budget.

The end-to-end rates compose the outer contraction with the inner-level
guarantee: after t2 inner rounds the node subproblems are solved to quality

    theta(t2) = (1 - (1 - theta_bar) * (beta sigma c_A + mu)
                                     / (sigma_bar sigma beta c_A + mu))^t2,

which feeds either the strongly convex linear rate or the general 1/t1 rate.
A round costs c1 + t2 (c2 + c_comp); the budget C caps t1 (c1 + t2 (c2 + c_comp)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class InfeasibleBudgetError(ValueError):
    pass


@dataclass(frozen=True)
class RateParams:
    """Constants entering the bounds; theta_bar is the device solve quality."""
    beta: float
    mu: float
    c_a: float
    nodes: int
    devices: int
    support_radius: float = math.inf
    theta_bar: float = 0.0
    sigma: float | None = None
    sigma_bar: float | None = None

    @property
    def sigma_eff(self):
        return float(self.nodes if self.sigma is None else self.sigma)

    @property
    def sigma_bar_eff(self):
        return float(self.devices if self.sigma_bar is None else self.sigma_bar)


@dataclass(frozen=True)
class CostModel:
    """c1 inter-node, c2 intra-node, c_comp per subtask solve; C total budget."""
    c1: float
    c2: float
    c_comp: float
    budget: float = math.inf

    def round_cost(self, t2):
        return self.c1 + t2 * (self.c2 + self.c_comp)

    def total_cost(self, t1, t2):
        return t1 * self.round_cost(t2)

    def feasible(self, t1, t2):
        return self.total_cost(t1, t2) <= self.budget


def inner_contraction(params):
    """Per-inner-round factor (1 - (1-theta_bar)(beta sigma c_A + mu)/(sigma_bar sigma beta c_A + mu))."""
    num = params.beta * params.sigma_eff * params.c_a + params.mu
    den = (params.sigma_bar_eff * params.sigma_eff * params.beta * params.c_a
           + params.mu)
    return 1.0 - (1.0 - params.theta_bar) * num / den


def theta_from_inner(params, t2):
    """Outer-level solve quality achieved by t2 inner rounds (t2=0 -> 1)."""
    if t2 < 0:
        raise ValueError("t2 must be >= 0")
    return inner_contraction(params) ** t2


def rate_bound_general(params, t1, t2):
    """Expected-suboptimality bound for non-strongly-convex g (mu = 0 path).

    E[eps] <= 4 R^2 sigma beta c_A / ((1 - theta(t2)) * t1); infinite when the
    local solver makes no progress (theta_bar = 1).
    """
    if t1 < 1 or t2 < 1:
        raise ValueError("t1 and t2 must be >= 1")
    if not math.isfinite(params.support_radius):
        raise ValueError("general bound needs a finite support radius R")
    theta = theta_from_inner(params, t2)
    denom = 1.0 - theta
    if denom <= 0.0:
        return math.inf
    num = (4.0 * params.support_radius ** 2 * params.sigma_eff * params.beta
           * params.c_a)
    return num / (denom * t1)


def rate_bound_strongly_convex(params, t1, t2, eps0):
    """Linear-rate bound for mu-strongly-convex g composed with the inner rate."""
    if t1 < 1 or t2 < 1:
        raise ValueError("t1 and t2 must be >= 1")
    if params.mu <= 0.0:
        raise ValueError("strongly convex bound needs mu > 0")
    theta = theta_from_inner(params, t2)
    factor = 1.0 - (1.0 - theta) * params.mu / (
        params.mu + params.sigma_eff * params.beta * params.c_a)
    return factor ** t1 * eps0


def applicable_bound(params, t1, t2, eps0=1.0):
    if params.mu > 0.0:
        return rate_bound_strongly_convex(params, t1, t2, eps0)
    return rate_bound_general(params, t1, t2)


def optimize_schedule(params, cost, eps0=1.0, t_max=10_000):
    """Best (t1, t2) under the budget: minimize the applicable bound.

    Both bounds are strictly decreasing in t1, so for each t2 only the
    largest feasible t1 can win; ties break toward smaller t2.
    """
    if not cost.feasible(1, 1):
        raise InfeasibleBudgetError(
            f"budget {cost.budget} cannot afford one (t1=1, t2=1) round")
    best = None
    for t2 in range(1, t_max + 1):
        t1 = int(cost.budget // cost.round_cost(t2))
        if t1 < 1:
            break
        t1 = min(t1, t_max)
        bound = applicable_bound(params, t1, t2, eps0)
        if best is None or bound < best[2] - 0.0:
            best = (t1, t2, bound)
    return best


def simulated_time(trace, cost, t2):
    """Per-round simulated cost curve for a training trace.

    Returns an array aligned with the trace rows: row r (after r outer
    rounds) costs r * (c1 + t2 (c2 + c_comp)).
    """
    rounds = np.array([row.round for row in trace.rows], dtype=float)
    return rounds * cost.round_cost(t2)


def time_to_target(trace, cost, t2, f_star, target):
    """Simulated cost of the first round with suboptimality <= target.

    Returns None when the trace never reaches the target.
    """
    times = simulated_time(trace, cost, t2)
    for row, t in zip(trace.rows, times):
        if row.objective - f_star <= target:
            return float(t)
    return None


def schedule_table(params, cost, t2_values, eps0=1.0):
    """Rows of (t1, t2, bound, sim_time) at the per-t2 maximal feasible t1."""
    rows = []
    for t2 in t2_values:
        t1 = int(cost.budget // cost.round_cost(t2))
        if t1 < 1:
            continue
        rows.append((t1, t2, applicable_bound(params, t1, t2, eps0),
                     cost.total_cost(t1, t2)))
    return rows

"""Two-level training engine: outer rounds across nodes, inner rounds across
devices, with a shared vector v = A alpha reduced between nodes.

Each node k owns a contiguous slice of coordinates split further across its L
devices. One outer round runs t2 inner rounds; an inner round hands every
device a quadratic upper-bound model of the node objective

    lin = grad f(v) + sigma * beta * v_bar,   quad = sigma_bar * sigma * beta,

where v_bar = B d accumulates the node's correction since the round started.
After the inner rounds the node contributions Delta v_k = B d are summed by
the reducer and applied everywhere. With one device per node, sigma_bar = 1
and t2 = 1 this reduces exactly to the single-level scheme with K workers.
"""

from __future__ import annotations

import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import comm
from .data import partition_columns
from .objectives import (Model, SharedVector, f_conjugate, f_eval, f_grad,
                         g_conjugate_sum, g_sum)
from .solver import (DampingState, LocalSubproblem, PermutationGenerator,
                     SubtaskResult, damped_solve, derive_seed, measure_theta)


@dataclass
class HierarchyConfig:
    """Topology and schedule: K nodes x L devices, t1 outer / t2 inner rounds."""
    nodes: int = 1
    devices: int = 1
    t1: int = 1
    t2: int = 1
    sigma: float | None = None       # defaults to K (safe bound)
    sigma_bar: float | None = None   # defaults to L (safe bound)
    seed: int = 0
    epochs: int = 1                  # solver passes per device subtask
    threads_per_device: int = 1
    partition_strategy: str = "contiguous"

    def __post_init__(self):
        if min(self.nodes, self.devices, self.t1, self.t2, self.epochs) < 1:
            raise ValueError("nodes, devices, t1, t2 and epochs must be >= 1")

    @property
    def sigma_eff(self):
        return float(self.nodes if self.sigma is None else self.sigma)

    @property
    def sigma_bar_eff(self):
        return float(self.devices if self.sigma_bar is None else self.sigma_bar)


@dataclass
class StoppingCriteria:
    max_rounds: int | None = None  # falls back to config.t1
    target_gap: float | None = None
    target_subopt: float | None = None
    f_star: float | None = None
    time_budget_s: float | None = None


@dataclass
class TraceRow:
    round: int
    wall_s: float
    sim_cost: float
    objective: float
    gap: float | None
    theta: float | None


class ConvergenceTrace:
    HEADER = "round,wall_s,sim_cost,objective,gap,theta"

    def __init__(self):
        self.rows: list[TraceRow] = []

    def append(self, row):
        self.rows.append(row)

    def objectives(self):
        return np.array([r.objective for r in self.rows])

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write(self.HEADER + "\n")
            for r in self.rows:
                gap = "" if r.gap is None else repr(float(r.gap))
                theta = "" if r.theta is None else repr(float(r.theta))
                fh.write(f"{r.round},{float(r.wall_s)!r},{float(r.sim_cost)!r},"
                         f"{float(r.objective)!r},{gap},{theta}\n")


@dataclass
class TrainResult:
    model: Model
    trace: ConvergenceTrace
    v: np.ndarray
    rounds: int
    stop_reason: str
    theta_bar_max: float | None = None
    theta_bars: list = field(default_factory=list)


class _Device:
    def __init__(self, matrix, cols, seed_index, base_seed):
        self.cols = cols
        self.data = matrix.select_columns(cols)
        self.gen = PermutationGenerator(derive_seed(base_seed, seed_index))
        self.damping = DampingState()


class _Node:
    def __init__(self, index, matrix, device_parts, base_seed, n_devices_total):
        self.index = index
        self.devices = [
            _Device(matrix, p.cols, p.node * n_devices_total + p.device, base_seed)
            for p in device_parts
        ]
        self.cols = np.concatenate([d.cols for d in self.devices])


def build_outer_subproblem(spec, node_data, node_cols, alpha, v, n_nodes, sigma):
    """Quadratic model of F around (alpha, v) restricted to one node's columns.

    evaluate(delta) = f(v)/K + grad f(v).(B delta) + (sigma beta / 2)||B delta||^2
                      + sum_{i in node} g_i(alpha_i + delta_i)
    """
    return LocalSubproblem(
        spec=spec,
        lin=f_grad(spec, v),
        quad=sigma * spec.beta,
        const=f_eval(spec, v) / n_nodes,
        base=alpha[node_cols].copy(),
        data=node_data,
        col_ids=node_cols,
    )


def build_inner_subproblem(outer, device_data, device_cols, base, v_bar,
                           n_devices, sigma_bar):
    """Second-level model of the node subproblem for one device.

    The node objective, as a function of its own correction, is smooth with
    constant sigma * beta (= outer.quad), so the device model uses
    lin = grad f(v) + sigma beta v_bar and quad = sigma_bar * sigma * beta.
    """
    fbar = (outer.const + float(np.dot(outer.lin, v_bar))
            + 0.5 * outer.quad * float(np.dot(v_bar, v_bar)))
    return LocalSubproblem(
        spec=outer.spec,
        lin=outer.lin + outer.quad * v_bar,
        quad=sigma_bar * outer.quad,
        const=fbar / n_devices,
        base=base,
        data=device_data,
        col_ids=device_cols,
    )


class Engine:
    """Drives the two-level scheme over an in-memory matrix.

    By default all K nodes live in this process as threads joined by an
    in-process reducer. In multi-process mode (`node_index` given) the engine
    owns a single node and synchronizes through a TCP reducer.
    """

    def __init__(self, matrix, spec, config, reducer=None, cost_model=None,
                 node_index=None, measure_theta_bar=False,
                 measure_theta_outer=False, chunk_runner=None):
        self.matrix = matrix
        self.spec = spec
        self.config = config
        self.cost_model = cost_model
        self.measure_theta_bar = measure_theta_bar
        self.measure_theta_outer = measure_theta_outer
        self.chunk_runner = chunk_runner
        parts = partition_columns(
            matrix.n_cols, config.nodes, config.devices,
            strategy=config.partition_strategy,
            col_nnz=matrix.col_nnz() if config.partition_strategy != "contiguous"
            else None)
        by_node = {}
        for p in parts:
            by_node.setdefault(p.node, []).append(p)
        if node_index is None:
            self.local_nodes = [
                _Node(k, matrix, by_node[k], config.seed, config.devices)
                for k in range(config.nodes)
            ]
            self._reducer_owner = comm.InProcessReducer(config.nodes)
            self.participants = [self._reducer_owner.participant(k)
                                 for k in range(config.nodes)]
        else:
            self.local_nodes = [
                _Node(node_index, matrix, by_node[node_index], config.seed,
                      config.devices)
            ]
            if reducer is None:
                raise ValueError("multi-process mode needs a reducer")
            self.participants = [reducer]
        self.alpha = spec.init_alpha()
        self.v = matrix.matvec(self.alpha)
        self.stamp = 0
        self.theta_bars = []
        self._theta_outer_last = None

    # -- state snapshots used by equivalence tests --------------------------
    @property
    def shared(self):
        return SharedVector(self.v, self.stamp)

    def _device_solve(self, node, ell, outer, d_slices, v_bar):
        dev = node.devices[ell]
        cfg = self.config
        base = self.alpha[dev.cols] + d_slices[ell]
        sub = build_inner_subproblem(outer, dev.data, dev.cols, base, v_bar,
                                     cfg.devices, cfg.sigma_bar_eff)
        if self.chunk_runner is not None:
            result = self.chunk_runner(sub, dev, cfg)
        else:
            result = damped_solve(sub, dev.gen, cfg.epochs,
                                  n_threads=cfg.threads_per_device,
                                  damping=dev.damping)
        if self.measure_theta_bar:
            result.measured_theta = measure_theta(sub, result)
            self.theta_bars.append(result.measured_theta)
        return result

    def _run_node(self, node):
        """t2 inner rounds for one node; returns (Delta alpha, Delta v_k)."""
        cfg = self.config
        outer = LocalSubproblem(
            spec=self.spec,
            lin=self._grad,
            quad=cfg.sigma_eff * self.spec.beta,
            const=self._fv / cfg.nodes,
            base=None,  # per-device bases are built from alpha + d
            data=None,
            col_ids=node.cols,
        )
        for dev in node.devices:
            dev.damping.reset()  # damping persists across inner rounds only
        d_slices = [np.zeros(len(dev.cols)) for dev in node.devices]
        v_bar = np.zeros(len(self.v))
        for _ in range(cfg.t2):
            if len(node.devices) == 1:
                results = [self._device_solve(node, 0, outer, d_slices, v_bar)]
            else:
                with ThreadPoolExecutor(max_workers=len(node.devices)) as pool:
                    futs = [pool.submit(self._device_solve, node, ell, outer,
                                        d_slices, v_bar)
                            for ell in range(len(node.devices))]
                    results = [f.result() for f in futs]
            for ell, res in enumerate(results):  # canonical device order
                d_slices[ell] += res.delta_alpha
                v_bar += res.delta_v
        return d_slices, v_bar

    def outer_round(self):
        """One full outer round: inner rounds on every node, reduce, apply."""
        self._grad = f_grad(self.spec, self.v)
        self._fv = f_eval(self.spec, self.v)
        outcome = [None] * len(self.local_nodes)
        errors = []

        def drive(i):
            try:
                node = self.local_nodes[i]
                d_slices, v_bar = self._run_node(node)
                if self.measure_theta_outer:
                    self._measure_outer(node, d_slices)
                total = self.participants[i].allreduce_sum(v_bar)
                outcome[i] = (d_slices, total)
            except BaseException as exc:
                errors.append(exc)
                abort = getattr(self.participants[i], "abort", None)
                if abort is not None:
                    abort()  # unblock peers stuck in the collective

        if len(self.local_nodes) == 1:
            drive(0)
        else:
            threads = [threading.Thread(target=drive, args=(i,))
                       for i in range(len(self.local_nodes))]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
        if errors:
            root = [e for e in errors if not isinstance(e, comm.ReduceError)]
            raise (root or errors)[0]
        for i, node in enumerate(self.local_nodes):
            d_slices, _ = outcome[i]
            for dev, d in zip(node.devices, d_slices):
                self.alpha[dev.cols] += d
        self.v += outcome[0][1]
        self.stamp += 1

    def _measure_outer(self, node, d_slices):
        from .solver import measure_theta as _mt
        node_data = self.matrix.select_columns(node.cols)
        outer = build_outer_subproblem(self.spec, node_data, node.cols,
                                       self.alpha, self.v, self.config.nodes,
                                       self.config.sigma_eff)
        d_full = np.concatenate(d_slices)
        shim = SubtaskResult(col_ids=node.cols, delta_alpha=d_full,
                             delta_v=node_data.matvec(d_full), epochs_run=0,
                             final_subproblem_value=math.nan,
                             initial_subproblem_value=math.nan)
        theta = _mt(outer, shim)
        prev = self._theta_outer_last
        self._theta_outer_last = theta if prev is None else max(prev, theta)

    # -- metrics -------------------------------------------------------------
    def _global_stats(self):
        """[sum g_i(alpha_i), sum g_i*(-a_i^T w)] across all coordinates.

        Called from the driver thread; when all nodes are in-process the
        local sums already cover every coordinate. Only the multi-process
        case (one local node) needs a collective.
        """
        w = f_grad(self.spec, self.v)
        local = np.zeros(2)
        for node in self.local_nodes:
            for dev in node.devices:
                local[0] += g_sum(self.spec, self.alpha[dev.cols])
                if self.spec.kind != "lasso_primal":
                    local[1] += g_conjugate_sum(self.spec, -dev.data.rmatvec(w))
        if len(self.local_nodes) == self.config.nodes:
            return local
        return self.participants[0].allreduce_sum(local)

    def objective_and_gap(self):
        stats = self._global_stats()
        fv = f_eval(self.spec, self.v)
        obj = float(fv + stats[0])
        gap = None
        if self.spec.kind != "lasso_primal":
            w = f_grad(self.spec, self.v)
            gap = float(fv + f_conjugate(self.spec, w) + stats[0] + stats[1])
        return obj, gap

    def train(self, stopping):
        cfg = self.config
        trace = ConvergenceTrace()
        self.last_trace = trace  # kept reachable when a solver error aborts
        t0 = time.perf_counter()
        per_round_cost = 0.0
        if self.cost_model is not None:
            per_round_cost = (self.cost_model.c1
                              + cfg.t2 * (self.cost_model.c2
                                          + self.cost_model.c_comp))
        reason = "max_rounds"
        rounds = 0

        def record(rnd):
            obj, gap = self.objective_and_gap()
            trace.append(TraceRow(
                round=rnd, wall_s=time.perf_counter() - t0,
                sim_cost=rnd * per_round_cost, objective=obj, gap=gap,
                theta=self._theta_outer_last))
            self._theta_outer_last = None
            return obj, gap

        obj, gap = record(0)
        if _met(stopping, obj, gap):
            reason = "target_met"
        else:
            max_rounds = cfg.t1 if stopping.max_rounds is None \
                else stopping.max_rounds
            for rnd in range(1, max_rounds + 1):
                self.outer_round()
                rounds = rnd
                obj, gap = record(rnd)
                if _met(stopping, obj, gap):
                    reason = "target_met"
                    break
                if (stopping.time_budget_s is not None
                        and time.perf_counter() - t0 > stopping.time_budget_s):
                    reason = "time_budget"
                    break
        alpha = self.alpha_global()
        self.spec.check_alpha(alpha)
        theta_max = max(self.theta_bars) if self.theta_bars else None
        return TrainResult(model=Model(alpha, self.spec),
                           trace=trace, v=self.v.copy(), rounds=rounds,
                           stop_reason=reason, theta_bar_max=theta_max,
                           theta_bars=list(self.theta_bars))

    def alpha_global(self):
        """Full alpha; in multi-process mode gathers the remote slices."""
        if len(self.local_nodes) == self.config.nodes:
            return self.alpha
        padded = np.zeros(len(self.alpha))
        cols = self.local_nodes[0].cols
        padded[cols] = self.alpha[cols]
        return self.participants[0].allreduce_sum(padded)


def _met(stopping, obj, gap):
    if stopping.target_gap is not None and gap is not None \
            and gap <= stopping.target_gap:
        return True
    if stopping.target_subopt is not None and stopping.f_star is not None \
            and obj - stopping.f_star <= stopping.target_subopt:
        return True
    return False


def train(matrix, spec, config, stopping, **kwargs):
    """Convenience wrapper: build an Engine and run it."""
    engine = Engine(matrix, spec, config, **kwargs)
    return engine.train(stopping)

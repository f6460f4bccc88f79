"""Out-of-core training driver: the three-stage active/swap pipeline.

While the solver trains the chunk in the active buffer, the next chunk is
read from the chunk store into the swap buffer and its permutation keys are
generated on a third stage. Handoffs use depth-1 rendezvous queues (one item
in flight), matching the two-buffer design; the final model state is
independent of pipelining because chunk keys are derived statelessly from
(seed, epoch, chunk).
"""

from __future__ import annotations

import queue
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .data import read_chunk
from .solver import (DampingState, LocalSubproblem, SolverDivergence,
                     SolverError, DAMPING_FLOOR, PLATEAU_REL, derive_seed,
                     run_pass, splitmix64, xorshift64_step)

KEY_BLOCK = 4096
STAGE_TIMEOUT_S = 120.0


def generate_keys(seed, n, n_threads=1):
    """n 32-bit pseudo-random sort keys, identical for every thread count.

    The index range is split into fixed KEY_BLOCK-wide blocks; block b is
    seeded by mixing (seed, b) and advanced with the xorshift (13, 7, 17)
    step, so the output never depends on how blocks are assigned to threads.
    """
    if n <= 0:
        return np.empty(0, dtype=np.uint32)
    n_blocks = (n + KEY_BLOCK - 1) // KEY_BLOCK
    out = np.empty(n, dtype=np.uint32)

    def fill(block):
        state = derive_seed(seed, block)
        lo = block * KEY_BLOCK
        hi = min(lo + KEY_BLOCK, n)
        buf = np.empty(hi - lo, dtype=np.uint32)
        s = state
        for i in range(hi - lo):
            s = xorshift64_step(s)
            buf[i] = s & 0xFFFFFFFF
        out[lo:hi] = buf

    if n_threads <= 1 or n_blocks == 1:
        for b in range(n_blocks):
            fill(b)
    else:
        blocks = iter(range(n_blocks))
        lock = threading.Lock()

        def worker():
            while True:
                with lock:
                    b = next(blocks, None)
                if b is None:
                    return
                fill(b)

        threads = [threading.Thread(target=worker)
                   for _ in range(min(n_threads, n_blocks))]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    return out


def keys_to_permutation(keys):
    """Sort keys by value with index tie-break (stable sort)."""
    return np.argsort(keys, kind="stable").astype(np.int64)


@dataclass
class StageEvent:
    stage: str
    chunk: int
    start: float
    end: float


@dataclass
class PipelineSchedule:
    """Per-chunk stage timing log for one pipelined epoch."""
    events: list[StageEvent] = field(default_factory=list)
    steps: list[dict] = field(default_factory=list)

    HEADER = "chunk,load_ms,rand_ms,train_ms,step_ms"

    def log(self, stage, chunk, start, end):
        self.events.append(StageEvent(stage, chunk, start, end))

    def finalize(self):
        by = {}
        for ev in self.events:
            by.setdefault(ev.chunk, {})[ev.stage] = ev
        train_ends = sorted((ev.end, ev.chunk) for ev in self.events
                            if ev.stage == "train")
        prev_end = None
        for end, chunk in train_ends:
            rec = by[chunk]
            step_ms = 0.0 if prev_end is None else (end - prev_end) * 1e3
            self.steps.append({
                "chunk": chunk,
                "load_ms": (rec["load"].end - rec["load"].start) * 1e3,
                "rand_ms": (rec["rand"].end - rec["rand"].start) * 1e3,
                "train_ms": (rec["train"].end - rec["train"].start) * 1e3,
                "step_ms": step_ms,
            })
            prev_end = end

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write(self.HEADER + "\n")
            for s in self.steps:
                fh.write("%d,%.3f,%.3f,%.3f,%.3f\n" % (
                    s["chunk"], s["load_ms"], s["rand_ms"], s["train_ms"],
                    s["step_ms"]))

    def assert_buffer_safety(self):
        """No chunk starts training before its load and keys completed."""
        ready = {}
        for ev in self.events:
            if ev.stage in ("load", "rand"):
                ready[(ev.stage, ev.chunk)] = ev.end
        for ev in self.events:
            if ev.stage == "train":
                if ev.start < ready[("load", ev.chunk)] - 1e-9 or \
                        ev.start < ready[("rand", ev.chunk)] - 1e-9:
                    raise AssertionError(
                        f"chunk {ev.chunk} trained before its buffers were ready")


@dataclass
class ChunkedSolveContext:
    """Device-solve state threaded through the chunks of one epoch.

    The chunks partition the device's coordinates in order; `delta` and
    `base` are indexed by device-local coordinate, `view` is the running
    lin + quad * (B delta) shared vector.
    """
    sub: LocalSubproblem          # spanning all chunks (data = full device matrix)
    delta: np.ndarray
    view: np.ndarray
    chunk_offsets: list           # local start index of every chunk
    seed: int
    epoch_index: int = 0
    n_threads: int = 1


def _train_chunk(ctx, chunk_index, chunk_matrix, keys, damping, schedule=None,
                 delay_s=0.0):
    """Sort keys into a permutation and run one damped pass over the chunk.

    The damping check is chunk-granular out of core: if the device
    subproblem value increased, the chunk's updates are discarded, the
    factor halves and the same chunk retries with the same keys.
    """
    sub = ctx.sub
    lo = ctx.chunk_offsets[chunk_index]
    hi = lo + chunk_matrix.n_cols
    chunk_sub = LocalSubproblem(
        spec=sub.spec, lin=sub.lin, quad=sub.quad, const=0.0,
        base=sub.base[lo:hi], data=chunk_matrix,
        col_ids=sub.col_ids[lo:hi])
    order = keys_to_permutation(keys)
    value = _device_value(ctx)
    while True:
        snap_delta = ctx.delta[lo:hi].copy()
        snap_view = ctx.view.copy()
        if delay_s:
            time.sleep(delay_s)
        run_pass(chunk_sub, ctx.delta[lo:hi], ctx.view, order,
                 n_threads=ctx.n_threads, damping=damping.delta)
        new_value = _device_value(ctx)
        if new_value > value:
            ctx.delta[lo:hi] = snap_delta
            ctx.view[:] = snap_view
            if new_value - value <= PLATEAU_REL * (1.0 + abs(value)):
                return value  # chunk already solved to evaluation precision
            if damping.halve() < DAMPING_FLOOR:
                raise SolverDivergence(
                    "damping floor reached during chunked epoch",
                    diagnostics={"chunk": chunk_index, "value": value})
            continue
        return new_value


def _device_value(ctx):
    return ctx.sub.value(ctx.delta)


def pipelined_epoch(store, ctx, damping=None, pipelined=True,
                    inject_load_s=0.0, inject_rand_s=0.0, inject_train_s=0.0,
                    step_timeout_s=STAGE_TIMEOUT_S):
    """One pass over every chunk of the store, three stages overlapped.

    With pipelined=False the same work runs sequentially (load, keygen,
    train per chunk in order); the resulting model state is identical
    because chunk keys are derived from (seed, epoch, chunk) statelessly.
    Returns (final device-subproblem value, PipelineSchedule).
    """
    damping = damping if damping is not None else DampingState()
    schedule = PipelineSchedule()
    n_chunks = store.n_chunks
    clock = time.perf_counter

    def load(c):
        t0 = clock()
        mat = read_chunk(store, c)
        if inject_load_s:
            time.sleep(inject_load_s)
        schedule.log("load", c, t0, clock())
        return mat

    def rand(c):
        t0 = clock()
        keys = generate_keys(derive_seed(ctx.seed, ctx.epoch_index, c),
                             store.chunks[c].n_cols)
        if inject_rand_s:
            time.sleep(inject_rand_s)
        schedule.log("rand", c, t0, clock())
        return keys

    value = _device_value(ctx)
    if not pipelined:
        for c in range(n_chunks):
            mat = load(c)
            keys = rand(c)
            t0 = clock()
            value = _train_chunk(ctx, c, mat, keys, damping,
                                 delay_s=inject_train_s)
            schedule.log("train", c, t0, clock())
        schedule.finalize()
        return value, schedule

    load_q = queue.Queue(maxsize=1)   # rendezvous: one chunk in flight
    key_q = queue.Queue(maxsize=1)
    errors = []

    def loader():
        try:
            for c in range(n_chunks):
                load_q.put((c, load(c)), timeout=step_timeout_s)
        except BaseException as exc:
            errors.append(exc)
            load_q.put(None)

    def keygen():
        try:
            for c in range(n_chunks):
                key_q.put((c, rand(c)), timeout=step_timeout_s)
        except BaseException as exc:
            errors.append(exc)
            key_q.put(None)

    results = {}

    def trainer():
        nonlocal value
        try:
            for c in range(n_chunks):
                got_load = load_q.get(timeout=step_timeout_s)
                got_keys = key_q.get(timeout=step_timeout_s)
                if got_load is None or got_keys is None:
                    return
                c_l, mat = got_load
                c_k, keys = got_keys
                if c_l != c or c_k != c:
                    raise SolverError("pipeline stages out of order")
                t0 = clock()
                results[c] = _train_chunk(ctx, c, mat, keys, damping,
                                          delay_s=inject_train_s)
                schedule.log("train", c, t0, clock())
        except BaseException as exc:
            errors.append(exc)

    threads = [threading.Thread(target=fn) for fn in (loader, keygen, trainer)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0] if isinstance(errors[0], SolverError) \
            else SolverError(f"pipeline stage failed: {errors[0]!r}")
    value = results[n_chunks - 1]
    schedule.finalize()
    return value, schedule


def chunked_device_runner(store, seed, epochs, pipelined=True, n_threads=1,
                          inject_load_s=0.0, inject_rand_s=0.0,
                          inject_train_s=0.0, schedule_sink=None):
    """Adapter plugging chunked epochs into the engine's device solve.

    Returns a callable with the engine's chunk_runner signature; it replaces
    the in-memory damped_solve with `epochs` pipelined (or sequential) passes
    over the chunk store.
    """
    from .solver import SubtaskResult

    offsets = []
    acc = 0
    for desc in store.chunks:
        offsets.append(acc)
        acc += desc.n_cols
    epoch_counter = [0]

    def runner(sub, dev, cfg):
        ctx = ChunkedSolveContext(sub=sub, delta=np.zeros(sub.n_local),
                                  view=sub.lin.copy(), chunk_offsets=offsets,
                                  seed=seed, n_threads=n_threads)
        initial = sub.value(ctx.delta)
        value = initial
        epoch_values = []
        for _ in range(epochs):
            ctx.epoch_index = epoch_counter[0]
            epoch_counter[0] += 1
            value, sched = pipelined_epoch(
                store, ctx, damping=dev.damping, pipelined=pipelined,
                inject_load_s=inject_load_s, inject_rand_s=inject_rand_s,
                inject_train_s=inject_train_s)
            epoch_values.append(value)
            if schedule_sink is not None:
                schedule_sink.append(sched)
        delta_v = sub.data.matvec(ctx.delta)
        return SubtaskResult(col_ids=sub.col_ids, delta_alpha=ctx.delta,
                             delta_v=delta_v, epochs_run=epochs,
                             final_subproblem_value=value,
                             initial_subproblem_value=initial,
                             epoch_values=epoch_values)

    return runner

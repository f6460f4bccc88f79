"""Command line entry point: train, predict, eval, chunk, analyze.

Exit codes: 0 success, 1 solver failure (trace still written), 2 usage error.
A plain key=value config file can supplement flags; flags win.
"""

from __future__ import annotations

import argparse
import math
import sys

import numpy as np

from . import analysis, comm, data, engine, modelio
from .objectives import ObjectiveSpec
from .pipeline import chunked_device_runner
from .solver import SolverError

OBJECTIVE_NAMES = {
    "dual-logistic": "dual_l2_logistic",
    "dual-svm": "dual_l2_svm",
    "ridge": "ridge_primal",
    "lasso": "lasso_primal",
}

EXIT_OK = 0
EXIT_SOLVER = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


def _build_parser():
    top = argparse.ArgumentParser(prog="hierglm")
    top.add_argument("--config", help="key=value file supplementing flags")
    sub = top.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="train a model")
    tr.add_argument("--data", required=True)
    tr.add_argument("--data-format", choices=("svmlight", "chunks"),
                    default="svmlight")
    tr.add_argument("--objective", choices=sorted(OBJECTIVE_NAMES),
                    default="dual-logistic")
    tr.add_argument("--lambda", dest="lam", type=float, default=1.0)
    tr.add_argument("--nodes", type=int, default=1)
    tr.add_argument("--devices", type=int, default=1)
    tr.add_argument("--t1", type=int, default=None,
                    help="outer rounds (alias of --max-rounds)")
    tr.add_argument("--max-rounds", type=int, default=20)
    tr.add_argument("--t2", type=int, default=1)
    tr.add_argument("--sigma", type=float, default=None)
    tr.add_argument("--sigma-bar", type=float, default=None)
    tr.add_argument("--epochs", type=int, default=1)
    tr.add_argument("--threads-per-device", type=int, default=1)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--target-gap", type=float, default=None)
    tr.add_argument("--target-subopt", type=float, default=None)
    tr.add_argument("--f-star", type=float, default=None)
    tr.add_argument("--time-budget-s", type=float, default=None)
    tr.add_argument("--model-out", default="model.bin")
    tr.add_argument("--trace-out", default=None)
    tr.add_argument("--pipeline", choices=("on", "off"), default="off")
    tr.add_argument("--inject-load-delay-ms", type=float, default=0.0)
    tr.add_argument("--stage-log-out", default=None,
                    help="pipeline stage timing CSV (chunked mode)")
    tr.add_argument("--comm", choices=("inproc", "tcp-star", "tcp-ring"),
                    default="inproc")
    tr.add_argument("--rank", type=int, default=0)
    tr.add_argument("--peers", default=None,
                    help="host:port,... (one per node, rank order)")

    pr = sub.add_parser("predict", help="score examples with a model")
    pr.add_argument("--model", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--scores-out", default=None)

    ev = sub.add_parser("eval", help="evaluate a model on labelled data")
    ev.add_argument("--model", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--scores-out", default=None)

    ch = sub.add_parser("chunk", help="write a chunk store for out-of-core training")
    ch.add_argument("--data", required=True)
    ch.add_argument("--objective", choices=sorted(OBJECTIVE_NAMES),
                    default="dual-logistic")
    ch.add_argument("--chunk-size", type=int, required=True)
    ch.add_argument("--out", required=True)

    an = sub.add_parser("analyze", help="rate bounds and schedule optimization")
    an.add_argument("--c1", type=float, required=True)
    an.add_argument("--c2", type=float, required=True)
    an.add_argument("--ccomp", type=float, required=True)
    an.add_argument("--budget", type=float, required=True)
    an.add_argument("--theta-bar", type=float, default=0.0)
    an.add_argument("--beta", type=float, default=1.0)
    an.add_argument("--mu", type=float, default=0.0)
    an.add_argument("--c-a", type=float, default=1.0)
    an.add_argument("--radius", type=float, default=math.inf)
    an.add_argument("--nodes", type=int, default=1)
    an.add_argument("--devices", type=int, default=1)
    an.add_argument("--sigma", type=float, default=None)
    an.add_argument("--sigma-bar", type=float, default=None)
    an.add_argument("--t2-grid", default="1,2,4,8,16")
    an.add_argument("--out", default=None)
    return top


def _apply_config_file(parser, argv):
    """Pre-parse --config and install its key=value pairs as defaults."""
    if "--config" not in argv:
        return argv
    at = argv.index("--config")
    path = argv[at + 1]
    defaults = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"bad config line {line!r}")
            key, val = line.split("=", 1)
            defaults[key.strip().replace("-", "_")] = val.strip()
    for action_parser in parser._subparsers._group_actions[0].choices.values():
        known = {a.dest for a in action_parser._actions}
        action_parser.set_defaults(**{k: _coerce(action_parser, k, v)
                                      for k, v in defaults.items() if k in known})
    return argv


def _coerce(parser, dest, value):
    for action in parser._actions:
        if action.dest == dest and action.type is not None:
            return action.type(value)
    return value


def _labels_to_pm1(y):
    y01 = modelio.normalize_binary_labels(y)
    return 2.0 * y01 - 1.0


def load_training_data(path, fmt, kind, lam):
    """Map raw data onto the training layout required by the objective.

    Dual kinds: columns are examples scaled by their +-1 label. Primal kinds:
    columns are features, the label vector becomes the regression target.
    Returns (matrix, spec, labels01_or_None, store_or_None).
    """
    if fmt == "chunks":
        store = data.open_chunks(path)
        matrix = data.concat_chunks(store)
        if kind.startswith("dual_"):
            if matrix.labels is None and store.chunks:
                raise UsageError("chunk store lacks labels for a dual objective")
            spec = ObjectiveSpec(kind, lam, n_examples=matrix.n_cols,
                                 n_features=matrix.n_rows)
            y01 = modelio.normalize_binary_labels(matrix.labels) \
                if matrix.labels is not None else None
            return matrix, spec, y01, store
        if store.row_vector is None:
            raise UsageError("chunk store lacks the regression target")
        spec = ObjectiveSpec(kind, lam, n_examples=matrix.n_rows,
                             n_features=matrix.n_cols,
                             target=store.row_vector)
        return matrix, spec, None, store

    with open(path) as fh:
        examples, labels = data.parse_svmlight(fh)
    if kind.startswith("dual_"):
        y_pm = _labels_to_pm1(labels)
        matrix = examples.scale_columns(y_pm)
        matrix = data.SparseColumnMatrix(matrix.n_rows, matrix.indptr,
                                         matrix.rows, matrix.vals,
                                         labels=labels, validate=False)
        spec = ObjectiveSpec(kind, lam, n_examples=matrix.n_cols,
                             n_features=matrix.n_rows)
        return matrix, spec, modelio.normalize_binary_labels(labels), None
    features = examples.transpose()
    spec = ObjectiveSpec(kind, lam, n_examples=features.n_rows,
                         n_features=features.n_cols, target=labels)
    return features, spec, None, None


def cmd_train(args):
    t1 = args.t1 if args.t1 is not None else args.max_rounds
    cfg = engine.HierarchyConfig(
        nodes=args.nodes, devices=args.devices, t1=t1, t2=args.t2,
        sigma=args.sigma, sigma_bar=args.sigma_bar, seed=args.seed,
        epochs=args.epochs, threads_per_device=args.threads_per_device)
    matrix, spec, y01, store = load_training_data(
        args.data, args.data_format, OBJECTIVE_NAMES[args.objective], args.lam)

    chunk_runner = None
    schedule_sink = []
    if args.pipeline == "on" or (store is not None and args.data_format == "chunks"):
        if store is None:
            raise UsageError("--pipeline on requires --data-format chunks")
        if args.nodes != 1 or args.devices != 1:
            raise UsageError("chunked training supports a single node/device")
        chunk_runner = chunked_device_runner(
            store, seed=args.seed, epochs=args.epochs,
            pipelined=args.pipeline == "on",
            n_threads=args.threads_per_device,
            inject_load_s=args.inject_load_delay_ms / 1e3,
            schedule_sink=schedule_sink if args.stage_log_out else None)

    reducer = None
    node_index = None
    if args.comm != "inproc":
        if args.peers is None:
            raise UsageError("tcp reducers need --peers")
        peers = args.peers.split(",")
        if len(peers) != args.nodes:
            raise UsageError("--peers must list one address per node")
        reducer = comm.make_reducer(args.comm, rank=args.rank, peers=peers,
                                    dim=spec.dim)
        reducer.handshake()
        node_index = args.rank

    eng = engine.Engine(matrix, spec, cfg, reducer=reducer,
                        node_index=node_index, chunk_runner=chunk_runner)
    stopping = engine.StoppingCriteria(
        max_rounds=t1, target_gap=args.target_gap,
        target_subopt=args.target_subopt, f_star=args.f_star,
        time_budget_s=args.time_budget_s)
    try:
        result = eng.train(stopping)
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        if args.trace_out and getattr(eng, "last_trace", None) is not None:
            eng.last_trace.write_csv(args.trace_out)  # partial-state diagnostics
        return EXIT_SOLVER
    finally:
        if reducer is not None:
            reducer.close()

    is_writer = node_index in (None, 0)
    if is_writer:
        modelio.save_model(args.model_out, spec, result.model.alpha, result.v)
        if args.trace_out:
            result.trace.write_csv(args.trace_out)
        if args.stage_log_out and schedule_sink:
            with open(args.stage_log_out, "w") as fh:
                fh.write("epoch," + schedule_sink[0].HEADER + "\n")
                for epoch, sched in enumerate(schedule_sink):
                    for s in sched.steps:
                        fh.write("%d,%d,%.3f,%.3f,%.3f,%.3f\n" % (
                            epoch, s["chunk"], s["load_ms"], s["rand_ms"],
                            s["train_ms"], s["step_ms"]))
    last = result.trace.rows[-1]
    summary = (f"rounds={result.rounds} objective={last.objective:.12g}"
               f" gap={'' if last.gap is None else format(last.gap, '.12g')}")
    if y01 is not None and spec.kind == "dual_l2_logistic" and is_writer:
        w = result.v / spec.lam
        # training matrix columns carry the label sign; recover raw scores
        raw = matrix.rmatvec(w) * (2.0 * y01 - 1.0)
        summary += f" logloss={modelio.log_loss(modelio.sigmoid(raw), y01):.12g}"
    print(summary)
    return EXIT_OK


def _load_examples(path):
    with open(path) as fh:
        return data.parse_svmlight(fh)


def cmd_predict(args, want_metrics=False):
    model = modelio.load_model(args.model)
    examples, labels = _load_examples(args.data)
    if want_metrics and examples.n_cols == 0:
        raise UsageError("empty test set")
    w = modelio.primal_weights(model)
    scores = modelio.decision_scores(examples, w)
    classifier = model["kind"].startswith("dual_")
    prob = modelio.sigmoid(scores) if classifier else None
    if args.scores_out:
        with open(args.scores_out, "w") as fh:
            if classifier:
                fh.write("score,probability,label\n")
                for s, p in zip(scores, prob):
                    fh.write(f"{float(s)!r},{float(p)!r},{1 if p >= 0.5 else -1}\n")
            else:
                fh.write("prediction\n")
                for s in scores:
                    fh.write(f"{float(s)!r}\n")
    if want_metrics:
        if classifier:
            y01 = modelio.normalize_binary_labels(labels)
            print(f"logloss={modelio.log_loss(prob, y01):.12g} "
                  f"accuracy={modelio.accuracy(prob, y01):.12g}")
        else:
            print(f"mse={modelio.mean_squared_error(scores, labels):.12g}")
    elif not args.scores_out:
        for s in scores:
            print(repr(float(s)))
    return EXIT_OK


def cmd_chunk(args):
    kind = OBJECTIVE_NAMES[args.objective]
    with open(args.data) as fh:
        examples, labels = data.parse_svmlight(fh)
    if kind.startswith("dual_"):
        y_pm = _labels_to_pm1(labels)
        folded = examples.scale_columns(y_pm)
        matrix = data.SparseColumnMatrix(folded.n_rows, folded.indptr,
                                         folded.rows, folded.vals,
                                         labels=labels, validate=False)
        store = data.write_chunks(matrix, args.chunk_size, args.out)
    else:
        features = examples.transpose()
        store = data.write_chunks(features, args.chunk_size, args.out,
                                  row_vector=labels)
    print(f"chunks={store.n_chunks} cols={store.n_cols} path={args.out}")
    return EXIT_OK


def cmd_analyze(args):
    params = analysis.RateParams(
        beta=args.beta, mu=args.mu, c_a=args.c_a, nodes=args.nodes,
        devices=args.devices, support_radius=args.radius,
        theta_bar=args.theta_bar, sigma=args.sigma, sigma_bar=args.sigma_bar)
    cost = analysis.CostModel(args.c1, args.c2, args.ccomp, args.budget)
    try:
        best = analysis.optimize_schedule(params, cost)
    except analysis.InfeasibleBudgetError as exc:
        raise UsageError(str(exc))
    t2_values = [int(x) for x in args.t2_grid.split(",")]
    rows = analysis.schedule_table(params, cost, t2_values)
    lines = ["t1,t2,bound,sim_time"]
    for t1, t2, bound, sim in rows:
        lines.append(f"{t1},{t2},{float(bound)!r},{float(sim)!r}")
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    print(f"best t1={best[0]} t2={best[1]} bound={best[2]:.12g}")
    return EXIT_OK


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    try:
        argv = _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        if args.command == "train":
            return cmd_train(args)
        if args.command == "predict":
            return cmd_predict(args, want_metrics=False)
        if args.command == "eval":
            return cmd_predict(args, want_metrics=True)
        if args.command == "chunk":
            return cmd_chunk(args)
        if args.command == "analyze":
            return cmd_analyze(args)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, ValueError, data.DataFormatError,
            data.ChunkFormatError, modelio.ModelFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())

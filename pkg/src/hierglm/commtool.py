"""Allreduce check tool: run seeded reduction rounds and dump the results.

Used to verify cross-topology byte equality with real processes:

    python -m hierglm.commtool --topology tcp-star --rank 0 \
        --peers 127.0.0.1:9001,127.0.0.1:9002 --rounds 100 --dim 64 \
        --seed 7 --out results.npy

Every rank derives its per-round contribution from (seed, round, rank), so
independent processes agree on the inputs without sharing data.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .comm import make_reducer
from .solver import derive_seed


def round_vector(seed, rnd, rank, dim):
    rng = np.random.default_rng(derive_seed(seed, rnd, rank))
    return rng.standard_normal(dim)


def run(topology, rank, peers, rounds, dim, seed, out=None, timeout=60.0):
    reducer = make_reducer(topology, rank=rank, peers=peers, dim=dim,
                           timeout=timeout)
    try:
        reducer.handshake()
        results = np.empty((rounds, dim))
        for rnd in range(rounds):
            results[rnd] = reducer.allreduce_sum(
                round_vector(seed, rnd, rank, dim))
    finally:
        reducer.close()
    if out:
        np.save(out, results)
    return results


def main(argv=None):
    ap = argparse.ArgumentParser(prog="hierglm.commtool")
    ap.add_argument("--topology", required=True,
                    choices=("inproc", "tcp-star", "tcp-ring"))
    ap.add_argument("--rank", type=int, default=0)
    ap.add_argument("--peers", default="")
    ap.add_argument("--rounds", type=int, default=10)
    ap.add_argument("--dim", type=int, default=16)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None)
    ap.add_argument("--timeout", type=float, default=60.0)
    args = ap.parse_args(argv)
    peers = args.peers.split(",") if args.peers else None
    run(args.topology, args.rank, peers, args.rounds, args.dim, args.seed,
        args.out, args.timeout)
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Reducers: canonical sums, collective semantics, cross-topology equality."""

import socket
import subprocess
import sys
import threading
import time

import numpy as np
import pytest

from hierglm.comm import (InProcessReducer, ProtocolError, ReduceError,
                          TcpRingReducer, TcpStarReducer, canonical_sum)
from hierglm.commtool import round_vector


def reserve_ports(n):
    socks = []
    for _ in range(n):
        s = socket.socket()
        s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        s.bind(("127.0.0.1", 0))
        socks.append(s)
    ports = [s.getsockname()[1] for s in socks]
    for s in socks:
        s.close()
    return ports


def run_inprocess(world, fn):
    """Run fn(participant, rank) on `world` threads; returns results by rank."""
    reducer = InProcessReducer(world)
    results = [None] * world
    errors = []

    def work(rank):
        try:
            results[rank] = fn(reducer.participant(rank), rank)
        except Exception as exc:
            errors.append(exc)
            reducer.participant(rank).abort()

    threads = [threading.Thread(target=work, args=(r,)) for r in range(world)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    return results


class TestInProcess:
    def test_single_participant_identity(self):
        part = InProcessReducer(1).participant(0)
        vec = np.array([1.0, -2.0, 3.5])
        np.testing.assert_array_equal(part.allreduce_sum(vec), vec)

    def test_basis_sum(self):
        def fn(part, rank):
            vec = np.zeros(3)
            vec[rank] = 1.0
            return part.allreduce_sum(vec)

        for out in run_inprocess(3, fn):
            np.testing.assert_array_equal(out, np.ones(3))

    def test_matches_sequential_sum(self):
        rng = np.random.default_rng(5)
        vecs = rng.standard_normal((4, 50))

        def fn(part, rank):
            return part.allreduce_sum(vecs[rank])

        expect = canonical_sum(list(vecs))
        for out in run_inprocess(4, fn):
            np.testing.assert_allclose(out, expect, atol=1e-12)

    def test_collective_blocks_until_all_contribute(self):
        reducer = InProcessReducer(2)
        arrived = threading.Event()
        out = {}

        def early():
            out[0] = reducer.participant(0).allreduce_sum(np.ones(2))
            arrived.set()

        t = threading.Thread(target=early)
        t.start()
        time.sleep(0.15)
        assert not arrived.is_set()  # still blocked: rank 1 missing
        out[1] = reducer.participant(1).allreduce_sum(2 * np.ones(2))
        t.join()
        np.testing.assert_array_equal(out[0], out[1])

    def test_length_mismatch_is_collective_error(self):
        def fn(part, rank):
            return part.allreduce_sum(np.ones(3 if rank == 0 else 4))

        with pytest.raises(ProtocolError):
            run_inprocess(2, fn)


def _run_star(world, vals_by_rank, ports):
    peers = [f"127.0.0.1:{ports[0]}"] * world
    out = [None] * world

    def node(rank):
        red = TcpStarReducer(rank, peers, dim=len(vals_by_rank[0]), timeout=20)
        try:
            red.handshake()
            out[rank] = red.allreduce_sum(vals_by_rank[rank])
        finally:
            red.close()

    threads = [threading.Thread(target=node, args=(r,)) for r in range(world)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    return out


def _run_ring(world, vals_by_rank, ports):
    peers = [f"127.0.0.1:{p}" for p in ports[:world]]
    out = [None] * world
    errs = []

    def node(rank):
        try:
            red = TcpRingReducer(rank, peers, dim=len(vals_by_rank[0]), timeout=20)
            try:
                red.handshake()
                out[rank] = red.allreduce_sum(vals_by_rank[rank])
            finally:
                red.close()
        except Exception as exc:
            errs.append(exc)

    threads = [threading.Thread(target=node, args=(r,)) for r in range(world)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errs:
        raise errs[0]
    return out


class TestTcpThreaded:
    def test_star_matches_canonical(self):
        rng = np.random.default_rng(7)
        vecs = rng.standard_normal((3, 33))
        ports = reserve_ports(1)
        outs = _run_star(3, vecs, ports)
        expect = canonical_sum(list(vecs))
        for o in outs:
            np.testing.assert_array_equal(o, expect)

    def test_ring_matches_canonical_bytes(self):
        rng = np.random.default_rng(8)
        vecs = rng.standard_normal((4, 37))
        ports = reserve_ports(4)
        outs = _run_ring(4, vecs, ports)
        expect = canonical_sum(list(vecs))
        for o in outs:
            assert o.tobytes() == expect.tobytes()

    def test_ring_two_nodes(self):
        vecs = np.array([[1.0, 2.0], [10.0, 20.0]])
        ports = reserve_ports(2)
        outs = _run_ring(2, vecs, ports)
        for o in outs:
            np.testing.assert_array_equal(o, [11.0, 22.0])

    def test_star_duplicate_rank_fails(self):
        ports = reserve_ports(1)
        peers = [f"127.0.0.1:{ports[0]}"] * 3
        errors = []

        def node(rank, claim):
            try:
                red = TcpStarReducer(rank, peers, dim=4, timeout=5)
                red.rank = claim  # both spokes claim rank 1
                red.handshake()
                red.close()
            except Exception as exc:
                errors.append(exc)

        threads = [threading.Thread(target=node, args=(0, 0)),
                   threading.Thread(target=node, args=(1, 1)),
                   threading.Thread(target=node, args=(2, 1))]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert any(isinstance(e, (ProtocolError, ReduceError)) for e in errors)


@pytest.mark.slow
class TestRealProcesses:
    def test_star_ring_inproc_byte_identical(self, tmp_path):
        """3 topologies, 4 participants, 100 seeded vectors, byte equality."""
        world, rounds, dim, seed = 4, 100, 64, 2024
        outputs = {}
        for topology in ("tcp-star", "tcp-ring"):
            ports = reserve_ports(world)
            if topology == "tcp-star":
                peers = ",".join([f"127.0.0.1:{ports[0]}"] * world)
            else:
                peers = ",".join(f"127.0.0.1:{p}" for p in ports)
            procs = []
            for rank in range(world):
                out = tmp_path / f"{topology}-{rank}.npy"
                procs.append((subprocess.Popen(
                    [sys.executable, "-m", "hierglm.commtool",
                     "--topology", topology, "--rank", str(rank),
                     "--peers", peers, "--rounds", str(rounds),
                     "--dim", str(dim), "--seed", str(seed),
                     "--out", str(out)],
                    stdout=subprocess.PIPE, stderr=subprocess.PIPE), out))
            for proc, _ in procs:
                _, err = proc.communicate(timeout=120)
                assert proc.returncode == 0, err.decode()
            results = [np.load(out) for _, out in procs]
            for r in results[1:]:
                assert r.tobytes() == results[0].tobytes()
            outputs[topology] = results[0]

        # in-process participants on threads
        reducer = InProcessReducer(world)
        acc = [None] * world

        def node(rank):
            part = reducer.participant(rank)
            rows = np.empty((rounds, dim))
            for rnd in range(rounds):
                rows[rnd] = part.allreduce_sum(
                    round_vector(seed, rnd, rank, dim))
            acc[rank] = rows

        threads = [threading.Thread(target=node, args=(r,))
                   for r in range(world)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        outputs["in_process"] = acc[0]

        assert outputs["tcp-star"].tobytes() == outputs["tcp-ring"].tobytes()
        assert outputs["tcp-star"].tobytes() == outputs["in_process"].tobytes()

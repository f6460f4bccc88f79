"""Shared-vector reducers: in-process barrier sum and TCP star/ring allreduce.

All reducers fold contributions in ascending rank order (canonical summation),
so results are byte-identical across topologies for identical inputs. The wire
protocol is length-prefixed little-endian frames:

    frame = { tag: u32, rank: u32, payload_len: u64, payload: f64[...] }

with tags HANDSHAKE, REDUCE_CHUNK, RESULT_CHUNK, ERROR. Calls are collective
and blocking: no participant returns from allreduce_sum before every
participant has contributed.
"""

from __future__ import annotations

import socket
import struct
import threading
import time

import numpy as np

PROTOCOL_VERSION = 1
TAG_HANDSHAKE = 1
TAG_REDUCE_CHUNK = 2
TAG_RESULT_CHUNK = 3
TAG_ERROR = 4

_FRAME_HEAD = struct.Struct("<IIQ")
DEFAULT_TIMEOUT = 60.0


class ReduceError(RuntimeError):
    pass


class ProtocolError(ReduceError):
    pass


def canonical_sum(vectors):
    """Left-fold sum in ascending rank order (reproducible bit pattern)."""
    out = vectors[0].copy()
    for vec in vectors[1:]:
        out += vec
    return out


# ---------------------------------------------------------------------------
# in-process reducer (thread-based nodes in one process)
# ---------------------------------------------------------------------------

class InProcessReducer:
    """Collective sum across `world` threads of one process."""

    def __init__(self, world):
        self.world = world
        self._barrier = threading.Barrier(world)
        self._slots = [None] * world
        self._result = None

    def participant(self, rank):
        return _InProcessParticipant(self, rank)


class _InProcessParticipant:
    topology = "in_process"

    def __init__(self, owner, rank):
        self.owner = owner
        self.rank = rank

    def handshake(self):
        return {"rank": self.rank, "world": self.owner.world,
                "version": PROTOCOL_VERSION}

    def _wait(self):
        try:
            self.owner._barrier.wait()
        except threading.BrokenBarrierError:
            raise ReduceError("collective aborted by a peer") from None

    def allreduce_sum(self, vec):
        owner = self.owner
        owner._slots[self.rank] = np.ascontiguousarray(vec, dtype=np.float64)
        self._wait()
        if self.rank == 0:
            lengths = {len(s) for s in owner._slots}
            if len(lengths) != 1:
                owner._result = ProtocolError("vector length mismatch")
            else:
                owner._result = canonical_sum(owner._slots)
        self._wait()
        result = owner._result
        self._wait()  # keep generations separated
        if isinstance(result, Exception):
            raise result
        return result.copy()

    def broadcast(self, vec):
        owner = self.owner
        if self.rank == 0:
            owner._result = np.ascontiguousarray(vec, dtype=np.float64)
        self._wait()
        result = owner._result
        self._wait()
        return result.copy()

    def abort(self):
        """Break every pending and future collective on this reducer."""
        self.owner._barrier.abort()

    def close(self):
        pass


# ---------------------------------------------------------------------------
# framing helpers
# ---------------------------------------------------------------------------

def send_frame(sock, tag, rank, payload):
    payload = np.ascontiguousarray(payload, dtype=np.float64)
    buf = payload.tobytes()
    sock.sendall(_FRAME_HEAD.pack(tag, rank, len(buf)) + buf)


def recv_exact(sock, n):
    chunks = []
    got = 0
    while got < n:
        piece = sock.recv(min(n - got, 1 << 20))
        if not piece:
            raise ReduceError("peer closed connection mid-frame")
        chunks.append(piece)
        got += len(piece)
    return b"".join(chunks)


def recv_frame(sock):
    tag, rank, plen = _FRAME_HEAD.unpack(recv_exact(sock, _FRAME_HEAD.size))
    if plen % 8 != 0:
        raise ProtocolError("payload length not a multiple of 8")
    payload = np.frombuffer(recv_exact(sock, plen), dtype="<f8").copy()
    if tag == TAG_ERROR:
        raise ReduceError(f"peer {rank} signalled collective error")
    return tag, rank, payload


def _connect_with_retry(addr, timeout, attempts=100):
    last = None
    for _ in range(attempts):
        try:
            sock = socket.create_connection(addr, timeout=timeout)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            return sock
        except OSError as exc:
            last = exc
            time.sleep(0.05)
    raise ReduceError(f"could not connect to {addr}: {last}")


def _parse_peers(peers):
    out = []
    for item in peers:
        host, port = item.rsplit(":", 1)
        out.append((host, int(port)))
    return out


# ---------------------------------------------------------------------------
# TCP star: rank 0 aggregates in rank order and broadcasts
# ---------------------------------------------------------------------------

class TcpStarReducer:
    """Hub-and-spoke allreduce; peers[0] is the hub address."""

    topology = "tcp_star"

    def __init__(self, rank, peers, dim, timeout=DEFAULT_TIMEOUT):
        self.rank = rank
        self.peers = _parse_peers(peers)
        self.world = len(self.peers)
        self.dim = dim
        self.timeout = timeout
        self._conns = {}
        self._listener = None
        if self.world > 1:
            if rank == 0:
                self._listener = socket.create_server(self.peers[0])
                self._listener.settimeout(timeout)
            else:
                self._hub = _connect_with_retry(self.peers[0], timeout)
                self._hub.settimeout(timeout)

    def handshake(self):
        if self.world == 1:
            return {"rank": 0, "world": 1, "version": PROTOCOL_VERSION}
        meta = np.array([PROTOCOL_VERSION, self.dim], dtype=np.float64)
        if self.rank == 0:
            seen = {0}
            for _ in range(self.world - 1):
                conn, _ = self._listener.accept()
                conn.settimeout(self.timeout)
                conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                tag, rank, payload = recv_frame(conn)
                if tag != TAG_HANDSHAKE:
                    raise ProtocolError("expected handshake frame")
                version, dim = int(payload[0]), int(payload[1])
                if version != PROTOCOL_VERSION:
                    self._fail(conn, rank, "protocol version mismatch")
                if dim != self.dim:
                    self._fail(conn, rank, "vector length mismatch")
                if rank in seen:
                    self._fail(conn, rank, f"duplicate rank {rank}")
                seen.add(rank)
                self._conns[rank] = conn
            for rank, conn in self._conns.items():
                send_frame(conn, TAG_HANDSHAKE, 0, meta)
        else:
            send_frame(self._hub, TAG_HANDSHAKE, self.rank, meta)
            tag, _, payload = recv_frame(self._hub)
            if tag != TAG_HANDSHAKE:
                raise ProtocolError("expected handshake ack")
            if int(payload[0]) != PROTOCOL_VERSION or int(payload[1]) != self.dim:
                raise ProtocolError("handshake disagreement")
        return {"rank": self.rank, "world": self.world,
                "version": PROTOCOL_VERSION}

    def _fail(self, conn, rank, msg):
        # tell everyone the collective is dead, then raise locally
        try:
            send_frame(conn, TAG_ERROR, 0, np.empty(0))
        except OSError:
            pass
        for other in self._conns.values():
            try:
                send_frame(other, TAG_ERROR, 0, np.empty(0))
            except OSError:
                pass
        raise ProtocolError(msg)

    def allreduce_sum(self, vec):
        vec = np.ascontiguousarray(vec, dtype=np.float64)
        if self.world == 1:
            return vec.copy()
        if self.rank == 0:
            parts = {0: vec}
            try:
                # one reduce frame per spoke; reception order is irrelevant
                # because the collective blocks until everyone contributed
                for peer in sorted(self._conns):
                    tag, rank, payload = recv_frame(self._conns[peer])
                    if tag != TAG_REDUCE_CHUNK:
                        raise ProtocolError("expected reduce frame")
                    if len(payload) != len(vec):
                        raise ProtocolError("vector length mismatch")
                    parts[rank] = payload
            except (ReduceError, OSError) as exc:
                for conn in self._conns.values():
                    try:
                        send_frame(conn, TAG_ERROR, 0, np.empty(0))
                    except OSError:
                        pass
                raise ReduceError(f"reduce failed at hub: {exc}") from exc
            total = canonical_sum([parts[r] for r in sorted(parts)])
            for conn in self._conns.values():
                send_frame(conn, TAG_RESULT_CHUNK, 0, total)
            return total
        send_frame(self._hub, TAG_REDUCE_CHUNK, self.rank, vec)
        tag, _, payload = recv_frame(self._hub)
        if tag != TAG_RESULT_CHUNK:
            raise ProtocolError("expected result frame")
        return payload

    def broadcast(self, vec):
        if self.world == 1:
            return np.ascontiguousarray(vec, dtype=np.float64).copy()
        if self.rank == 0:
            vec = np.ascontiguousarray(vec, dtype=np.float64)
            for conn in self._conns.values():
                send_frame(conn, TAG_RESULT_CHUNK, 0, vec)
            return vec.copy()
        tag, _, payload = recv_frame(self._hub)
        if tag != TAG_RESULT_CHUNK:
            raise ProtocolError("expected broadcast frame")
        return payload

    def close(self):
        for conn in self._conns.values():
            conn.close()
        if self._listener is not None:
            self._listener.close()
        if self.rank != 0 and self.world > 1:
            self._hub.close()


# ---------------------------------------------------------------------------
# TCP ring: reduce-scatter + allgather in 2(K-1) neighbor steps
# ---------------------------------------------------------------------------

class TcpRingReducer:
    """Ring allreduce preserving canonical rank-order summation.

    The scatter phase circulates raw per-rank contributions so each segment
    owner can fold them in ascending rank order; the gather phase circulates
    the reduced segments verbatim. 2(K-1) neighbor steps total.
    """

    topology = "tcp_ring"

    def __init__(self, rank, peers, dim, timeout=DEFAULT_TIMEOUT):
        self.rank = rank
        self.peers = _parse_peers(peers)
        self.world = len(self.peers)
        self.dim = dim
        self.timeout = timeout
        self._next = None
        self._prev = None
        if self.world > 1:
            listener = socket.create_server(self.peers[rank])
            listener.settimeout(timeout)
            succ = (rank + 1) % self.world
            if rank % 2 == 0:
                self._next = _connect_with_retry(self.peers[succ], timeout)
                self._prev, _ = listener.accept()
            else:
                self._prev, _ = listener.accept()
                self._next = _connect_with_retry(self.peers[succ], timeout)
            for sock in (self._next, self._prev):
                sock.settimeout(timeout)
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            listener.close()

    def handshake(self):
        if self.world == 1:
            return {"rank": 0, "world": 1, "version": PROTOCOL_VERSION}
        # circulate (version, dim, rank) tuples once around the ring
        token = [(PROTOCOL_VERSION, self.dim, self.rank)]
        for _ in range(self.world - 1):
            send_frame(self._next, TAG_HANDSHAKE, self.rank,
                       np.array(token[-1], dtype=np.float64))
            tag, _, payload = recv_frame(self._prev)
            if tag != TAG_HANDSHAKE:
                raise ProtocolError("expected handshake frame")
            version, dim, rank = (int(payload[0]), int(payload[1]),
                                  int(payload[2]))
            if version != PROTOCOL_VERSION:
                raise ProtocolError("protocol version mismatch")
            if dim != self.dim:
                raise ProtocolError("vector length mismatch")
            token.append((version, dim, rank))
        ranks = sorted(t[2] for t in token)
        if ranks != list(range(self.world)):
            raise ProtocolError(f"bad ring membership {ranks}")
        return {"rank": self.rank, "world": self.world,
                "version": PROTOCOL_VERSION}

    def _segments(self, dim):
        bounds = np.linspace(0, dim, self.world + 1).astype(int)
        return [(int(bounds[i]), int(bounds[i + 1])) for i in range(self.world)]

    def _exchange(self, tag, origin, payload):
        """Send to successor while receiving from predecessor.

        The send runs on a helper thread so a full ring of simultaneous
        sends larger than the socket buffers cannot deadlock.
        """
        err = []

        def _send():
            try:
                send_frame(self._next, tag, origin, payload)
            except OSError as exc:
                err.append(exc)

        th = threading.Thread(target=_send)
        th.start()
        try:
            frame = recv_frame(self._prev)
        finally:
            th.join()
        if err:
            raise ReduceError(f"ring send failed: {err[0]}") from err[0]
        return frame

    def allreduce_sum(self, vec):
        vec = np.ascontiguousarray(vec, dtype=np.float64)
        if self.world == 1:
            return vec.copy()
        world = self.world
        segs = self._segments(len(vec))
        own_lo, own_hi = segs[self.rank]
        # scatter phase: raw contributions travel the ring; each node keeps
        # the slice of every passing contribution that falls in its segment
        collected = {self.rank: vec[own_lo:own_hi]}
        outgoing = (self.rank, vec)
        for _ in range(world - 1):
            tag, origin, payload = self._exchange(TAG_REDUCE_CHUNK, *outgoing)
            if tag != TAG_REDUCE_CHUNK:
                raise ProtocolError("expected reduce frame in scatter phase")
            if len(payload) != len(vec):
                raise ProtocolError("vector length mismatch")
            collected[origin] = payload[own_lo:own_hi]
            outgoing = (origin, payload)
        reduced = canonical_sum([collected[r] for r in sorted(collected)])
        # gather phase: reduced segments travel the ring verbatim
        out = np.empty(len(vec))
        out[own_lo:own_hi] = reduced
        outgoing = (self.rank, reduced)
        for _ in range(world - 1):
            tag, owner, payload = self._exchange(TAG_RESULT_CHUNK, *outgoing)
            if tag != TAG_RESULT_CHUNK:
                raise ProtocolError("expected result frame in gather phase")
            lo, hi = segs[owner]
            out[lo:hi] = payload
            outgoing = (owner, payload)
        return out

    def broadcast(self, vec):
        if self.world == 1:
            return np.ascontiguousarray(vec, dtype=np.float64).copy()
        if self.rank == 0:
            vec = np.ascontiguousarray(vec, dtype=np.float64)
            send_frame(self._next, TAG_RESULT_CHUNK, 0, vec)
            tag, _, _ = recv_frame(self._prev)  # completion token
            return vec.copy()
        tag, origin, payload = recv_frame(self._prev)
        send_frame(self._next, TAG_RESULT_CHUNK, origin, payload)
        return payload

    def close(self):
        for sock in (self._next, self._prev):
            if sock is not None:
                sock.close()


def make_reducer(topology, rank=0, peers=None, dim=0, timeout=DEFAULT_TIMEOUT):
    if topology in ("inproc", "in_process"):
        return InProcessReducer(1).participant(0)
    if topology in ("tcp-star", "tcp_star"):
        return TcpStarReducer(rank, peers, dim, timeout)
    if topology in ("tcp-ring", "tcp_ring"):
        return TcpRingReducer(rank, peers, dim, timeout)
    raise ValueError(f"unknown comm topology {topology!r}")

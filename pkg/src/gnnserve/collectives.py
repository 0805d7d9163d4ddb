"""Synchronous collectives over a fixed-size world of ranks.

Two transports implement the same exchange contract:

* sim -- all ranks run as threads in one process and rendezvous on a
  shared hub; results are pure functions of the deposited payloads, so
  every schedule yields identical outcomes.
* tcp -- one rank per process over a full mesh of sockets.  Frames are
  ``magic "COL1" | u32 sequence | u32 payload length | payload`` with
  little-endian integers.

Collective calls must be matched: every rank issues the same operation
with the same sequence number.  A failed or timed-out rank aborts the
collective with a TransportError on all ranks.  Byte counters exclude the
self-delivered copy.
"""

from __future__ import annotations

import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field

FRAME_MAGIC = b"COL1"
_HEADER = struct.Struct("<4sII")


class TransportError(RuntimeError):
    pass


@dataclass
class CommStats:
    sent: int = 0
    received: int = 0
    per_op: dict = field(default_factory=dict)

    def record(self, op: str, sent: int, received: int) -> None:
        self.sent += sent
        self.received += received
        s, r = self.per_op.get(op, (0, 0))
        self.per_op[op] = (s + sent, r + received)


class _SimHub:
    """Rendezvous point for the in-process transport."""

    def __init__(self, size: int, timeout: float = 60.0):
        self.size = size
        self.timeout = timeout
        self._lock = threading.Lock()
        self._barrier = threading.Barrier(size)
        self._slots: dict[int, list] = {}
        self._ops: dict[int, str] = {}
        self._readers: dict[int, int] = {}
        self._failure: str | None = None

    def fail(self, reason: str) -> None:
        with self._lock:
            if self._failure is None:
                self._failure = reason
        self._barrier.abort()

    def exchange(self, rank: int, op: str, seq: int, outgoing: list[bytes]) -> list[bytes]:
        with self._lock:
            if self._failure is not None:
                raise TransportError(self._failure)
            if seq not in self._slots:
                self._slots[seq] = [None] * self.size
                self._ops[seq] = op
                self._readers[seq] = 0
            elif self._ops[seq] != op:
                reason = f"mismatched collective at seq {seq}: {self._ops[seq]} vs {op}"
                self._failure = self._failure or reason
        if self._failure is not None:
            self._barrier.abort()
            raise TransportError(self._failure)
        self._slots[seq][rank] = outgoing
        try:
            self._barrier.wait(timeout=self.timeout)
        except threading.BrokenBarrierError:
            raise TransportError(self._failure or "collective aborted") from None
        incoming = [self._slots[seq][j][rank] for j in range(self.size)]
        with self._lock:
            self._readers[seq] += 1
            if self._readers[seq] == self.size:
                del self._slots[seq], self._ops[seq], self._readers[seq]
        return incoming


class World:
    """One rank's handle: matched all_gather / all_to_all / barrier."""

    def __init__(self, rank: int, size: int, exchange_fn, fail_fn=None, close_fn=None):
        self.rank = rank
        self.size = size
        self._exchange_fn = exchange_fn
        self._fail_fn = fail_fn
        self._close_fn = close_fn
        self._seq = 0
        self._stats = CommStats()

    def _exchange(self, op: str, outgoing: list[bytes]) -> list[bytes]:
        if len(outgoing) != self.size:
            raise ValueError("need one payload per rank")
        seq = self._seq
        self._seq += 1
        incoming = self._exchange_fn(self.rank, op, seq, outgoing)
        sent = sum(len(outgoing[j]) for j in range(self.size) if j != self.rank)
        received = sum(len(incoming[j]) for j in range(self.size) if j != self.rank)
        self._stats.record(op, sent, received)
        return incoming

    def all_gather(self, data: bytes) -> list[bytes]:
        """Every rank receives the identical rank-ordered list of payloads."""
        return self._exchange("all_gather", [data] * self.size)

    def all_to_all(self, outgoing: list[bytes]) -> list[bytes]:
        """incoming[j] on rank r equals outgoing[r] sent by rank j."""
        return self._exchange("all_to_all", list(outgoing))

    def barrier(self) -> None:
        self._exchange("barrier", [b""] * self.size)

    def comm_bytes(self) -> CommStats:
        return CommStats(self._stats.sent, self._stats.received, dict(self._stats.per_op))

    def fail(self, reason: str) -> None:
        if self._fail_fn is not None:
            self._fail_fn(reason)

    def close(self) -> None:
        if self._close_fn is not None:
            self._close_fn()


def make_sim_worlds(size: int, timeout: float = 60.0) -> list[World]:
    hub = _SimHub(size, timeout=timeout)
    return [World(r, size, hub.exchange, fail_fn=hub.fail) for r in range(size)]


def run_ranks(worlds: list[World], fn, args_per_rank=None) -> list:
    """Run fn(world, *args) on one thread per rank; propagate the first error."""
    size = len(worlds)
    results = [None] * size
    errors: list[BaseException | None] = [None] * size

    def runner(r: int):
        try:
            args = args_per_rank[r] if args_per_rank is not None else ()
            results[r] = fn(worlds[r], *args)
        except BaseException as exc:  # noqa: BLE001 - forwarded to the caller
            errors[r] = exc
            worlds[r].fail(f"rank {r} failed: {exc}")

    threads = [threading.Thread(target=runner, args=(r,), daemon=True) for r in range(size)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    primary = [e for e in errors if e is not None and not isinstance(e, TransportError)]
    if primary:
        raise primary[0]
    transport = [e for e in errors if e is not None]
    if transport:
        raise transport[0]
    return results


# ---------------------------------------------------------------------------
# TCP transport
# ---------------------------------------------------------------------------


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise TransportError("peer closed connection")
        buf.extend(chunk)
    return bytes(buf)


def _read_frame(sock: socket.socket) -> tuple[int, bytes]:
    magic, seq, length = _HEADER.unpack(_recv_exact(sock, _HEADER.size))
    if magic != FRAME_MAGIC:
        raise TransportError("bad frame magic")
    return seq, _recv_exact(sock, length)


def _write_frame(sock: socket.socket, seq: int, payload: bytes) -> None:
    sock.sendall(_HEADER.pack(FRAME_MAGIC, seq, len(payload)) + payload)


class TcpTransport:
    """Full-mesh blocking transport; one background reader thread per peer."""

    def __init__(self, rank: int, peers: list[tuple[str, int]], timeout: float = 60.0):
        self.rank = rank
        self.size = len(peers)
        self.timeout = timeout
        self._socks: dict[int, socket.socket] = {}
        self._queues: dict[int, queue.Queue] = {j: queue.Queue() for j in range(self.size) if j != rank}
        self._closed = False

        host, port = peers[rank]
        server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        server.bind((host, port))
        server.listen(self.size)
        server.settimeout(timeout)
        self._server = server

        # lower ranks connect out, higher ranks are accepted
        for j in range(rank):
            self._socks[j] = self._connect(peers[j])
            self._socks[j].sendall(struct.pack("<I", rank))
        for _ in range(self.size - 1 - rank):
            conn, _ = server.accept()
            conn.settimeout(timeout)
            (peer_rank,) = struct.unpack("<I", _recv_exact(conn, 4))
            self._socks[peer_rank] = conn

        self._readers = []
        for j, sock in self._socks.items():
            t = threading.Thread(target=self._reader, args=(j, sock), daemon=True)
            t.start()
            self._readers.append(t)

    def _connect(self, addr: tuple[str, int]) -> socket.socket:
        deadline = time.monotonic() + self.timeout
        while True:
            try:
                sock = socket.create_connection(addr, timeout=self.timeout)
                sock.settimeout(self.timeout)
                return sock
            except OSError:
                if time.monotonic() >= deadline:
                    raise TransportError(f"cannot reach peer {addr}") from None
                time.sleep(0.05)

    def _reader(self, peer: int, sock: socket.socket) -> None:
        while True:
            try:
                self._queues[peer].put(_read_frame(sock))
            except (TransportError, OSError) as exc:
                if not self._closed:
                    self._queues[peer].put(exc)
                return

    def exchange(self, rank: int, op: str, seq: int, outgoing: list[bytes]) -> list[bytes]:
        del op  # frames carry only the sequence number
        for j in range(self.size):
            if j != rank:
                try:
                    _write_frame(self._socks[j], seq, outgoing[j])
                except OSError as exc:
                    raise TransportError(f"send to rank {j} failed: {exc}") from None
        incoming: list[bytes | None] = [None] * self.size
        incoming[rank] = outgoing[rank]
        for j in range(self.size):
            if j == rank:
                continue
            try:
                item = self._queues[j].get(timeout=self.timeout)
            except queue.Empty:
                raise TransportError(f"timeout waiting for rank {j}") from None
            if isinstance(item, Exception):
                raise TransportError(f"rank {j} connection failed: {item}") from None
            got_seq, payload = item
            if got_seq != seq:
                raise TransportError(f"sequence mismatch with rank {j}: {got_seq} != {seq}")
            incoming[j] = payload
        return incoming  # type: ignore[return-value]

    def close(self) -> None:
        self._closed = True
        for sock in self._socks.values():
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()
        self._server.close()


def make_tcp_world(rank: int, peers: list[tuple[str, int]], timeout: float = 60.0) -> World:
    transport = TcpTransport(rank, peers, timeout=timeout)
    return World(rank, len(peers), transport.exchange, close_fn=transport.close)


def parse_peers(spec: str) -> list[tuple[str, int]]:
    peers = []
    for item in spec.split(","):
        host, port = item.rsplit(":", 1)
        peers.append((host, int(port)))
    return peers

"""In-process worker harness: n threads exchanging tagged tensor messages.

Workers are threads, not OS processes; the transport mailboxes are the only
shared state and are internally synchronized. Tensors in payloads are passed
by reference and treated as immutable, except where a protocol explicitly
hands ownership of an accumulator downstream.

Byte accounting counts tensor payload bytes only (no framing, no metadata),
and only for src != dst: loopback delivery is free. The throttled transport
delays delivery in wall-clock time by latency + bytes/bandwidth per message,
serialized per directed link, so a blocked recv really waits.
"""

from __future__ import annotations

import os
import threading
import time
from collections import deque
from dataclasses import dataclass

import numpy as np

DEFAULT_TIMEOUT_SECONDS = 30.0
TIMEOUT_ENV_VAR = "LVX_TIMEOUT_SECS"

_RING_TAG_BASE = 1 << 40
_A2A_TAG_BASE = 1 << 41


class ClusterError(RuntimeError):
    pass


class CollectiveTimeout(ClusterError):
    pass


class ClusterAborted(ClusterError):
    pass


class WorkerFailed(ClusterError):
    def __init__(self, worker: int, cause: BaseException):
        super().__init__(f"worker {worker} failed: {cause!r}")
        self.worker = worker
        self.cause = cause


@dataclass(frozen=True)
class Instant:
    """Zero-delay transport; modeled time is 0."""


@dataclass(frozen=True)
class Throttled:
    """Per-message modeled time latency + bytes/bandwidth, applied in wall clock."""

    bandwidth: float            # bytes per second
    latency: float = 0.0        # seconds

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth}")
        if self.latency < 0:
            raise ValueError(f"latency must be nonnegative, got {self.latency}")


@dataclass(frozen=True)
class ClusterSpec:
    n: int
    transport: Instant | Throttled = Instant()

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"worker count must be >= 1, got {self.n}")


@dataclass
class LinkStats:
    bytes_sent: int = 0
    message_count: int = 0
    modeled_time_seconds: float = 0.0


class TransportStats:
    """Per ordered (src, dst) pair counters; loopback never appears."""

    def __init__(self):
        self._links: dict[tuple[int, int], LinkStats] = {}
        self._lock = threading.Lock()

    def record(self, src: int, dst: int, nbytes: int, modeled_seconds: float) -> None:
        with self._lock:
            link = self._links.setdefault((src, dst), LinkStats())
            link.bytes_sent += nbytes
            link.message_count += 1
            link.modeled_time_seconds += modeled_seconds

    def link(self, src: int, dst: int) -> LinkStats:
        return self._links.get((src, dst), LinkStats())

    def bytes_sent_by(self, src: int) -> int:
        return sum(s.bytes_sent for (a, _), s in self._links.items() if a == src)

    def total_bytes(self) -> int:
        return sum(s.bytes_sent for s in self._links.values())

    def total_modeled_seconds(self) -> float:
        return sum(s.modeled_time_seconds for s in self._links.values())

    def as_dict(self) -> dict:
        return {
            f"{src}->{dst}": {
                "bytes_sent": s.bytes_sent,
                "message_count": s.message_count,
                "modeled_time_seconds": s.modeled_time_seconds,
            }
            for (src, dst), s in sorted(self._links.items())
        }


@dataclass
class Message:
    src: int
    dst: int
    tag: int
    payload: list[np.ndarray]
    meta: dict | None = None
    modeled_seconds: float = 0.0


def payload_nbytes(payload) -> int:
    return sum(int(np.asarray(a).nbytes) for a in payload)


class _Mailbox:
    def __init__(self):
        self.cond = threading.Condition()
        self.queues: dict[tuple[int, int], deque] = {}

    def put(self, key, item) -> None:
        with self.cond:
            self.queues.setdefault(key, deque()).append(item)
            self.cond.notify_all()


class Cluster:
    def __init__(self, spec: ClusterSpec, timeout: float | None = None):
        self.spec = spec
        self.n = spec.n
        self.transport = spec.transport
        self.stats = TransportStats()
        self.timeout = _resolve_timeout(timeout)
        self._mailboxes = [_Mailbox() for _ in range(spec.n)]
        self._link_lock = threading.Lock()
        self._link_busy_until: dict[tuple[int, int], float] = {}
        self._fail_lock = threading.Lock()
        self.first_failure: tuple[int, BaseException] | None = None

    def fail(self, rank: int, exc: BaseException) -> None:
        with self._fail_lock:
            if self.first_failure is None:
                self.first_failure = (rank, exc)
        for box in self._mailboxes:
            with box.cond:
                box.cond.notify_all()

    @property
    def aborted(self) -> bool:
        return self.first_failure is not None

    def send(self, src: int, dst: int, tag: int, payload, meta=None) -> None:
        self._check_rank("send dst", dst)
        payload = list(payload)
        nbytes = payload_nbytes(payload)
        now = time.monotonic()
        if src == dst:
            arrival = now
            modeled = 0.0
        elif isinstance(self.transport, Throttled):
            per_msg = self.transport.latency + nbytes / self.transport.bandwidth
            with self._link_lock:
                depart = max(now, self._link_busy_until.get((src, dst), now))
                arrival = depart + per_msg
                self._link_busy_until[(src, dst)] = arrival
            modeled = per_msg
            self.stats.record(src, dst, nbytes, modeled)
        else:
            arrival = now
            modeled = 0.0
            self.stats.record(src, dst, nbytes, modeled)
        msg = Message(src=src, dst=dst, tag=tag, payload=payload, meta=meta,
                      modeled_seconds=modeled)
        self._mailboxes[dst].put((src, tag), (arrival, msg))

    def recv(self, rank: int, src: int, tag: int) -> Message:
        self._check_rank("recv src", src)
        box = self._mailboxes[rank]
        deadline = time.monotonic() + self.timeout
        key = (src, tag)
        with box.cond:
            while True:
                if self.aborted:
                    raise ClusterAborted(f"worker {rank}: cluster aborted while receiving "
                                         f"(src={src}, tag={tag})")
                queue = box.queues.get(key)
                now = time.monotonic()
                if queue:
                    arrival, msg = queue[0]
                    if arrival <= now:
                        queue.popleft()
                        return msg
                    wake = min(arrival, deadline)
                else:
                    wake = deadline
                if now >= deadline:
                    raise CollectiveTimeout(f"worker {rank}: recv(src={src}, tag={tag}) "
                                            f"timed out after {self.timeout}s")
                box.cond.wait(timeout=max(wake - now, 1e-4))

    def _check_rank(self, what: str, rank: int) -> None:
        if not (0 <= rank < self.n):
            raise ClusterError(f"{what} {rank} out of range for {self.n} workers")


class WorkerContext:
    """Per-worker handle: point-to-point send/recv plus ring and all-to-all
    collectives. send is non-blocking (buffered); recv blocks until the
    matching (src, tag) message arrives, FIFO per (src, tag). A worker may
    hold one outstanding send, one outstanding recv, and local compute at
    the same time."""

    def __init__(self, cluster: Cluster, rank: int):
        self.cluster = cluster
        self.rank = rank
        self._ring_gen = 0
        self._a2a_gen = 0
        self._next_tag = 0

    @property
    def n(self) -> int:
        return self.cluster.n

    @property
    def successor(self) -> int:
        return (self.rank + 1) % self.n

    @property
    def predecessor(self) -> int:
        return (self.rank - 1) % self.n

    def collective_tag(self, span: int = 1) -> int:
        """Reserve a block of tags; identical call sequences on every worker
        keep the bases in agreement."""
        base = self._next_tag
        self._next_tag += span
        return base

    def send(self, dst: int, tag: int, payload, meta=None) -> None:
        self.cluster.send(self.rank, dst, tag, payload, meta=meta)

    def recv(self, src: int, tag: int) -> Message:
        return self.cluster.recv(self.rank, src, tag)

    def ring_shift(self, payload, meta=None) -> Message:
        """Send to successor, receive the predecessor's payload. Collective;
        n = 1 is loopback. Composing it n times restores the original."""
        tag = _RING_TAG_BASE + self._ring_gen
        self._ring_gen += 1
        self.send(self.successor, tag, payload, meta=meta)
        return self.recv(self.predecessor, tag)

    def all_to_all(self, chunks: list) -> list:
        """Deliver chunk w to worker w; returns the n received payloads ordered
        by source id. The self-chunk never touches the transport."""
        if len(chunks) != self.n:
            raise ClusterError(f"worker {self.rank}: all_to_all expects {self.n} chunks, "
                               f"got {len(chunks)}")
        tag = _A2A_TAG_BASE + self._a2a_gen
        self._a2a_gen += 1
        for dst in range(self.n):
            if dst != self.rank:
                self.send(dst, tag, chunks[dst])
        out = []
        for src in range(self.n):
            if src == self.rank:
                out.append(list(chunks[self.rank]))
            else:
                out.append(self.recv(src, tag).payload)
        return out


@dataclass
class ClusterResult:
    results: list
    stats: TransportStats


def _resolve_timeout(timeout: float | None) -> float:
    if timeout is not None:
        return float(timeout)
    env = os.environ.get(TIMEOUT_ENV_VAR)
    if env:
        return float(env)
    return DEFAULT_TIMEOUT_SECONDS


def spawn_cluster(spec: ClusterSpec, worker_body, timeout: float | None = None) -> ClusterResult:
    """Run worker_body(ctx) on n workers, block until all finish, and return
    their results in rank order plus the transport counters. The first worker
    error aborts the cluster and is re-raised naming the worker."""
    cluster = Cluster(spec, timeout=timeout)
    results: list = [None] * spec.n

    def run(rank: int) -> None:
        ctx = WorkerContext(cluster, rank)
        try:
            results[rank] = worker_body(ctx)
        except BaseException as exc:   # surfaced via WorkerFailed below
            cluster.fail(rank, exc)

    if spec.n == 1:
        run(0)
    else:
        threads = [threading.Thread(target=run, args=(rank,), name=f"lvx-worker-{rank}")
                   for rank in range(spec.n)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    if cluster.first_failure is not None:
        rank, exc = cluster.first_failure
        raise WorkerFailed(rank, exc) from exc
    return ClusterResult(results=results, stats=cluster.stats)

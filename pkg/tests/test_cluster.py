import time

import numpy as np
import pytest

from lvxattn.cluster import (ClusterSpec, CollectiveTimeout, Throttled,
                             WorkerFailed, spawn_cluster)


def test_single_worker_no_communication():
    res = spawn_cluster(ClusterSpec(1), lambda ctx: 42)
    assert res.results == [42]
    assert res.stats.total_bytes() == 0


def test_ping_pong_counts_payload_bytes_only():
    data = np.arange(3, dtype=np.float32)

    def body(ctx):
        peer = 1 - ctx.rank
        ctx.send(peer, 7, [data], meta={"note": "metadata is free"})
        return ctx.recv(peer, 7).payload[0]

    res = spawn_cluster(ClusterSpec(2), body)
    assert np.array_equal(res.results[0], data)
    assert res.stats.link(0, 1).bytes_sent == 12
    assert res.stats.link(1, 0).bytes_sent == 12
    assert res.stats.link(0, 1).message_count == 1


def test_throttled_modeled_time_formula():
    payload = np.zeros(125_000, dtype=np.float64)   # 1 MB

    def body(ctx):
        ctx.ring_shift([payload])

    res = spawn_cluster(ClusterSpec(4, Throttled(bandwidth=1e9, latency=1e-3)), body)
    for i in range(4):
        link = res.stats.link(i, (i + 1) % 4)
        assert link.bytes_sent == 1_000_000
        assert link.modeled_time_seconds == pytest.approx(0.002, rel=1e-12)


def test_throttled_recv_not_earlier_than_modeled():
    # 50 ms transfer at the chosen bandwidth; allow 30% scheduler slack
    payload = np.zeros(125_000, dtype=np.float64)
    bandwidth = payload.nbytes / 0.05

    def body(ctx):
        start = time.monotonic()
        ctx.ring_shift([payload])
        return time.monotonic() - start

    res = spawn_cluster(ClusterSpec(2, Throttled(bandwidth=bandwidth)), body)
    for waited in res.results:
        assert waited >= 0.05 * 0.7
        assert waited < 1.0


def test_send_is_buffered_nonblocking():
    # three sends complete before the peer posts any recv
    def body(ctx):
        if ctx.rank == 0:
            start = time.monotonic()
            for i in range(3):
                ctx.send(1, 0, [np.array([i])])
            elapsed = time.monotonic() - start
            ctx.send(1, 1, [np.array([elapsed])])
            return None
        time.sleep(0.2)
        values = [int(ctx.recv(0, 0).payload[0][0]) for _ in range(3)]
        send_elapsed = float(ctx.recv(0, 1).payload[0][0])
        return values, send_elapsed

    res = spawn_cluster(ClusterSpec(2), body)
    values, send_elapsed = res.results[1]
    assert values == [0, 1, 2]
    assert send_elapsed < 0.1


def test_fifo_per_src_tag_stream():
    def body(ctx):
        if ctx.rank == 0:
            for i in range(3):
                ctx.send(1, 0, [np.array([10 + i])])
                ctx.send(1, 1, [np.array([20 + i])])
            return None
        a = [int(ctx.recv(0, 0).payload[0][0]) for _ in range(3)]
        b = [int(ctx.recv(0, 1).payload[0][0]) for _ in range(3)]
        return a, b

    res = spawn_cluster(ClusterSpec(2), body)
    assert res.results[1] == ([10, 11, 12], [20, 21, 22])


def test_ring_shift_rotation():
    def body(ctx):
        return int(ctx.ring_shift([np.array([ctx.rank])]).payload[0][0])

    res = spawn_cluster(ClusterSpec(3), body)
    assert res.results == [2, 0, 1]


def test_ring_shift_loopback():
    def body(ctx):
        return int(ctx.ring_shift([np.array([99])]).payload[0][0])

    res = spawn_cluster(ClusterSpec(1), body)
    assert res.results == [99]
    assert res.stats.total_bytes() == 0


def test_ring_shift_n_times_is_identity():
    n = 4

    def body(ctx):
        value = np.array([ctx.rank * 100])
        for _ in range(n):
            value = ctx.ring_shift([value]).payload[0]
        return int(value[0])

    res = spawn_cluster(ClusterSpec(n), body)
    assert res.results == [0, 100, 200, 300]


def test_all_to_all_exchange():
    def body(ctx):
        chunks = [[np.array([ctx.rank * 10 + dst])] for dst in range(2)]
        got = ctx.all_to_all(chunks)
        return [int(g[0][0]) for g in got]

    res = spawn_cluster(ClusterSpec(2), body)
    assert res.results[0] == [0, 10]    # A0, B0
    assert res.results[1] == [1, 11]    # A1, B1


def test_all_to_all_bytes_exclude_self_chunk():
    chunk = np.zeros(10, dtype=np.float64)

    def body(ctx):
        ctx.all_to_all([[chunk] for _ in range(3)])

    res = spawn_cluster(ClusterSpec(3), body)
    for i in range(3):
        sent = sum(res.stats.link(i, j).bytes_sent for j in range(3))
        assert sent == 2 * chunk.nbytes


def test_all_to_all_single_worker_identity():
    def body(ctx):
        return ctx.all_to_all([[np.array([5.0])]])

    res = spawn_cluster(ClusterSpec(1), body)
    assert res.results[0][0][0][0] == 5.0
    assert res.stats.total_bytes() == 0


def test_all_to_all_chunk_count_mismatch():
    def body(ctx):
        ctx.all_to_all([[np.zeros(1)]] * 3)

    with pytest.raises(WorkerFailed, match="expects 2 chunks"):
        spawn_cluster(ClusterSpec(2), body)


def test_worker_error_names_worker():
    def body(ctx):
        if ctx.rank == 2:
            raise ValueError("boom")
        ctx.recv((ctx.rank + 1) % 4, 0)

    with pytest.raises(WorkerFailed, match="worker 2") as exc_info:
        spawn_cluster(ClusterSpec(4), body, timeout=5.0)
    assert exc_info.value.worker == 2
    assert isinstance(exc_info.value.cause, ValueError)


def test_recv_from_nonexistent_worker():
    def body(ctx):
        ctx.recv(5, 0)

    with pytest.raises(WorkerFailed, match="out of range"):
        spawn_cluster(ClusterSpec(2), body)


def test_recv_timeout():
    def body(ctx):
        if ctx.rank == 0:
            ctx.recv(1, 3)   # never sent

    with pytest.raises(WorkerFailed, match="worker 0") as exc_info:
        spawn_cluster(ClusterSpec(2), body, timeout=0.3)
    assert isinstance(exc_info.value.cause, CollectiveTimeout)


def test_timeout_env_override(monkeypatch):
    monkeypatch.setenv("LVX_TIMEOUT_SECS", "0.2")

    def body(ctx):
        if ctx.rank == 0:
            ctx.recv(1, 3)

    start = time.monotonic()
    with pytest.raises(WorkerFailed):
        spawn_cluster(ClusterSpec(2), body)
    assert time.monotonic() - start < 5.0


def test_throttled_validation():
    with pytest.raises(ValueError, match="bandwidth"):
        Throttled(bandwidth=0.0)
    with pytest.raises(ValueError, match="latency"):
        Throttled(bandwidth=1.0, latency=-1.0)
    with pytest.raises(ValueError, match="worker count"):
        ClusterSpec(0)


def test_instant_results_independent_of_scheduling():
    def body(ctx):
        total = np.zeros(4)
        for _ in range(5):
            got = ctx.ring_shift([np.full(4, float(ctx.rank))])
            total = total + got.payload[0]
        return total.tobytes()

    baseline = spawn_cluster(ClusterSpec(3), body).results
    for _ in range(19):
        assert spawn_cluster(ClusterSpec(3), body).results == baseline

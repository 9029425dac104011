"""Closed-form communication volumes for the distributed attention protocols.

This module is the single place that pins down which tensor classes travel in
each protocol round, so the analytic cost model and the byte counters measured
by the transport cannot drift apart. All functions count tensor payload bytes
only, matching the transport's accounting, and return 0 for n = 1 because
loopback delivery is free.

Per-worker closed forms (b = element bytes, |q_j| / |kv_j| = rows of block j,
all indices mod n):

  query-rotation forward, worker i, round r = 0..n-1:
      (|q_{i-r+1}| * (h*d + h) + |q_{i-r}| * h*d) * b      (O, L of the block
      finished last round plus the Q block in flight)
    epilogue hop:  |q_{i+1}| * (h*d + h) * b               (O, L going home)

  query-rotation backward, round r = 0..n-1:
      |q_{i-r}| * (3*h*d + 2*h) * b                        (Q, dO, dQ + L, D)
    the round n-1 send doubles as the homecoming hop.

  kv-rotation forward, shift r = 0..n-2:
      |kv_{i-r}| * 2*h*d * b                               (K, V)

  kv-rotation backward, shift r = 0..n-2:
      |kv_{i-r}| * 4*h*d * b                               (K, V, dK, dV)
    epilogue hop:  |kv_{i+1}| * 2*h*d * b                  (dK, dV going home)

  head-parallel forward (h/n heads per worker):
      gather:   (n-1) * (|q_i| + 2*|kv_i|) * (h/n) * d * b
      scatter:  sum_{w != i} |q_w| * (h/n) * (d + 1) * b   (O rows plus L)

  head-parallel backward:
      gather:   (n-1) * |q_i| * (h/n) * d * b              (dO)
      scatter:  sum_{w != i} (|q_w| + 2*|kv_w|) * (h/n) * d * b
"""

from __future__ import annotations

# Elements per block row for each message class, as (hd_factor, h_factor):
# row elements = hd_factor * h * d + h_factor * h.
CLASS_ROW_ELEMS = {
    "Q": (1, 0), "O": (1, 0), "dO": (1, 0), "dQ": (1, 0),
    "K": (1, 0), "V": (1, 0), "dK": (1, 0), "dV": (1, 0),
    "L": (0, 1), "D": (0, 1),
}

# Tensor classes in one rotated message, per (strategy, pass).
ROUND_PAYLOAD = {
    ("lvx", "forward"): ("O", "L", "Q"),
    ("lvx", "backward"): ("Q", "dO", "L", "D", "dQ"),
    ("ring", "forward"): ("K", "V"),
    ("ring", "backward"): ("K", "V", "dK", "dV"),
}
EPILOGUE_PAYLOAD = {
    ("lvx", "forward"): ("O", "L"),
    ("lvx", "backward"): (),
    ("ring", "forward"): (),
    ("ring", "backward"): ("dK", "dV"),
}


def class_row_elems(cls: str, h: int, d: int) -> int:
    hd, hf = CLASS_ROW_ELEMS[cls]
    return hd * h * d + hf * h


def payload_elems(classes, rows: int, h: int, d: int) -> int:
    return rows * sum(class_row_elems(c, h, d) for c in classes)


def lvx_forward_bytes_by_worker(q_sizes, h: int, d: int, elem_bytes: int) -> list[int]:
    n = len(q_sizes)
    if n == 1:
        return [0]
    out = []
    for i in range(n):
        total = 0
        for r in range(n):
            j = (i - r) % n
            j_prev = (i - r + 1) % n
            total += payload_elems(("O", "L"), q_sizes[j_prev], h, d)
            total += payload_elems(("Q",), q_sizes[j], h, d)
        total += payload_elems(EPILOGUE_PAYLOAD[("lvx", "forward")], q_sizes[(i + 1) % n], h, d)
        out.append(total * elem_bytes)
    return out


def lvx_backward_bytes_by_worker(q_sizes, h: int, d: int, elem_bytes: int) -> list[int]:
    n = len(q_sizes)
    if n == 1:
        return [0]
    per_row = sum(class_row_elems(c, h, d) for c in ROUND_PAYLOAD[("lvx", "backward")])
    total = per_row * sum(q_sizes) * elem_bytes   # every block forwarded exactly once
    return [total] * n


def ring_forward_bytes_by_worker(kv_sizes, h: int, d: int, elem_bytes: int) -> list[int]:
    n = len(kv_sizes)
    if n == 1:
        return [0]
    per_row = sum(class_row_elems(c, h, d) for c in ROUND_PAYLOAD[("ring", "forward")])
    out = []
    for i in range(n):
        total = sum(kv_sizes[(i - r) % n] for r in range(n - 1)) * per_row
        out.append(total * elem_bytes)
    return out


def ring_backward_bytes_by_worker(kv_sizes, h: int, d: int, elem_bytes: int) -> list[int]:
    n = len(kv_sizes)
    if n == 1:
        return [0]
    per_row = sum(class_row_elems(c, h, d) for c in ROUND_PAYLOAD[("ring", "backward")])
    epi_row = sum(class_row_elems(c, h, d) for c in EPILOGUE_PAYLOAD[("ring", "backward")])
    out = []
    for i in range(n):
        total = sum(kv_sizes[(i - r) % n] for r in range(n - 1)) * per_row
        total += kv_sizes[(i + 1) % n] * epi_row
        out.append(total * elem_bytes)
    return out


def head_parallel_forward_bytes_by_worker(q_sizes, kv_sizes, h: int, d: int,
                                          elem_bytes: int) -> list[int]:
    n = len(q_sizes)
    if n == 1:
        return [0]
    if h % n != 0:
        raise ValueError(f"head count {h} not divisible by workers {n}")
    hpw = h // n
    out = []
    for i in range(n):
        gather = (n - 1) * (q_sizes[i] + 2 * kv_sizes[i]) * hpw * d
        scatter = sum(q_sizes[w] for w in range(n) if w != i) * hpw * (d + 1)
        out.append((gather + scatter) * elem_bytes)
    return out


def head_parallel_backward_bytes_by_worker(q_sizes, kv_sizes, h: int, d: int,
                                           elem_bytes: int) -> list[int]:
    n = len(q_sizes)
    if n == 1:
        return [0]
    if h % n != 0:
        raise ValueError(f"head count {h} not divisible by workers {n}")
    hpw = h // n
    out = []
    for i in range(n):
        gather = (n - 1) * q_sizes[i] * hpw * d
        scatter = sum(q_sizes[w] + 2 * kv_sizes[w] for w in range(n) if w != i) * hpw * d
        out.append((gather + scatter) * elem_bytes)
    return out


def round_model_elems(strategy: str, phase: str, s_q: float, s_kv: float,
                      n: int, h: int, d: int) -> float:
    """Steady-state per-round element count with even S/n shards, as the cost
    model uses it. Rotated row count is S_Q/n for query rotation and S_KV/n
    for kv rotation."""
    classes = ROUND_PAYLOAD[(strategy, phase)]
    rows = (s_q if strategy == "lvx" else s_kv) / n
    return rows * sum(class_row_elems(c, h, d) for c in classes)

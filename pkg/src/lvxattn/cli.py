"""Command-line front end.

Subcommands:

    run     execute one distributed attention problem (numeric, writing LVXT
            tensors + stats JSON) or an accounting-only volume report
    cost    closed-form round times, speedups, regime, and memory for a
            workload/hardware point (JSON)
    sweep   speedup/regime grid over S_Q x S_KV (CSV)
    mllm    toy cross-attention model: one forward+backward with a memory
            ledger, or a max-frames-under-budget query
    verify  run a named invariant suite; exit 0 iff everything passes

Exit codes: 0 success, 1 check/runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import analytics
from .cluster import ClusterError, ClusterSpec, Instant, Throttled
from .mllm import (ActivationPolicy, ModelParams, OpCounter, ToyMllmConfig,
                   TOY_CONFIG, max_frames_under_budget, measured_activation_bytes,
                   mllm_backward, mllm_forward)
from .strategies import StrategyKind, run_distributed
from .tensorio import (dtype_from_name, load_tensor, seeded_random_tensor,
                       store_tensor)
from .verify import SUITES, run_suite

# numeric mode refuses to materialize more elements than this; production-scale
# workloads go through --mode accounting-only
MAX_NUMERIC_ELEMENTS = 200_000_000

_ELEM_BYTES = {"f16": 2, "f32": 4, "f64": 8}


def _write_json(data: dict, path: str | None) -> None:
    text = json.dumps(data, indent=2)
    if path is None or path == "-":
        print(text)
    else:
        Path(path).write_text(text + "\n")


def _parse_grid(text: str, name: str) -> list[float]:
    """START:STOP[:COUNT][:log|lin]; COUNT defaults to 20, spacing to log."""
    parts = text.split(":")
    if len(parts) < 2:
        raise ValueError(f"{name}: expected START:STOP[:COUNT][:log|lin], got {text!r}")
    start, stop = float(parts[0]), float(parts[1])
    count, log = 20, True
    for extra in parts[2:]:
        if extra == "log":
            log = True
        elif extra == "lin":
            log = False
        else:
            count = int(extra)
    return analytics.grid_values(start, stop, count, log=log)


def _require_positive(args, names) -> None:
    for name in names:
        value = getattr(args, name, None)
        if value is not None and value <= 0:
            raise ValueError(f"--{name.replace('_', '-')} must be positive, got {value}")


def _workload_from_args(args, default_n: int | None = None) -> tuple[analytics.WorkloadSpec, int]:
    """Resolve preset/flags into a WorkloadSpec plus a d_model for the memory
    block (preset value, --d-model, or h*d)."""
    elem_bytes = args.elem_bytes
    if elem_bytes is None and getattr(args, "dtype", None):
        elem_bytes = _ELEM_BYTES[args.dtype]
    d_model_flag = getattr(args, "d_model", None)
    if args.preset:
        preset = analytics.get_preset(args.preset, n=args.n, elem_bytes=elem_bytes)
        w = preset.workload
        d_model = d_model_flag or preset.d_model
    else:
        missing = [f for f in ("sq", "skv", "h", "d") if getattr(args, f) is None]
        if missing:
            raise ValueError(f"missing flags without --preset: "
                             f"{', '.join('--' + m for m in missing)}")
        n = args.n if args.n is not None else (default_n or 1)
        w = analytics.WorkloadSpec(s_q=args.sq, s_kv=args.skv, h=args.h, d=args.d,
                                   n=n, elem_bytes=elem_bytes or 2)
        d_model = d_model_flag or (w.h * w.d)
    return w, d_model


def cmd_run(args) -> int:
    _require_positive(args, ["sq", "skv", "h", "d", "bandwidth"])
    if args.mode == "accounting-only":
        w, _ = _workload_from_args(args, default_n=args.n)
        report = analytics.volume_report(w)
        _write_json(report, args.stats)
        return 0

    if args.preset:
        w, _ = _workload_from_args(args, default_n=args.n)
        s_q, s_kv, h, d, n = w.s_q, w.s_kv, w.h, w.d, w.n
    else:
        for name in ("sq", "skv", "h", "d"):
            if getattr(args, name) is None:
                raise ValueError(f"--{name} is required in numeric mode")
        s_q, s_kv, h, d = args.sq, args.skv, args.h, args.d
        n = args.n or 1
    dtype = dtype_from_name(args.dtype or "f64")
    total_elems = h * d * (2 * s_q + 2 * s_kv)
    if total_elems > MAX_NUMERIC_ELEMENTS:
        raise ValueError(f"numeric mode would materialize {total_elems} elements; "
                         f"use --mode accounting-only for workloads of this size")

    if args.transport == "throttled":
        if args.bandwidth is None:
            raise ValueError("--bandwidth is required with --transport throttled")
        transport = Throttled(bandwidth=args.bandwidth, latency=args.latency)
    else:
        transport = Instant()

    def load_or_random(path, shape, stream):
        if path:
            t = load_tensor(path)
            if t.shape != shape:
                raise ValueError(f"{path}: shape {t.shape} != expected {shape}")
            return t.astype(dtype)
        return seeded_random_tensor(args.seed, shape, dtype, stream=stream)

    Q = load_or_random(args.input_q, (h, s_q, d), 0)
    K = load_or_random(args.input_k, (h, s_kv, d), 1)
    V = load_or_random(args.input_v, (h, s_kv, d), 2)
    dO = None
    if args.backward:
        dO = load_or_random(args.input_do, (h, s_q, d), 3)

    res = run_distributed(StrategyKind(args.strategy), Q, K, V, dO=dO,
                          spec=ClusterSpec(n, transport), scale=args.scale,
                          tile_rows=args.tile_rows)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    store_tensor(res.O, out_dir / "o.lvxt")
    store_tensor(res.L, out_dir / "l.lvxt")
    written = ["o.lvxt", "l.lvxt"]
    if res.grads is not None:
        store_tensor(res.grads.dQ, out_dir / "dq.lvxt")
        store_tensor(res.grads.dK, out_dir / "dk.lvxt")
        store_tensor(res.grads.dV, out_dir / "dv.lvxt")
        written += ["dq.lvxt", "dk.lvxt", "dv.lvxt"]

    stats = {
        "strategy": args.strategy,
        "n": n,
        "workload": {"s_q": s_q, "s_kv": s_kv, "h": h, "d": d,
                     "dtype": args.dtype or "f64", "seed": args.seed},
        "transport": ({"kind": "throttled", "bandwidth": args.bandwidth,
                       "latency": args.latency} if args.transport == "throttled"
                      else {"kind": "instant"}),
        "links": res.stats.as_dict(),
        "total_bytes": res.stats.total_bytes(),
        "per_worker_bytes_sent": [res.stats.bytes_sent_by(i) for i in range(n)],
        "total_modeled_comm_seconds": res.stats.total_modeled_seconds(),
        "rounds_forward": res.traces_forward[0].num_rounds,
        "traces": {
            "forward": [t.as_dict() for t in res.traces_forward],
            "backward": ([t.as_dict() for t in res.traces_backward]
                         if res.traces_backward else None),
        },
        "outputs": written,
    }
    _write_json(stats, str(out_dir / "stats.json") if args.stats is None else args.stats)
    return 0


def cmd_cost(args) -> int:
    _require_positive(args, ["gpu_flops", "net_bandwidth", "sq", "skv", "h", "d",
                             "d_model", "elem_bytes"])
    w, d_model = _workload_from_args(args)
    hw = analytics.HardwareSpec(gpu_flops=args.gpu_flops, net_bandwidth=args.net_bandwidth)
    times = analytics.round_times(w, hw)
    regime = analytics.classify_regime(w, hw)
    mem_bytes = args.elem_bytes or _ELEM_BYTES.get(args.dtype or "f32", 4)
    memory = analytics.memory_cross_attention(w.s_q, w.s_kv, d_model, mem_bytes)
    out = {
        "workload": {"s_q": w.s_q, "s_kv": w.s_kv, "h": w.h, "d": w.d,
                     "n": w.n, "elem_bytes": w.elem_bytes},
        "hardware": {"gpu_flops": hw.gpu_flops, "net_bandwidth": hw.net_bandwidth},
        "round_times": {name: t.as_dict() for name, t in times.items()},
        "speedup": analytics.speedup(w, hw),
        "speedup_closed_form": analytics.speedup_closed_form(w, hw),
        "regime": regime.as_dict(),
        "lvx_ring_forward_volume_ratio": analytics.lvx_ring_forward_volume_ratio(w),
        "memory": {
            "d_model": d_model,
            "elem_bytes": mem_bytes,
            "kv_bytes": memory["kv_bytes"],
            "kv_gib": memory["kv_bytes"] / 2**30,
            "kv_gb": memory["kv_bytes"] / 1e9,
            "flash_working_set_bytes": memory["flash_working_set_bytes"],
            "flash_working_set_gib": memory["flash_working_set_bytes"] / 2**30,
            "flash_working_set_gb": memory["flash_working_set_bytes"] / 1e9,
        },
    }
    _write_json(out, args.out)
    return 0


def cmd_sweep(args) -> int:
    _require_positive(args, ["gpu_flops", "net_bandwidth", "h", "d", "n", "elem_bytes"])
    s_q_values = _parse_grid(args.sq, "--sq")
    s_kv_values = _parse_grid(args.skv, "--skv")
    hw = analytics.HardwareSpec(gpu_flops=args.gpu_flops, net_bandwidth=args.net_bandwidth)
    rows = analytics.sweep(s_q_values, s_kv_values, hw, h=args.h, d=args.d,
                           n=args.n, elem_bytes=args.elem_bytes)
    text = analytics.format_sweep_csv(rows)
    if args.out is None or args.out == "-":
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text, encoding="utf-8", newline="\n")
    return 0


def _load_mllm_config(args) -> ToyMllmConfig:
    if args.config:
        raw = Path(args.config).read_text()
        try:
            data = json.loads(raw)
        except json.JSONDecodeError as e:
            raise ValueError(f"{args.config}: malformed JSON at line {e.lineno} "
                             f"column {e.colno}: {e.msg}")
        return ToyMllmConfig.from_dict(data)
    return TOY_CONFIG


def cmd_mllm(args) -> int:
    config = _load_mllm_config(args)
    policy = ActivationPolicy(args.policy)
    if args.budget is not None:
        if args.budget <= 0:
            raise ValueError(f"--budget must be positive, got {args.budget}")
        frames = max_frames_under_budget(config, policy, args.budget)
        out = {"policy": policy.value, "budget_bytes": args.budget,
               "max_frames": frames, "config": config.as_dict()}
        _write_json(out, args.out)
        print(f"{frames} frames", file=sys.stderr)
        return 0

    dtype = config.np_dtype
    params = ModelParams.init_random(config, seed=args.seed)
    x0 = seeded_random_tensor(args.seed, (config.s_q, config.d_embed), dtype, stream=101)
    y = seeded_random_tensor(args.seed, (config.s_kv, config.d_embed), dtype, stream=102)
    g_out = seeded_random_tensor(args.seed, (config.s_q, config.d_embed), dtype, stream=103)
    output, saved, ledger = mllm_forward(x0, y, params, config, policy)
    counter = OpCounter()
    grads = mllm_backward(g_out, saved, y, params, config, policy, counter=counter)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    store_tensor(output, out_dir / "output.lvxt")
    store_tensor(grads.d_x0, out_dir / "dx0.lvxt")
    store_tensor(grads.d_y, out_dir / "dy.lvxt")
    report = {
        "policy": policy.value,
        "config": config.as_dict(),
        "seed": args.seed,
        "ledger": ledger.as_dict(),
        "measured_activation_bytes": measured_activation_bytes(saved),
        "backward_projection_flops": counter.projection_flops,
        "outputs": ["output.lvxt", "dx0.lvxt", "dy.lvxt"],
    }
    _write_json(report, str(out_dir / "ledger.json") if args.out is None else args.out)
    return 0


def cmd_verify(args) -> int:
    report = run_suite(args.suite)
    for check in report["checks"]:
        status = "PASS" if check["passed"] else "FAIL"
        print(f"{status} {check['name']} (error={check['error']:.3e}, "
              f"tolerance={check['tolerance']:.3e})")
    print(f"{report['suite']}: {report['num_checks']} checks, "
          f"{'all passed' if report['passed'] else 'FAILURES'}")
    if args.json:
        _write_json(report, args.json)
    return 0 if report["passed"] else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lvxattn",
        description="Distributed cross-attention engine with exact byte accounting "
                    "and closed-form cost models.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one distributed attention problem")
    p_run.add_argument("--strategy", choices=[s.value for s in StrategyKind],
                       default="lvx")
    p_run.add_argument("--n", type=int, default=None, help="worker count")
    p_run.add_argument("--sq", type=int, default=None, help="query rows S_Q")
    p_run.add_argument("--skv", type=int, default=None, help="key/value rows S_KV")
    p_run.add_argument("--h", type=int, default=None, help="attention heads")
    p_run.add_argument("--d", type=int, default=None, help="per-head dimension")
    p_run.add_argument("--dtype", choices=["f32", "f64"], default=None)
    p_run.add_argument("--elem-bytes", type=int, default=None,
                       help="element size for accounting-only mode")
    p_run.add_argument("--seed", type=int, default=0)
    p_run.add_argument("--scale", type=float, default=None,
                       help="score scale (default 1/sqrt(d))")
    p_run.add_argument("--tile-rows", type=int, default=64)
    p_run.add_argument("--transport", choices=["instant", "throttled"],
                       default="instant")
    p_run.add_argument("--bandwidth", type=float, default=None, help="bytes/second")
    p_run.add_argument("--latency", type=float, default=0.0, help="seconds")
    p_run.add_argument("--mode", choices=["numeric", "accounting-only"],
                       default="numeric")
    p_run.add_argument("--preset", choices=sorted(analytics.PRESETS), default=None)
    p_run.add_argument("--backward", action="store_true",
                       help="also run the backward pass")
    p_run.add_argument("--input-q", default=None, help="LVXT file for Q")
    p_run.add_argument("--input-k", default=None, help="LVXT file for K")
    p_run.add_argument("--input-v", default=None, help="LVXT file for V")
    p_run.add_argument("--input-do", default=None, help="LVXT file for dO")
    p_run.add_argument("--out-dir", default=".", help="directory for LVXT outputs")
    p_run.add_argument("--stats", default=None,
                       help="stats JSON path (default OUT_DIR/stats.json; '-' for stdout)")
    p_run.set_defaults(func=cmd_run)

    p_cost = sub.add_parser("cost", help="closed-form cost model for one point")
    p_cost.add_argument("--preset", choices=sorted(analytics.PRESETS), default=None)
    p_cost.add_argument("--sq", type=int, default=None)
    p_cost.add_argument("--skv", type=int, default=None)
    p_cost.add_argument("--h", type=int, default=None)
    p_cost.add_argument("--d", type=int, default=None)
    p_cost.add_argument("--n", type=int, default=None)
    p_cost.add_argument("--dtype", choices=["f16", "f32", "f64"], default=None)
    p_cost.add_argument("--elem-bytes", type=int, default=None)
    p_cost.add_argument("--d-model", type=int, default=None,
                        help="model width for the memory block (default preset or h*d)")
    p_cost.add_argument("--gpu-flops", type=float, default=312e12)
    p_cost.add_argument("--net-bandwidth", type=float, default=25e9)
    p_cost.add_argument("--out", default=None, help="JSON path (default stdout)")
    p_cost.set_defaults(func=cmd_cost)

    p_sweep = sub.add_parser("sweep", help="speedup grid over S_Q x S_KV (CSV)")
    p_sweep.add_argument("--sq", required=True,
                         help="grid START:STOP[:COUNT][:log|lin], e.g. 1e3:1e6:20:log")
    p_sweep.add_argument("--skv", required=True)
    p_sweep.add_argument("--h", type=int, default=32)
    p_sweep.add_argument("--d", type=int, default=128)
    p_sweep.add_argument("--n", type=int, default=16)
    p_sweep.add_argument("--elem-bytes", type=int, default=2)
    p_sweep.add_argument("--gpu-flops", type=float, default=312e12)
    p_sweep.add_argument("--net-bandwidth", type=float, default=25e9)
    p_sweep.add_argument("--out", default=None, help="CSV path (default stdout)")
    p_sweep.set_defaults(func=cmd_sweep)

    p_mllm = sub.add_parser("mllm", help="toy cross-attention model runs")
    p_mllm.add_argument("--config", default=None,
                        help="JSON config path (default: shipped toy preset)")
    p_mllm.add_argument("--policy", choices=[p.value for p in ActivationPolicy],
                        required=True)
    p_mllm.add_argument("--budget", type=int, default=None,
                        help="memory budget in bytes: report max frames instead of running")
    p_mllm.add_argument("--seed", type=int, default=0)
    p_mllm.add_argument("--out-dir", default=".")
    p_mllm.add_argument("--out", default=None,
                        help="report JSON path (default OUT_DIR/ledger.json)")
    p_mllm.set_defaults(func=cmd_mllm)

    p_verify = sub.add_parser("verify", help="run a named invariant suite")
    p_verify.add_argument("suite", choices=sorted(SUITES))
    p_verify.add_argument("--json", default=None, help="write the JSON report here")
    p_verify.set_defaults(func=cmd_verify)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ClusterError as e:
        print(f"cluster error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end.

Exit status: 0 success, 1 analysis failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .attention import (
    chunked_attention,
    expand,
    load_fixture,
    naive_oracle,
    random_instance,
    random_mask,
    relative_error,
)
from .config import ConfigError, Hyperparameters, config_to_dict, load_config, to_jsonable
from .memory import CapacityError, max_global_batch, plan_memory, reserved_bytes
from .optimizer import (
    DEFAULT_R_MISS,
    fit_latency_models,
    load_profile_csv,
    optimize,
    predecide,
    sweep_k,
)
from .pipeline import emit_trace, iteration_time
from .roofline import emit_roofline, operator_points, point_row, roof_rows

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _load(args):
    if not args.config:
        raise UsageError("--config is required")
    if not Path(args.config).is_file():
        raise UsageError(f"config file not found: {args.config}")
    return load_config(args.config)


def _latency(args):
    if getattr(args, "profile", None):
        try:
            return fit_latency_models(load_profile_csv(args.profile))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"bad profile {args.profile}: {exc}") from exc
    return None


def _write(text: str, out: Optional[str]) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _rows_to_csv(rows: list[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def _resolve_hyper(args, hw, model, workload, hyper, latency) -> Hyperparameters:
    """Config hyperparameters (or a planned point) with flag overrides."""
    if hyper is None:
        hyper = optimize(hw, model, workload, latency).hyperparameters()
    changes = {}
    if getattr(args, "b", None) is not None:
        changes["b"] = args.b
    if getattr(args, "m", None) is not None:
        changes["m"] = args.m
    if getattr(args, "k", None) is not None:
        changes["k"] = args.k
    if changes:
        hyper = replace(hyper, **changes)
    return hyper


# --- subcommands ----------------------------------------------------------------

def cmd_roofline(args) -> int:
    hw, model, workload, hyper = _load(args)
    b = args.b or (hyper.b if hyper else max_global_batch(hw, model, workload))
    r_miss = hyper.expert_cache_miss_rate if hyper else DEFAULT_R_MISS
    s = workload.total_len
    points = operator_points(hw, model, b, s, r_miss)
    print(f"# {hw.name or 'hardware'}: b={b} s={s:g} r_miss={r_miss:g}")
    for p in points:
        print(f"{p.label}: bound={p.bound.value} util={p.utilization * 100:.1f}%")
    if args.format == "json":
        text = _dump_json({
            "b": b, "s": s, "r_miss": r_miss,
            "points": [point_row(p) for p in points],
            "roofs": roof_rows(hw),
        })
    else:
        text = emit_roofline(points, hw)
    if args.out:
        _write(text, args.out)
    return EXIT_OK


def _assumptions(hw, model, workload) -> dict:
    return {
        "units": "bytes; GB in messages means 1e9 bytes",
        "cpu_reserved_bytes": reserved_bytes(hw),
        "cpu_reserved_fraction": hw.cpu_reserved_fraction,
        "target_weight_bytes": model.weight_bytes,
        "kv_sizing_tokens_per_request": workload.total_len,
        "mean_prefix_len_for_estimates": workload.mean_prefix_len,
    }


def assumption_line(hw, model, workload) -> str:
    return (f"assumptions: GB = 1e9 bytes; DRAM {hw.cpu_mem / 1e9:.1f} GB with "
            f"{hw.cpu_reserved_fraction:.0%} reserved ({reserved_bytes(hw) / 1e9:.1f} GB); "
            f"weights {model.weight_bytes / 1e9:.1f} GB; KV sized for "
            f"{workload.total_len:g} tokens per request")


def cmd_plan(args) -> int:
    hw, model, workload, hyper = _load(args)
    latency = _latency(args)
    plan = optimize(hw, model, workload, latency, k_max=args.k_max)
    points = operator_points(hw, model, plan.b, workload.total_len, plan.r_miss)
    report = {
        "tool": "offload-planner",
        "version": __version__,
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "inputs": config_to_dict(hw, model, workload, hyper),
        "assumptions": _assumptions(hw, model, workload),
        "memory_plan": to_jsonable(plan.memory),
        "roofline_points": [point_row(p) for p in points],
        "plan": plan.to_dict(),
        "iteration_breakdown": plan.breakdown.to_dict(),
        "latency_model": latency.to_dict() if latency else None,
    }
    print(assumption_line(hw, model, workload), file=sys.stderr)
    print(f"plan: b={plan.b} m={plan.m} k={plan.k} "
          f"throughput={plan.expected_throughput:.1f} tok/s iteration={plan.expected_iteration:.3f}s",
          file=sys.stderr)
    _write(_dump_json(report), args.out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    hw, model, workload, hyper = _load(args)
    latency = _latency(args)
    hyper = _resolve_hyper(args, hw, model, workload, hyper, latency)
    mem = plan_memory(hw, model, workload, hyper.b, hyper.mem_policy)
    bd = iteration_time(hw, model, workload, hyper, mem, latency, prefix_len=args.prefix_len)
    print(f"# b={hyper.b} m={hyper.m} k={hyper.k}")
    print(bd.format_table())
    if args.trace:
        emit_trace(bd, args.trace)
    if args.out:
        if args.format == "json":
            text = _dump_json({"hyperparameters": to_jsonable(hyper), "breakdown": bd.to_dict()})
        else:
            text = _rows_to_csv([{"component": k, "seconds": v} for k, v in bd.rows()], ("component", "seconds"))
        _write(text, args.out)
    return EXIT_OK


def _parse_k_range(spec: str) -> list[int]:
    spec = spec.strip()
    for sep in ("..", "-", ":"):
        if sep in spec:
            lo, hi = spec.split(sep, 1)
            ks = list(range(int(lo), int(hi) + 1))
            break
    else:
        ks = [int(v) for v in spec.split(",") if v.strip()]
    if not ks:
        raise UsageError(f"empty k range {spec!r}")
    return ks


def cmd_sweep(args) -> int:
    hw, model, workload, hyper = _load(args)
    latency = _latency(args)
    try:
        ks = _parse_k_range(args.k)
    except ValueError as exc:
        raise UsageError(f"bad --k {args.k!r}: {exc}") from exc
    if max(ks) > workload.acceptance.k_max or min(ks) < 0:
        raise UsageError(f"k range exceeds acceptance curve domain [0, {workload.acceptance.k_max}]")
    if hyper is None:
        b, policy, strategy = predecide(hw, model, workload)
        hyper = Hyperparameters(b, 1, 0, DEFAULT_R_MISS, policy, strategy)
    rows = sweep_k(hw, model, workload, ks, latency, hyper, m=args.m, prefix_len=args.prefix_len)
    cols = ("k", "iteration_s", "committed_tokens", "throughput_tokens_per_s")
    text = _dump_json(rows) if args.format == "json" else _rows_to_csv(rows, cols)
    _write(text, args.out)
    return EXIT_OK


def cmd_verify_attention(args) -> int:
    cases = []
    if args.fixture:
        try:
            cases = load_fixture(args.fixture)
        except (OSError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USAGE
    elif args.random or args.seed is not None:
        seed, count = args.random or (args.seed, args.count)
        root = np.random.SeedSequence(seed)
        for child in root.spawn(count):
            rng = np.random.Generator(np.random.PCG64(child))
            n = int(rng.integers(1, 9))
            p = int(rng.integers(0, 65))
            d = int(rng.integers(1, 33))
            cases.append((random_instance(rng, n, p, d), random_mask(rng, n)))
    else:
        raise UsageError("give --fixture PATH or --random SEED COUNT")

    failures = 0
    worst = 0.0
    for i, (inst, mask) in enumerate(cases):
        try:
            err = relative_error(chunked_attention(inst, mask), naive_oracle(inst, expand(mask, inst.prefix_len)))
        except ValueError as exc:
            print(f"case {i}: error {exc}")
            failures += 1
            continue
        worst = max(worst, err)
        if not err <= args.tol:
            failures += 1
            print(f"case {i}: FAIL rel_err={err:.3e} (n={inst.n} prefix={inst.prefix_len} d={inst.d})")
    passed = len(cases) - failures
    print(f"{passed}/{len(cases)} pass, max relative error {worst:.3e}")
    return EXIT_OK if failures == 0 else EXIT_FAIL


# --- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="offload-planner", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, fmt=True):
        p.add_argument("--config", required=True, help="JSON config (hardware/model/workload[/hyperparameters])")
        p.add_argument("--out", help="output file (default: stdout)")
        if fmt:
            p.add_argument("--format", choices=("csv", "json"), default="csv")

    p = sub.add_parser("roofline", help="classify operator bottlenecks and emit roofline data")
    common(p)
    p.add_argument("--b", type=int, help="batch size (default: config or DRAM maximum)")
    p.set_defaults(func=cmd_roofline)

    p = sub.add_parser("plan", help="optimize hyperparameters and write a JSON plan report")
    common(p, fmt=False)
    p.add_argument("--profile", help="profile CSV (kind, driving_value, seconds)")
    p.add_argument("--k-max", type=int, default=None)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", help="simulate one decode iteration")
    common(p)
    p.add_argument("--profile")
    p.add_argument("--b", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--prefix-len", type=float, default=None)
    p.add_argument("--trace", help="write the timeline as trace-event JSON")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="throughput as a function of draft length")
    common(p)
    p.add_argument("--profile")
    p.add_argument("--k", default="1..10", help="k range: '1..10', '1-10' or '1,2,4'")
    p.add_argument("--m", type=int)
    p.add_argument("--prefix-len", type=float, default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify-attention", help="check chunked attention against the full-mask oracle")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--fixture", help="JSON fixture with one instance or a list")
    src.add_argument("--random", nargs=2, type=int, metavar=("SEED", "COUNT"))
    src.add_argument("--seed", type=int, help="same as --random SEED --count")
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--tol", type=float, default=1e-6)
    p.set_defaults(func=cmd_verify_attention)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CapacityError as exc:
        print(f"capacity error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())

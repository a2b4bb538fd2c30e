"""``mixprec`` command line: pack, unpack, verify, gemm, attn, sim, analyze.

Exit codes: 0 success, 2 usage or bad input, 3 layout verification failure,
4 oracle mismatch. Every JSON report carries ``schema_version``.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import memmodel
from .attention import AttnProblem, attention_mixed, reference_attention, RearrangeParams
from .core import Tensor, TensorFormatError, tensor_io_read, tensor_io_write
from .gemm import GemmProblem, dequantized_weights, mixed_gemm, reference_gemm
from .packer import (ARCH_ENV, ARCH_PROFILES, PackedWeights, PackError, get_arch,
                     pack_weights, pad_weights, verify_layout)
from .quant import KvCache, QuantError, QuantSpec, load_kv_cache, quantize, quantize_kv
from .sched import (SCHEMA_VERSION, UnitLatencies, attention_bubbles, attention_schedule,
                    compare_overlap, gemm_schedule, in_flight_prefetches, simulate)

EXIT_OK, EXIT_USAGE, EXIT_LAYOUT, EXIT_MISMATCH = 0, 2, 3, 4


class UsageError(Exception):
    pass


class CheckFailed(Exception):
    pass


def _dump(obj: dict, path=None) -> str:
    text = json.dumps({"schema_version": SCHEMA_VERSION, **obj}, indent=2, sort_keys=True)
    if path:
        Path(path).write_text(text + "\n")
    return text


def _arch(name):
    try:
        return get_arch(name)
    except PackError as exc:
        raise UsageError(str(exc)) from None


def _latencies(args) -> UnitLatencies:
    try:
        lat = UnitLatencies.from_json(args.latencies) if args.latencies else UnitLatencies()
        if args.depth is not None:
            lat = lat.replace(depth=args.depth)
        return lat
    except (OSError, ValueError, TypeError) as exc:
        raise UsageError(f"bad latency config: {exc}") from None


def _first_diff(a: np.ndarray, b: np.ndarray):
    diff = np.argwhere(a.view(np.uint16) != b.view(np.uint16))
    return None if diff.size == 0 else tuple(int(i) for i in diff[0])


def _check(out: np.ndarray, ref: np.ndarray, what: str) -> dict:
    if out.shape != ref.shape:
        raise CheckFailed(f"{what}: shape {out.shape} != oracle {ref.shape}")
    idx = _first_diff(out, ref)
    if idx is not None:
        raise CheckFailed(f"{what}: first mismatch at index {list(idx)}: "
                          f"{float(out[idx])!r} != oracle {float(ref[idx])!r}")
    return {"check": "pass"}


# -- commands -----------------------------------------------------------------


def cmd_pack(args) -> int:
    arch = _arch(args.arch)
    t = tensor_io_read(args.input, args.meta)
    if len(t.shape) != 2 or t.dtype not in ("f16", "f32"):
        raise UsageError(f"expected a 2-D f16/f32 weight tensor, got {t.dtype} {t.shape}")
    q = quantize(t.data, args.bits, args.group, args.zero_point, axis=0)
    p = pack_weights(pad_weights(q, arch), arch)
    p.save(args.out)
    rep = verify_layout(p, source=q)
    print(_dump({"command": "pack", "out": str(args.out), "verify": rep.to_dict()}))
    return EXIT_OK if rep.ok else EXIT_LAYOUT


def cmd_unpack(args) -> int:
    p = PackedWeights.load(args.input)
    t = dequantized_weights(p)
    tensor_io_write(t, args.out)
    print(_dump({"command": "unpack", "out": str(args.out), "shape": list(t.shape)}))
    return EXIT_OK


def cmd_verify(args) -> int:
    p = PackedWeights.load(args.input)
    rep = verify_layout(p, max_units=None if args.all else 64)
    print(_dump({"command": "verify", "verify": rep.to_dict(), "ok": rep.ok}))
    return EXIT_OK if rep.ok else EXIT_LAYOUT


def _random_gemm(args, arch):
    for name in ("m", "n", "k"):
        if getattr(args, name) < 1:
            raise UsageError(f"--{name} must be positive")
    rng = np.random.default_rng(args.seed)
    a = rng.standard_normal((args.m, args.k)).astype(np.float16)
    w = rng.standard_normal((args.k, args.n)).astype(np.float16)
    q = quantize(w, args.bits, args.group, args.zero_point, axis=0)
    return a, pack_weights(pad_weights(q, arch), arch)


def cmd_gemm(args) -> int:
    arch = _arch(args.arch)
    if args.a and args.w:
        a = tensor_io_read(args.a)
        w = PackedWeights.load(args.w)
    elif args.a or args.w:
        raise UsageError("--a and --w must be given together")
    else:
        a, w = _random_gemm(args, arch)
    out, sched = mixed_gemm(GemmProblem(a, w), arch, depth=args.depth or 3)
    report = {"command": "gemm", "shape": [out.shape[0], w.cols, w.rows],
              "mma_stages": sched.count("mma"), "stage_count": len(sched.stages)}
    if args.out:
        tensor_io_write(out, args.out)
    if args.schedule:
        Path(args.schedule).write_text(json.dumps(sched.to_dict(), sort_keys=True) + "\n")
    if args.check:
        w_ref = tensor_io_read(args.weights_ref) if args.weights_ref else dequantized_weights(w)
        ref = reference_gemm(a.data if isinstance(a, Tensor) else a, w_ref)
        report.update(_check(out.data, ref.data, "gemm"))
    print(_dump(report))
    return EXIT_OK


def _random_attn(args):
    if args.tokens < 1 or args.head_dim < 1 or args.heads < 1:
        raise UsageError("--tokens, --head-dim and --heads must be positive")
    rng = np.random.default_rng(args.seed)
    spec = QuantSpec(weight_bits=16, kv_bits=args.kv_bits, group_size=args.group,
                     zero_point=args.zero_point)
    cache = KvCache.empty(args.heads, args.head_dim, args.tokens, spec)
    shape = (args.heads, args.tokens, args.head_dim)
    cache = quantize_kv(rng.standard_normal(shape), rng.standard_normal(shape), cache)
    q = rng.standard_normal((args.heads, args.head_dim)).astype(np.float16)
    return q, cache


def cmd_attn(args) -> int:
    if args.q and args.kv:
        q = tensor_io_read(args.q).data
        cache = load_kv_cache(args.kv)
    elif args.q or args.kv:
        raise UsageError("--q and --kv must be given together")
    else:
        q, cache = _random_attn(args)
    out, sched = attention_mixed(AttnProblem(q, cache), depth=args.depth or 3)
    report = {"command": "attn", "heads": cache.heads, "head_dim": cache.head_dim,
              "tokens": cache.tokens, "kv_bits": cache.kv_bits,
              "macro_tiles": sched.meta["macro_tiles"], "stage_count": len(sched.stages)}
    if args.out:
        tensor_io_write(out, args.out)
    if args.schedule:
        Path(args.schedule).write_text(json.dumps(sched.to_dict(), sort_keys=True) + "\n")
    if args.check:
        ref = reference_attention(q, cache.dequantized("k"), cache.dequantized("v"))
        report.update(_check(out.data, ref, "attn"))
    print(_dump(report))
    return EXIT_OK


def cmd_sim(args) -> int:
    if args.depth is not None and args.depth < 1:
        raise UsageError("--depth must be >= 1")
    lat = _latencies(args)
    if args.workload == "gemm":
        if min(args.m, args.n, args.k) < 1:
            raise UsageError("--m, --n and --k must be positive")
        k_tiles = -(-args.k // 16)
        cmp = compare_overlap(k_tiles, lat)
        sched = gemm_schedule(k_tiles, lat.depth)
        rep = cmp["pipelined"]
        out = {"workload": "gemm", "m": args.m, "n": args.n, "k": args.k, "k_tiles": k_tiles,
               "latencies": lat.to_dict(), "pipelined": rep.to_dict(),
               "serial": cmp["serial"].to_dict(), "baseline": cmp["baseline"].to_dict(),
               "instr_ratio": cmp["instr_ratio"], "cycle_ratio": cmp["cycle_ratio"],
               "max_in_flight_prefetches": in_flight_prefetches(sched, rep),
               "bubble_fraction": attention_bubbles(sched, lat, rep)}
    else:
        if args.tokens < 1 or args.head_dim < 1:
            raise UsageError("--tokens and --head-dim must be positive")
        try:
            params = RearrangeParams(args.head_dim, args.kv_bits)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        sched = attention_schedule(args.tokens, lat.depth)
        rep = simulate(sched, lat)
        out = {"workload": "attn", "tokens": args.tokens, "head_dim": args.head_dim,
               "kv_bits": args.kv_bits, "k_slices": params.k_slices,
               "macro_tiles": sched.meta["macro_tiles"],
               "micro_tiles_per_phase": sched.meta["micro_tiles_per_phase"],
               "latencies": lat.to_dict(), "pipelined": rep.to_dict(),
               "max_in_flight_prefetches": in_flight_prefetches(sched, rep),
               "bubble_fraction": attention_bubbles(sched, lat, rep)}
    text = _dump(out, args.report)
    print(text)
    return EXIT_OK


SCENARIOS = {
    "aligned": lambda: memmodel.contiguous_warp_trace(0),
    "misaligned": lambda: memmodel.contiguous_warp_trace(64),
    "column-walk": lambda: memmodel.strided_warp_trace(128),
    "column-tile": lambda: memmodel.column_tile_row_reads(128),
    "column-tile-swizzled": lambda: memmodel.column_tile_row_reads(128, swizzle=True),
}


def cmd_analyze(args) -> int:
    if args.trace:
        try:
            trace = memmodel.AccessTrace.from_dict(json.loads(Path(args.trace).read_text()))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise UsageError(f"bad trace file: {exc}") from None
    else:
        trace = SCENARIOS[args.scenario]()
    print(_dump({"command": "analyze", **memmodel.analyze(trace)}, args.report))
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def _bits(choices):
    def parse(s):
        try:
            v = int(s)
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid bit width {s!r}") from None
        if v not in choices:
            raise argparse.ArgumentTypeError(f"bit width must be one of {sorted(choices)}")
        return v
    return parse


def _positive(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mixprec", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    arch_help = f"arch profile ({', '.join(ARCH_PROFILES)}); default ${ARCH_ENV} or sm80"

    def quant_flags(p, bits=(4, 8, 16), default_bits=4):
        p.add_argument("--bits", type=_bits(bits), default=default_bits)
        p.add_argument("--group", type=_positive, default=128)
        p.add_argument("--zero-point", action=argparse.BooleanOptionalAction, default=True)

    p = sub.add_parser("pack", help="quantize and pack a (K, N) weight tensor")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--meta", help="sidecar JSON (default: <in>.json)")
    quant_flags(p)
    p.add_argument("--arch", help=arch_help)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pack)

    p = sub.add_parser("unpack", help="write the dequantized f16 weights of a packed file")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_unpack)

    p = sub.add_parser("verify", help="replay a packed file's loads through the memory model")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--all", action="store_true", help="check every store unit")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("gemm", help="run the online GEMM (random problem if no inputs)")
    p.add_argument("--a", help="activation tensor (M, K) f16")
    p.add_argument("--w", help="packed weights")
    p.add_argument("--weights-ref", help="f16 weights for the oracle (default: unpack --w)")
    p.add_argument("--m", type=int, default=16)
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--k", type=int, default=256)
    quant_flags(p)
    p.add_argument("--arch", help=arch_help)
    p.add_argument("--depth", type=_positive)
    p.add_argument("--out")
    p.add_argument("--schedule")
    p.add_argument("--check", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gemm)

    p = sub.add_parser("attn", help="run decode attention (random problem if no inputs)")
    p.add_argument("--q", help="query tensor (heads, head_dim) f16")
    p.add_argument("--kv", help="KV cache directory")
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--tokens", type=int, default=130)
    p.add_argument("--head-dim", type=int, default=128)
    p.add_argument("--kv-bits", type=_bits((4, 8, 16)), default=8)
    p.add_argument("--group", type=_positive, default=128)
    p.add_argument("--zero-point", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--depth", type=_positive)
    p.add_argument("--out")
    p.add_argument("--schedule")
    p.add_argument("--check", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_attn)

    p = sub.add_parser("sim", help="cycle-model a GEMM or attention pipeline")
    p.add_argument("--workload", choices=("gemm", "attn"), required=True)
    p.add_argument("--m", type=int, default=16)
    p.add_argument("--n", type=int, default=4096)
    p.add_argument("--k", type=int, default=4096)
    p.add_argument("--tokens", type=int, default=1024)
    p.add_argument("--head-dim", type=int, default=128)
    p.add_argument("--kv-bits", type=_bits((4, 8, 16)), default=8)
    p.add_argument("--depth", type=int)
    p.add_argument("--latencies", help="latency config JSON")
    p.add_argument("--report")
    p.set_defaults(func=cmd_sim)

    p = sub.add_parser("analyze", help="coalescing and bank-conflict analysis of a warp trace")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--trace", help="AccessTrace JSON")
    g.add_argument("--scenario", choices=sorted(SCENARIOS))
    p.add_argument("--report")
    p.set_defaults(func=cmd_analyze)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except CheckFailed as exc:
        print(f"mixprec: check failed: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (UsageError, PackError, QuantError, TensorFormatError, ValueError, OSError) as exc:
        print(f"mixprec: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

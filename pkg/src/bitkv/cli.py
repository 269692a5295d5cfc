"""Command line entry point: ``bitkv {run,verify,dump,load}``."""

from __future__ import annotations

import argparse
import json
import sys

from .kv_cache import SnapshotError
from .simulator import RunConfig, Simulation, write_report
from .tensor_core import ModelShape, PruneMethod, SparsityConfig
from .verification import verify


def _pairs(text: str, keys: tuple[str, ...]) -> dict[str, str]:
    out = {}
    for part in text.split(","):
        k, sep, v = part.partition("=")
        if not sep or k.strip() not in keys:
            raise argparse.ArgumentTypeError(f"expected {','.join(k + '=...' for k in keys)}, got {text!r}")
        out[k.strip()] = v.strip()
    return out


def parse_eviction(text: str) -> tuple[float, float]:
    d = _pairs(text, ("recent", "hh"))
    try:
        return float(d.get("recent", 0.1)), float(d.get("hh", 0.1))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def parse_quant(text: str) -> int:
    d = _pairs(text, ("bits",))
    try:
        return int(d["bits"])
    except (KeyError, ValueError) as exc:
        raise argparse.ArgumentTypeError(f"--quant needs bits=2 or bits=4, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seq-len", type=int, default=2048)
    common.add_argument("--gen-len", type=int, default=256)
    common.add_argument("--head-dim", type=int, default=128)
    common.add_argument("--q-heads", type=int, default=1)
    common.add_argument("--kv-heads", type=int, default=1)
    common.add_argument("--key-sparsity", type=float, default=0.7)
    common.add_argument("--value-sparsity", type=float, default=0.7)
    methods = [m.value for m in PruneMethod]
    common.add_argument("--key-method", choices=methods, default=PruneMethod.TOKEN_MAGNITUDE.value)
    common.add_argument("--value-method", choices=methods, default=PruneMethod.TOKEN_MAGNITUDE.value)
    common.add_argument("--window", type=int, default=32)
    common.add_argument("--eviction", type=parse_eviction, metavar="recent=F,hh=F")
    common.add_argument("--quant", type=parse_quant, metavar="bits=B")
    common.add_argument("--outlier-channels", type=int, default=0)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--unscaled", action="store_true", help="omit the 1/sqrt(d) score scale")
    common.add_argument("--report", metavar="PATH", help="write the JSON report here (default: stdout)")
    common.add_argument("--snapshot", metavar="PATH", help="snapshot directory")

    p = argparse.ArgumentParser(prog="bitkv", description="Sparse bitmap KV cache simulator and verifier.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="simulate prefill + decode and report")
    sub.add_parser("verify", parents=[common], help="run the property suite")
    sub.add_parser("dump", parents=[common], help="simulate, then write a cache snapshot")
    sub.add_parser("load", parents=[common], help="resume a snapshot for --gen-len more steps")
    return p


def config_from_args(args) -> RunConfig:
    return RunConfig(
        seq_len=args.seq_len,
        gen_len=args.gen_len,
        shape=ModelShape(args.head_dim, args.q_heads, args.kv_heads),
        sparsity=SparsityConfig(
            args.key_sparsity, args.value_sparsity, args.key_method, args.value_method, args.window
        ),
        eviction=args.eviction,
        quant_bits=args.quant,
        outlier_channels=args.outlier_channels,
        seed=args.seed,
        scaled=not args.unscaled,
        report_path=args.report,
    )


def _emit(report: dict, path: str | None) -> None:
    if path:
        write_report(report, path)
    else:
        json.dump(report, sys.stdout, indent=1, sort_keys=True)
        sys.stdout.write("\n")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "load":
            if not args.snapshot:
                raise ValueError("load requires --snapshot PATH")
            sim = Simulation.load(args.snapshot, gen_len=args.gen_len)
            _emit(sim.run(), args.report)
            return 0
        cfg = config_from_args(args)
        if args.command == "run":
            sim = Simulation(cfg)
            report = sim.run()
            _emit(report, args.report)
            if args.snapshot:
                sim.dump(args.snapshot)
            return 0
        if args.command == "dump":
            if not args.snapshot:
                raise ValueError("dump requires --snapshot PATH")
            sim = Simulation(cfg)
            report = sim.run()
            sim.dump(args.snapshot)
            if args.report:
                write_report(report, args.report)
            print(f"snapshot written to {args.snapshot} ({sim.cache.total_tokens} tokens)")
            return 0
        return 0 if verify(cfg, print) else 1
    except SnapshotError as exc:
        print(f"bitkv: snapshot error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"bitkv: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point.

Exit codes: 0 success, 1 validation error, 2 numerical failure, 3 I/O error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .data import HsicError, load_cube, save_cube, stratified_split, synth_dataset
from .routes import Route, write_index_trace
from .train import ModelCheckpoint, TrainConfig, evaluate, train

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


def _shape(text: str) -> tuple[int, int, int]:
    try:
        H, W, V = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxWxV, got {text!r}") from None
    return H, W, V


def cmd_train(args) -> int:
    config = TrainConfig.from_json(args.config)
    ckpt = train(config)
    ckpt.save(args.out)
    print(f"saved {args.out} (final loss {ckpt.metadata['final_loss']:.6f})")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = ModelCheckpoint.load(args.ckpt)
    cube = load_cube(args.data)
    split = None
    if args.split_seed is not None or args.fraction is not None:
        seed = ckpt.config.seed if args.split_seed is None else args.split_seed
        fraction = ckpt.config.train_fraction if args.fraction is None else args.fraction
        split = stratified_split(cube.labels[cube.labels > 0].astype(np.int64), fraction, seed)
    print(evaluate(ckpt, cube, split).summary())
    return EXIT_OK


def cmd_routes(args) -> int:
    from .harness import ablation_csv, ablation_table, route_ablation

    config = TrainConfig.from_json(args.config)
    rows = route_ablation(config, seeds=args.seeds)
    Path(args.out).write_text(ablation_csv(rows))
    print(ablation_table(rows))
    return EXIT_OK if not any(r.error for r in rows) else EXIT_NUMERIC


def cmd_map(args) -> int:
    from .harness import predict_map

    ckpt = ModelCheckpoint.load(args.ckpt)
    predict_map(ckpt, load_cube(args.data), args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .harness import bench_scan

    print(bench_scan(state=args.state, dim=args.dim).text())
    return EXIT_OK


def cmd_synth(args) -> int:
    H, W, V = args.shape
    save_cube(synth_dataset(args.classes, H, W, V, args.sigma, args.seed), args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_scan_check(args) -> int:
    from .checks import run_all

    results = run_all(quick=args.quick)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_VALIDATION


def cmd_trace(args) -> int:
    for path in write_index_trace(args.out, args.patch, args.bands, args.route):
        print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hsimamba", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train a model from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on an HSIC cube")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split-seed", type=int)
    s.add_argument("--fraction", type=float)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("routes", help="route ablation (one model per route and seed)")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    s.set_defaults(fn=cmd_routes)

    s = sub.add_parser("map", help="classification map as a binary PPM")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_map)

    s = sub.add_parser("bench-scan", help="time the selective scan against sequence length")
    s.add_argument("--state", type=int, default=16)
    s.add_argument("--dim", type=int, default=32)
    s.set_defaults(fn=cmd_bench)

    s = sub.add_parser("synth", help="write a synthetic HSIC cube")
    s.add_argument("--classes", type=int, required=True)
    s.add_argument("--shape", type=_shape, required=True, help="HxWxV")
    s.add_argument("--sigma", type=float, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("scan-check", help="oracle equivalence and gradient checks")
    s.add_argument("--quick", action="store_true", help="2 gradient seeds instead of 5")
    s.set_defaults(fn=cmd_scan_check)

    s = sub.add_parser("route-trace", help="dump route index maps as CSV")
    s.add_argument("--route", type=Route.parse, default=Route.PARALLEL_SPECTRAL_SPATIAL)
    s.add_argument("--patch", type=int, required=True, help="token spatial size P")
    s.add_argument("--bands", type=int, required=True, help="token spectral size K")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_trace)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except FloatingPointError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, HsicError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, TypeError) as e:
        print(f"validation error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())

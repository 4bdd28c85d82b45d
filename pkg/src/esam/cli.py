"""Command-line entry point: ``esam {train,evaluate,diagnose,synth}``."""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .errors import EsamError


def _train(args) -> None:
    from .experiment import load_config, run_train

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["output_dir"] = args.out
    run_train(cfg)


def _evaluate(args) -> None:
    from .experiment import run_evaluate

    if args.k < 1:
        raise EsamError("--k must be >= 1")
    run_evaluate(args.checkpoint, split=args.split, cold_start=args.cold_start, k=args.k, out_dir=args.out)


def _diagnose(args) -> None:
    from .experiment import run_diagnose

    run_diagnose(args.checkpoint, args.out)


def _synth(args) -> None:
    from .synth import emit_log, generate_world, write_world

    if args.queries < 1 or args.items < 1 or args.impressions < 1:
        raise EsamError("--queries, --items and --impressions must be >= 1")
    world = generate_world(args.queries, args.items, args.k, args.alpha, seed=args.seed,
                           relevant_fraction=args.relevant_fraction, cluster_spread=args.cluster_spread)
    log = emit_log(world, impressions=args.impressions, seed=args.seed, label_noise=args.label_noise)
    write_world(args.out, world, log, extra={"impressions": args.impressions, "label_noise": args.label_noise})
    print(f"wrote {len(log)} records, {args.queries} queries, {args.items} items, "
          f"{int(np.count_nonzero(log.label))} positives to {args.out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="esam", description="Two-tower ranking with entire-space adaptation losses.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="override output_dir")
    t.set_defaults(func=_train)

    e = sub.add_parser("evaluate", help="sliced metrics of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", choices=("val", "test"), default="test")
    e.add_argument("--cold-start", action="store_true")
    e.add_argument("--k", type=int, default=20)
    e.add_argument("--out", help="directory for the metric files (default: the checkpoint's)")
    e.set_defaults(func=_evaluate)

    d = sub.add_parser("diagnose", help="domain distance, score histograms, similarity matrix, feature dump")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=_diagnose)

    s = sub.add_parser("synth", help="write a synthetic exposure-biased dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--queries", type=int, default=2000)
    s.add_argument("--items", type=int, default=5000)
    s.add_argument("--alpha", type=float, default=1.5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--k", type=int, default=8, help="latent factor dimension")
    s.add_argument("--impressions", type=int, default=300, help="popularity draws per query")
    s.add_argument("--relevant-fraction", type=float, default=0.1)
    s.add_argument("--cluster-spread", type=float, default=1.0)
    s.add_argument("--label-noise", type=float, default=0.0)
    s.set_defaults(func=_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (EsamError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: I/O: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``python -m pfl {gen,train,eval,analyze,gradcheck}``.

Exit codes: 0 success, 1 check failure, 2 usage or config error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import pipeline
from .errors import NumericError, PFLError
from .gradcheck import run_gradcheck
from .model import atomic_write_text
from .synthbench import load_manifest

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pfl", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="run config JSON (sections synth, model, train_phase1, ...)")
        p.add_argument("--out", required=True, help="output directory")
        if data:
            p.add_argument("--data", required=True, help="benchmark manifest (.jsonl)")

    p = sub.add_parser("gen", help="generate a synthetic benchmark manifest")
    common(p, data=False)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train one phase")
    common(p)
    p.add_argument("--phase", required=True, choices=("identity_only", "full", "baseline"))
    p.add_argument("--pretrained", help="identity-only checkpoint (required for --phase full)")
    p.add_argument("--seed", type=int, help="override the training seed from the config")

    p = sub.add_parser("eval", help="rank-1 evaluation of a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--self-gallery", action="store_true", help="sanity mode: NM probes matched against themselves")
    p.add_argument("--no-view-exclude", action="store_true", help="keep same-view gallery entries")

    p = sub.add_parser("analyze", help="uncertainty and cross-cloth mapping diagnostics")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--metrics", help="phase-2 metrics CSV for the sigma trajectory")

    p = sub.add_parser("gradcheck", help="finite-difference check of all analytic gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="optional file for the report")
    return ap


def _gen(args, config) -> int:
    ds = pipeline.gen(config, args.seed, args.out)
    s = ds.summary()
    print(f"wrote {Path(args.out) / pipeline.MANIFEST}: {s['n_records']} sequences, Xv:Xc ratio {s['ratio']:.3f}")
    return EXIT_OK


def _train(args, config) -> int:
    if args.phase == "full" and not args.pretrained:
        print("error: --phase full requires --pretrained", file=sys.stderr)
        return EXIT_USAGE
    if args.seed is not None:
        config = config.with_seed(args.seed)
    dataset = load_manifest(args.data)
    pipeline.train(config, dataset, args.phase, args.out, pretrained=args.pretrained)
    print(f"wrote {Path(args.out) / pipeline.CHECKPOINT} and {Path(args.out) / pipeline.METRICS}")
    return EXIT_OK


def _eval(args, config) -> int:
    options = config.eval
    if args.self_gallery:
        options = replace(options, self_gallery=True)
    if args.no_view_exclude:
        options = replace(options, exclude_identical_view=False)
    report = pipeline.evaluate_checkpoint(args.checkpoint, load_manifest(args.data), options, args.out)
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    for cond, acc in report.averages().items():
        print(f"{cond}: rank-1 {100 * acc:.2f}%")
    return EXIT_OK


def _analyze(args, config) -> int:
    summary = pipeline.analyze(args.checkpoint, load_manifest(args.data), args.metrics, args.out)
    if summary["warnings"]:
        print("warnings:", file=sys.stderr)
        for w in summary["warnings"]:
            print(f"  - {w}", file=sys.stderr)
    print(f"wrote analysis reports to {args.out}")
    return EXIT_OK


def _gradcheck(args, config) -> int:
    report = run_gradcheck(seed=args.seed)
    text = report.format()
    print(text)
    if args.out:
        atomic_write_text(args.out, text + "\n")
    return EXIT_OK if report.passed else EXIT_CHECK


COMMANDS = {"gen": _gen, "train": _train, "eval": _eval, "analyze": _analyze, "gradcheck": _gradcheck}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    try:
        config = pipeline.load_run_config(getattr(args, "config", None))
        return COMMANDS[args.command](args, config)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (PFLError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

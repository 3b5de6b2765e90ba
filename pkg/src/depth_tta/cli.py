"""Command line entry point: ``depth-tta <subcommand> [flags]``.

Exit codes: 0 success, 1 usage or unexpected failure, 2 configuration error,
3 input/ingestion error, 4 numeric failure, 5 report I/O error.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
import time
from dataclasses import replace
from pathlib import Path

from .errors import ConfigError, DepthTTAError
from .net import DepthNet, DepthNetConfig, pretrain_on_source
from .metrics import METRIC_NAMES
from .report import (
    ExperimentConfig,
    SUMMARY_FIELDS,
    emit_report,
    emit_sweep,
    load_steps,
    parse_lambda_grid,
    run_experiment,
    summarize_steps,
    summary_rows,
    sweep_lambda,
    sweep_selection,
    write_csv,
)
from .scene import DomainShift, SceneConfig, generate_stream, write_frame_dir

log = logging.getLogger("depth_tta")

DEFAULT_LAMBDA_GRID = "0,0.1,0.2,0.5,1.0,inf"
DEFAULT_SELECTIONS = "bn-encoder-all;bn:0.5;cnn:0.2+bn:1;cnn:1+bn:1"


def _lambda(text):
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if math.isnan(value) or value < 0:
        raise argparse.ArgumentTypeError("lambda must be >= 0 (or inf)")
    return value


def _run_flags(p, out_default):
    p.add_argument("--config", help="experiment file (.toml or .json); flags override it")
    p.add_argument("--checkpoint", help="network checkpoint")
    p.add_argument("--stream", help="'synthetic' or a frame directory with manifest.json")
    p.add_argument("--frames", type=int, help="number of synthetic frames")
    p.add_argument("--seed", type=int, help="scene seed for synthetic streams")
    p.add_argument("--domain-shift", help="none, fog:K, rain:D or brightness:F")
    p.add_argument("--lambda", dest="lambda_", type=_lambda, help="edge-loss weight (inf for edge loss only)")
    p.add_argument("--lr", type=float, help="SGD learning rate")
    p.add_argument("--median-window", type=int, help="odd median window size")
    p.add_argument("--select", help="parameter selection, e.g. bn-encoder-all, bn:0.5, cnn:0.2+bn:1")
    p.add_argument("--no-adapt", action="store_true", help="frozen baseline (learning rate 0)")
    p.add_argument("--out", default=None, help=f"output directory (default {out_default})")


def _experiment(args, out_default):
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    updates = {}
    for flag, key in (("checkpoint", "checkpoint"), ("stream", "stream"), ("frames", "n_frames"),
                      ("seed", "seed"), ("domain_shift", "domain_shift"), ("out", "out")):
        value = getattr(args, flag, None)
        if value is not None:
            updates[key] = value
    if "out" not in updates and not args.config:
        updates["out"] = out_default
    cfg = replace(cfg, **updates)
    hyper = {}
    if args.lambda_ is not None:
        hyper["lambda_"] = args.lambda_
    if args.lr is not None:
        hyper["lr"] = args.lr
    if args.median_window is not None:
        hyper["median_window"] = args.median_window
    if args.select is not None:
        hyper["selection"] = args.select
    if args.no_adapt:
        hyper["lr"] = 0.0
    cfg = cfg.with_hyper(**hyper) if hyper else cfg
    if not cfg.checkpoint:
        raise ConfigError("no checkpoint given (use --checkpoint or the config file)")
    return ExperimentConfig.from_dict(cfg.to_dict())


def _config_record(cfg):
    d = cfg.to_dict()
    d["hyper"] = cfg.hyperparams().to_dict()
    return d


def _print_summary(rows):
    print(f"{'domain':<10} {'frames':>6} {'AbsRel':>8} {'SqRel':>8} {'RMSE':>8} {'RMSElog':>8} {'d1':>6} {'d2':>6} {'d3':>6}")
    for r in rows:
        print(f"{r['domain']:<10} {r['n_frames']:>6} {r['abs_rel']:8.4f} {r['sq_rel']:8.4f} {r['rmse']:8.4f} "
              f"{r['rmse_log']:8.4f} {r['delta1']:6.3f} {r['delta2']:6.3f} {r['delta3']:6.3f}")


# ----------------------------------------------------------------- commands


def cmd_pretrain(args):
    h = w = args.size
    config = DepthNetConfig(input_size=(h, w, 3))
    net = DepthNet.build(config, args.seed)
    source = generate_stream(SceneConfig(resolution=(h, w), seed=args.source_seed), args.steps)
    log.info("pretraining %d parameters for %d steps", net.n_parameters(), args.steps)
    pretrain_on_source(net, source, args.steps, lr=args.lr, checkpoint=args.checkpoint,
                       log_every=args.log_every, logger=log)
    print(f"wrote {args.checkpoint}")
    return 0


def cmd_generate(args):
    cfg = SceneConfig(resolution=(args.size, args.size), seed=args.seed)
    frames = generate_stream(cfg, args.frames, DomainShift.parse(args.domain_shift))
    path = write_frame_dir(frames, args.out)
    print(f"wrote {args.frames} frames, manifest {path}")
    return 0


def _run(args, kind, out_default):
    cfg = _experiment(args, out_default)
    if kind == "eval":
        cfg = cfg.with_hyper(lr=0.0)
    started = time.perf_counter()
    result = run_experiment(cfg)
    root = emit_report(result, cfg.out, _config_record(cfg), kind=kind, started=started)
    _print_summary(summary_rows(result))
    print(f"report written to {root}")
    return 0


def cmd_adapt(args):
    return _run(args, "adapt", "runs/adapt")


def cmd_eval(args):
    return _run(args, "eval", "runs/eval")


def cmd_sweep_lambda(args):
    cfg = _experiment(args, "runs/sweep-lambda")
    grid = parse_lambda_grid(args.grid)
    rows = sweep_lambda(cfg, grid)
    path = emit_sweep(rows, cfg.out, "lambda")
    for r in rows:
        print(f"lambda={r.key:<6} AbsRel={r.abs_rel:.4f} d1={r.delta1:.4f} adapted={r.n_adapted}")
    print(f"wrote {path}")
    return 0


def cmd_sweep_selection(args):
    cfg = _experiment(args, "runs/sweep-selection")
    specs = [s for s in args.specs.split(";") if s.strip()]
    rows = sweep_selection(cfg, specs)
    path = emit_sweep(rows, cfg.out, "selection")
    for r in rows:
        print(f"{r.key:<20} AbsRel={r.abs_rel:.4f} d1={r.delta1:.4f} adapted={r.n_adapted}")
    print(f"wrote {path}")
    return 0


def cmd_report(args):
    run_dir = Path(args.run)
    header, steps = load_steps(run_dir / "steps.jsonl")
    aggregates = summarize_steps(steps, args.aggregation)
    rows = []
    for domain, rec in aggregates.items():
        n = sum(1 for s in steps if s.get("metrics") and (domain == "all" or s["domain"] == domain))
        rows.append({"domain": domain, "n_frames": n, "n_valid": rec.n_valid,
                     **{k: getattr(rec, k) for k in METRIC_NAMES}})
    out = Path(args.out) if args.out else run_dir
    write_csv(out / f"summary-{args.aggregation}.csv", SUMMARY_FIELDS, rows)
    print(f"run kind={header.get('kind')} schema={header.get('schema')} frames={len(steps)}")
    _print_summary(rows)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="depth-tta", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    # -v is accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="fit a network on clean synthetic source scenes", parents=[common])
    p.add_argument("--checkpoint", required=True, help="output checkpoint path")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0, help="weight initialization seed")
    p.add_argument("--source-seed", type=int, default=100, help="scene seed of the source stream")
    p.add_argument("--size", type=int, default=64, help="square input resolution")
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("generate", help="write a synthetic stream to a frame directory", parents=[common])
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--domain-shift", default="none")
    p.set_defaults(func=cmd_generate)

    for name, func, out, text in (
        ("adapt", cmd_adapt, "runs/adapt", "run online adaptation and write a report"),
        ("eval", cmd_eval, "runs/eval", "evaluate a checkpoint without adapting"),
    ):
        p = sub.add_parser(name, help=text, parents=[common])
        _run_flags(p, out)
        p.set_defaults(func=func)

    p = sub.add_parser("sweep-lambda", help="one run per edge-loss weight", parents=[common])
    _run_flags(p, "runs/sweep-lambda")
    p.add_argument("--grid", default=DEFAULT_LAMBDA_GRID, help=f"comma separated (default {DEFAULT_LAMBDA_GRID})")
    p.set_defaults(func=cmd_sweep_lambda)

    p = sub.add_parser("sweep-selection", help="one run per parameter selection", parents=[common])
    _run_flags(p, "runs/sweep-selection")
    p.add_argument("--specs", default=DEFAULT_SELECTIONS, help="semicolon separated selections")
    p.set_defaults(func=cmd_sweep_selection)

    p = sub.add_parser("report", help="re-aggregate a run directory's steps.jsonl", parents=[common])
    p.add_argument("run", help="run directory containing steps.jsonl")
    p.add_argument("--aggregation", choices=("per-frame", "pooled"), default="per-frame")
    p.add_argument("--out", help="where to write the summary (default: the run directory)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except DepthTTAError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

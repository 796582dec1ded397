"""Command-line entry point: ``normscale <subcommand> ...``.

Relative output paths resolve against ``$NORMSCALE_OUTPUT_ROOT`` (default:
the current directory).
"""

import argparse
import os
import sys
from pathlib import Path

from .config import ConfigError, load_config, with_run
from .disco_check import MODES as DISCO_MODES, disco_check, rows_to_csv
from .report import DESK_GATE, emit_report
from .sweep import run_sweep
from .train import run_training

OUTPUT_ROOT_ENV = "NORMSCALE_OUTPUT_ROOT"


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "."))


def _resolve(path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else output_root() / p


def _cmd_train(args):
    cfg = load_config(args.config)
    cfg = with_run(cfg, eta=args.eta, batch_size=args.batch_size, seed=args.seed, max_tokens=args.max_tokens)
    out = _resolve(args.out or cfg.logging.output_dir)
    result = run_training(cfg, args.run_id, out, resume=args.resume)
    last = result.lines[-1]
    print(f"{args.run_id}: {last.tokens} tokens, loss {last.raw_loss:.4f}, checkpoint {result.checkpoint}")
    return 0


def _cmd_sweep(args):
    cfg = load_config(args.config)
    out = _resolve(args.out or cfg.logging.output_dir)
    result = run_sweep(cfg, out, workers=args.workers)
    print(f"{len(result.run_ids)} runs, {len(result.failures)} failed; summary at {result.summary}")
    for rid, err in sorted(result.failures.items()):
        print(f"  failed {rid}: {err}", file=sys.stderr)
    return 1 if len(result.failures) == len(result.run_ids) else 0


def _cmd_disco(args):
    rows, ok = disco_check(args.world_size, args.params, args.seed, args.mode, steps=args.steps)
    text = rows_to_csv(rows)
    if args.out:
        path = _resolve(args.out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    sys.stdout.write(text)
    return 0 if ok else 1


def _report(args, mode, plots):
    gate = (args.smooth_max_batch, args.smooth_min_tokens)
    paths = emit_report(args.logs, mode, _resolve(args.out), plots=plots, horizons=args.horizons,
                        gate=gate, band=tuple(args.band))
    for p in paths:
        print(p)
    return 0


def _cmd_fit(args):
    return _report(args, args.mode, plots=False)


def _cmd_scaling(args):
    return _report(args, args.mode, plots=False)


def _cmd_plot(args):
    return _report(args, args.mode, plots=True)


def _report_args(p, modes, default):
    p.add_argument("logs", help="directory of run logs (<run_id>.json + <run_id>.jsonl)")
    p.add_argument("--mode", choices=modes, default=default)
    p.add_argument("--out", default="reports", help="report directory")
    p.add_argument("--horizons", type=int, nargs="+", help="token horizons (default: from sweep.json)")
    p.add_argument("--smooth-max-batch", type=int, default=DESK_GATE[0])
    p.add_argument("--smooth-min-tokens", type=int, default=DESK_GATE[1])
    p.add_argument("--band", type=float, nargs=2, default=(6.8, 7.2), metavar=("LO", "HI"),
                   help="target log2 norm band for the reach set")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="normscale", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training job")
    p.add_argument("config")
    p.add_argument("--run-id", default="run")
    p.add_argument("--out")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--eta", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-tokens", type=int)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("sweep", help="run the (eta, B, seed, layout) grid")
    p.add_argument("config")
    p.add_argument("--out")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("disco-check", help="distributed vs single-rank equivalence report (CSV)")
    p.add_argument("--world-size", type=int, required=True)
    p.add_argument("--params", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=DISCO_MODES, default="ddp")
    p.add_argument("--steps", type=int, default=3)
    p.add_argument("--out", help="also write the CSV here")
    p.set_defaults(func=_cmd_disco)

    p = sub.add_parser("fit", help="norm-scan fits or layout ranking (CSV)")
    _report_args(p, ("norm-scan", "layout"), "norm-scan")
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("scaling", help="learning-rate/batch-size regressions and B*(D) power law (CSV)")
    _report_args(p, ("lr-bs", "power-law"), "lr-bs")
    p.set_defaults(func=_cmd_scaling)

    p = sub.add_parser("plot", help="any report mode, CSV plus SVG")
    _report_args(p, ("norm-scan", "lr-bs", "power-law", "layout"), "norm-scan")
    p.set_defaults(func=_cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"normscale {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

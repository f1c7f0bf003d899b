"""Command line entry point: ``mimex run | aggregate | plot | presets``.

Exit status is 2 for configuration errors and 1 for failures at run time.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ConfigError, dump_config, effective_seeds, load_config


def _seed_list(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mimex", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train every seed of a config and write curve CSVs")
    run.add_argument("--config", required=True, type=Path)
    run.add_argument("--seeds", type=_seed_list, help="override the config's seeds, e.g. 0,1,2")
    run.add_argument("--out", type=Path, help="output directory (default runs/<config name>)")
    run.add_argument("--workers", type=int, default=1, help="worker processes, one seed each")
    run.add_argument("--print-config", action="store_true", help="print the validated config and exit")
    run.add_argument("--plot", action="store_true", help="also write aggregate.csv and curve.svg")

    agg = sub.add_parser("aggregate", help="mean and 95%% CI per step from a run directory")
    agg.add_argument("--in", dest="inp", required=True, type=Path)
    agg.add_argument("--out", required=True, type=Path)

    plot = sub.add_parser("plot", help="render aggregate CSVs as an SVG learning curve")
    plot.add_argument("--in", dest="inp", required=True, type=Path, nargs="+")
    plot.add_argument("--label", action="append", help="series label (default: file stem)")
    plot.add_argument("--out", required=True, type=Path)

    presets = sub.add_parser("presets", help="list or run ablation presets")
    presets.add_argument("--list", action="store_true")
    presets.add_argument("--run", metavar="NAME")
    presets.add_argument("--out", type=Path, default=Path("runs/presets"))
    presets.add_argument("--seeds", type=_seed_list)
    presets.add_argument("--steps", type=int, help="override total_env_steps")
    return parser


def cmd_run(args) -> int:
    from .harness import aggregate_dir, run_experiment, write_aggregate_csv
    from .plotting import emit_plot

    cfg = load_config(args.config)
    if args.seeds is not None:
        cfg.seeds = args.seeds
        cfg.validate()
    if args.print_config:
        sys.stdout.write(dump_config(cfg))
        return 0
    out = args.out or Path("runs") / cfg.name
    seeds = effective_seeds(cfg.seeds)
    print(f"running {cfg.name}: explorer={cfg.explorer} env={cfg.env.name} seeds={seeds}", file=sys.stderr)
    run_experiment(cfg, out_dir=out, workers=args.workers)
    print(out / "merged.csv")
    if args.plot:
        agg = aggregate_dir(out, min_seeds=1)
        write_aggregate_csv(out / "aggregate.csv", agg)
        print(emit_plot([agg], [cfg.name], out / "curve.svg"))
    return 0


def cmd_aggregate(args) -> int:
    from .harness import aggregate_dir, write_aggregate_csv

    agg = aggregate_dir(args.inp)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_aggregate_csv(args.out, agg)
    print(args.out)
    return 0


def cmd_plot(args) -> int:
    from .harness import read_aggregate_csv
    from .plotting import emit_plot

    labels = args.label or [p.stem for p in args.inp]
    if len(labels) != len(args.inp):
        raise ConfigError("--label must be given once per --in file")
    print(emit_plot([read_aggregate_csv(p) for p in args.inp], labels, args.out))
    return 0


def cmd_presets(args) -> int:
    from .harness import SMOKE_BASE, ablation_presets, run_preset

    if args.run:
        base = dict(SMOKE_BASE)
        if args.steps is not None:
            base["total_env_steps"] = args.steps
        _, _, svg = run_preset(args.run, args.out / args.run, seeds=args.seeds, base=base)
        print(svg)
        return 0
    for name, configs in ablation_presets().items():
        print(f"{name}: {', '.join(label for label, _ in configs)}")
    return 0


COMMANDS = {"run": cmd_run, "aggregate": cmd_aggregate, "plot": cmd_plot, "presets": cmd_presets}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any run-time failure maps to exit 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

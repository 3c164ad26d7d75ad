"""Command line entry point: ``sfunida-sim {pretrain,run,grid,report}``.

Layout of ``--out-dir``::

    checkpoints/<scenario>_seed<seed>.npz   pretrained source models
    records/*.json                          one record per grid run
    runs/*.json                             records of single ``run`` invocations
    baselines.json                          source-only metric per scenario and seed
    reports/                                CSV, SVG and ANSI heatmaps, trends.json
"""

import argparse
import glob
import json
import logging
import os
import sys

import numpy as np

from .config import load_settings
from .exceptions import InvalidInputError, MissingCheckpointError, ReportError
from .grid import (
    GridSpec,
    cells_from_records,
    checkpoint_path,
    load_pretrained,
    pretrain_checkpoints,
    record_name,
    run_grid,
    scenario_data,
)
from .harness import dump_record, evaluate_source_only, load_record, run_record, run_stream
from .losses import LOSS_KINDS
from .report import emit_reports, render_ansi, grid_matrix, baseline_means
from .scenario import SHIFT_KINDS

log = logging.getLogger("sfunida_sim")


def parse_values(text):
    """``"0,10,50"`` or ``"start:stop:step"`` (stop inclusive) -> tuple of floats."""
    text = text.strip()
    if ":" in text:
        parts = [float(v) for v in text.split(":")]
        if len(parts) != 3 or parts[2] <= 0:
            raise argparse.ArgumentTypeError(f"bad range {text!r}; use start:stop:step")
        start, stop, step = parts
        return tuple(float(v) for v in np.arange(start, stop + step / 2, step))
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad value list {text!r}") from None


def _scenarios(arg):
    return SHIFT_KINDS if arg in (None, "all") else (arg,)


def _losses(arg):
    return LOSS_KINDS if arg in (None, "all") else (arg,)


def _paths(out_dir):
    return {
        "checkpoints": os.path.join(out_dir, "checkpoints"),
        "records": os.path.join(out_dir, "records"),
        "runs": os.path.join(out_dir, "runs"),
        "baselines": os.path.join(out_dir, "baselines.json"),
        "reports": os.path.join(out_dir, "reports"),
    }


def cmd_pretrain(args, settings):
    seeds = [args.seed + r for r in range(args.repeats)]
    paths = pretrain_checkpoints(_scenarios(args.scenario), seeds, settings,
                                 _paths(args.out_dir)["checkpoints"], args.threads)
    for p in paths:
        print(p)
    return 0


def cmd_run(args, settings):
    if args.scenario == "all" or args.loss == "all":
        raise InvalidInputError("run takes a single --scenario and --loss")
    paths = _paths(args.out_dir)
    model = load_pretrained(paths["checkpoints"], args.scenario, args.seed)
    _, _, target = scenario_data(args.scenario, args.seed, settings)
    cfg = settings.run_config(args.loss, args.quality, args.quantity, args.seed,
                              dump_path=args.dump_pseudo)
    metrics = run_stream(model, target, cfg)
    base = evaluate_source_only(model, target, cfg)
    rec = run_record(metrics, scenario=args.scenario, loss=args.loss, quality=args.quality,
                     quantity=args.quantity, seed=args.seed,
                     extra={"baseline": base.primary(args.scenario)})
    os.makedirs(paths["runs"], exist_ok=True)
    path = os.path.join(paths["runs"], record_name(args.scenario, args.loss, args.quality,
                                                   args.quantity, args.seed))
    dump_record(rec, path)
    kind = args.scenario
    print(f"{kind} {args.loss} quality={args.quality:g} quantity={args.quantity:g} "
          f"seed={args.seed}: {'accuracy' if kind == 'PDA' else 'H-score'} "
          f"{100 * metrics.primary(kind):.2f} (source-only {100 * base.primary(kind):.2f})")
    print(path)
    return 0


def cmd_grid(args, settings):
    if args.quantity is not None and 0.0 in args.quantity and not args.include_zero_quantity:
        raise InvalidInputError("quantity 0 is only swept with --include-zero-quantity")
    spec = GridSpec(
        qualities=args.quality or GridSpec.qualities,
        quantities=tuple(v for v in (args.quantity or GridSpec.quantities) if v != 0.0),
        scenarios=_scenarios(args.scenario),
        losses=_losses(args.loss),
        repeats=args.repeats,
        base_seed=args.seed,
        include_zero_quantity=args.include_zero_quantity,
    )
    paths = _paths(args.out_dir)
    if args.pretrain:
        missing = [(k, s) for k in spec.scenarios for s in spec.seeds
                   if not os.path.exists(checkpoint_path(paths["checkpoints"], k, s))]
        for k, s in missing:
            pretrain_checkpoints([k], [s], settings, paths["checkpoints"])
    cells, baselines = run_grid(spec, settings, paths["checkpoints"], args.threads,
                                record_dir=paths["records"])
    with open(paths["baselines"], "w") as fh:
        json.dump({k: {str(s): v for s, v in d.items()} for k, d in baselines.items()},
                  fh, indent=2, sort_keys=True)
    emit_reports(cells, baselines, paths["reports"])
    _print_heatmaps(cells, baselines)
    print(os.path.join(paths["reports"], "trends.json"))
    return 0


def _print_heatmaps(cells, baselines):
    base = baseline_means(baselines)
    for s, l in sorted({(c.scenario, c.loss) for c in cells}):
        q, a, m = grid_matrix(cells, s, l)
        sys.stdout.write(render_ansi(q, a, m, base[s], f"{s} / {l}"))


def cmd_report(args, settings):
    paths = _paths(args.out_dir)
    files = sorted(glob.glob(os.path.join(paths["records"], "*.json")))
    if not files:
        raise ReportError(f"no run records under {paths['records']}")
    if not os.path.exists(paths["baselines"]):
        raise ReportError(f"{paths['baselines']} is missing; run the grid command first")
    with open(paths["baselines"]) as fh:
        baselines = {k: {int(s): v for s, v in d.items()} for k, d in json.load(fh).items()}
    cells = cells_from_records(load_record(f) for f in files)
    if args.scenario not in (None, "all"):
        cells = [c for c in cells if c.scenario == args.scenario]
    if args.loss not in (None, "all"):
        cells = [c for c in cells if c.loss == args.loss]
    for p in emit_reports(cells, baselines, paths["reports"]):
        print(p)
    return 0


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file overriding default settings")
    common.add_argument("--out-dir", default="sfunida_out")
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--seed", type=int, default=0, help="seed (base seed for repeats)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="sfunida-sim",
        description="Simulated pseudo-labels for online source-free universal domain adaptation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", parents=[common], help="train source models")
    p.add_argument("--scenario", choices=SHIFT_KINDS + ("all",), default="all")
    p.add_argument("--repeats", type=int, default=1)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("run", parents=[common], help="adapt once for one grid cell")
    p.add_argument("--scenario", choices=SHIFT_KINDS, required=True)
    p.add_argument("--loss", choices=LOSS_KINDS, default="contrastive")
    p.add_argument("--quality", type=float, default=100.0)
    p.add_argument("--quantity", type=float, default=100.0)
    p.add_argument("--dump-pseudo", metavar="CSV", help="write per-sample pseudo-labels")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("grid", parents=[common], help="sweep quality x quantity")
    p.add_argument("--scenario", choices=SHIFT_KINDS + ("all",), default="all")
    p.add_argument("--loss", choices=LOSS_KINDS + ("all",), default="all")
    p.add_argument("--quality", type=parse_values, help="e.g. 0:100:10 or 0,50,100")
    p.add_argument("--quantity", type=parse_values, help="e.g. 10:100:10")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--include-zero-quantity", action="store_true")
    p.add_argument("--pretrain", action="store_true", help="pretrain missing checkpoints first")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("report", parents=[common], help="rebuild reports from records")
    p.add_argument("--scenario", choices=SHIFT_KINDS + ("all",), default="all")
    p.add_argument("--loss", choices=LOSS_KINDS + ("all",), default="all")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        settings = load_settings(args.config)
        return args.func(args, settings)
    except (InvalidInputError, MissingCheckpointError, ReportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end.

Subcommands: gen-data, train, eval, ablate, grad-check, info. Exit codes:
0 success, 1 usage error, 2 runtime failure. Report-producing subcommands
write CSV files plus a rendered PNG figure into the output directory.
"""

from __future__ import annotations

import argparse
import os
import sys
import traceback

from . import data as datamod
from . import autodiff, figures, gradcheck, harness, model


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on usage errors; the CLI contract is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="hftrans",
                     description="Hybrid-fusion transformer segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required,
                       help="flat key = value run config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out", default="out",
                       help="output directory (default: ./out)")

    common(sub.add_parser("gen-data", help="write phantom volumes + manifest"))
    common(sub.add_parser("train", help="train and write checkpoint, loss log"))

    pe = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    pe.add_argument("--checkpoint", required=True, help="path to a .hftc file")
    pe.add_argument("--data", required=True, help="dataset manifest path")
    pe.add_argument("--config", default=None,
                    help="optional run config (regions)")
    pe.add_argument("--out", default="out", help="output directory")

    common(sub.add_parser("ablate", help="run the fusion-mode ablation"))

    pg = sub.add_parser("grad-check", help="finite-difference gradient suite")
    pg.add_argument("--instances", type=int, default=3,
                    help="random instances per primitive (default 3)")
    pg.add_argument("--seed", type=int, default=0)

    pi = sub.add_parser("info", help="parameter and FLOP counts for a config")
    pi.add_argument("--config", required=True)
    pi.add_argument("--seed", type=int, default=None)
    return parser


def _load_run_config(args) -> harness.RunConfig:
    cfg = harness.RunConfig.from_file(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _cmd_gen_data(args) -> int:
    cfg = _load_run_config(args)
    os.makedirs(args.out, exist_ok=True)
    entries = []
    for sample_id, sample in harness.build_dataset(cfg):
        stem = os.path.join(args.out, sample_id)
        img, lab = datamod.write_volume(sample, stem)
        entries.append((sample_id, os.path.basename(img), os.path.basename(lab)))
    manifest = os.path.join(args.out, "manifest.txt")
    datamod.write_manifest(entries, manifest)
    print(f"wrote {len(entries)} samples and {manifest}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_run_config(args)
    result = harness.train(cfg, out_dir=args.out)
    fig = figures.loss_curve(result.loss_rows,
                             os.path.join(args.out, "loss_curve.png"))
    final = result.loss_rows[-1][1] if result.loss_rows else float("nan")
    print(f"trained {cfg.steps} steps, final loss {final:.6f}")
    print(f"wrote {result.checkpoint_path}, {result.loss_log_path}, {fig}")
    return 0


def _cmd_eval(args) -> int:
    config, params = model.load_checkpoint(args.checkpoint)
    if args.config:
        regions = harness.RunConfig.from_file(args.config).regions
    else:
        regions = harness.DEFAULT_REGIONS
        bad = [name for name, classes in regions
               if max(classes) >= config.num_classes]
        if bad:
            raise harness.ConfigError(
                f"checkpoint has {config.num_classes} classes but the default "
                f"regions ({', '.join(bad)}) reference higher class ids; "
                f"pass --config with a regions line")
    samples = [(sid, datamod.zscore_normalize(s))
               for sid, s in datamod.load_dataset(args.data)]
    report = harness.evaluate(config, params, samples, regions=regions)
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "metrics.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_csv())
    fig = figures.report_figure(report,
                                os.path.join(args.out, "metrics.png"))
    for mode, region, dice, hd, vs in report.mean_rows():
        print(f"{mode} {region}: dice={dice:.4f} hd95={hd:.4f} vs={vs:.4f}")
    print(f"wrote {csv_path}, {fig}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = _load_run_config(args)
    result = harness.run_ablation(cfg, out_dir=args.out)
    fig = figures.ablation_figure(result.table,
                                  os.path.join(args.out, "ablation.png"))
    print(harness.ABLATION_HEADER)
    for row in result.table:
        print(row.csv_line())
    print(f"wrote {result.csv_path}, {result.report_path}, {fig}")
    return 0


def _cmd_grad_check(args) -> int:
    results = gradcheck.run_standard_suite(seed=args.seed,
                                           instances=args.instances)
    for res in results:
        print(res.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 0 if not failed else 2


def _cmd_info(args) -> int:
    cfg = _load_run_config(args)
    spec = cfg.model.fusion_spec()
    params = model.count_parameters(model.init_params(cfg.model))
    flops = model.estimate_flops(cfg.model)
    print(f"fusion_mode    {cfg.model.fusion_mode}")
    print(f"encoders       {spec.num_encoders}")
    print(f"tokens         {cfg.model.num_tokens()}")
    print(f"parameters     {params}")
    print(f"forward_macs   {flops}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "grad-check": _cmd_grad_check,
    "info": _cmd_info,
}

# anticipated failures print one line; anything else keeps its traceback
_EXPECTED_FAILURES = (
    OSError,
    autodiff.ShapeError,
    autodiff.NonFiniteError,
    harness.ConfigError,
    harness.TrainingError,
    datamod.DataError,
    datamod.VolumeError,
    model.CheckpointError,
)


def cli(argv=None) -> int:
    """Parse and run; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except _EXPECTED_FAILURES as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        traceback.print_exc(file=sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()

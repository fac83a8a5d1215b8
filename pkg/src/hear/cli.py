"""Command-line entry point: ``hear <command> [options]``.

Exit codes: 0 ok, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import training
from .config import load_config
from .corpus import synth_corpus
from .errors import DataError, HearError
from .profiler import ModelShape, WorkloadSpec, build_report, estimate_flops, monolithic_flops

log = logging.getLogger("hear")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, out_default: str = "runs") -> None:
    p.add_argument("--config", help="key = value config file (supports `include other.cfg`)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default=out_default, help="output directory")
    p.add_argument("--force", action="store_true", help="load checkpoints despite a config-hash mismatch")


def _manifest_arg(p):
    p.add_argument("--manifest", help="CSV manifest with header path,label,split,fold")
    p.add_argument("--data-root", help="base directory for relative manifest paths (else $HEAR_DATA_ROOT)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hear", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train-tokenizer", help="stage 1: distilled Gumbel-Softmax tokenizer")
    _common(p)
    _manifest_arg(p)
    p.add_argument("--steps", type=int, help="schedule length (desk-scale override)")
    p.add_argument("--stop-after", type=int, help="stop early at this step without shortening the schedule")
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("pretrain", help="stage 2: masked audio modelling with a frozen tokenizer")
    _common(p)
    _manifest_arg(p)
    p.add_argument("--tokenizer", required=True, help="tokenizer checkpoint")
    p.add_argument("--steps", type=int)
    p.add_argument("--stop-after", type=int)
    p.add_argument("--resume")
    p.add_argument("--mask-bernoulli", action="store_true", help="per-patch Bernoulli masking instead of an exact 40%% count")

    p = sub.add_parser("finetune", help="stage 3: downstream adaptation")
    _common(p)
    _manifest_arg(p)
    p.add_argument("--acoustic", help="pre-trained acoustic checkpoint (not needed for --mode scratch)")
    p.add_argument("--mode", choices=["base", "scratch", "no_spectrum", "transfer"])
    p.add_argument("--preset", choices=["ESC-50", "GSCv1", "GSCv2", "VoxCeleb"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--no-cv", action="store_true", help="ignore folds; use split tags")

    p = sub.add_parser("infer", help="class probabilities for one WAV file")
    p.add_argument("checkpoint")
    p.add_argument("wav")

    p = sub.add_parser("profile", help="parameter / FLOPs / RTF report")
    _common(p, out_default="")
    p.add_argument("--duration", type=float, default=10.0)
    p.add_argument("--classes", type=int, default=50)
    p.add_argument("--mode", default="base", choices=["base", "scratch", "no_spectrum", "transfer"])
    p.add_argument("--checkpoint", help="profile a fine-tuned classifier instead of the default config")
    p.add_argument("--measure-rtf", action="store_true", help="time single-thread inference (non-deterministic)")
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--json", help="write the CostReport JSON here ('-' for stdout)")
    p.add_argument("--figures", help="directory for breakdown and scaling figures")

    p = sub.add_parser("synth", help="generate a deterministic synthetic corpus")
    p.add_argument("out")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--clips", type=int, default=50, help="clips per class")
    p.add_argument("--min-duration", type=float, default=1.0)
    p.add_argument("--max-duration", type=float, default=13.0)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("report", help="tabulate metrics files and render figures")
    p.add_argument("paths", nargs="+")
    p.add_argument("--out", help="directory for figures")
    p.add_argument("--delimiter", choices=["tab", "comma"], default="tab")
    return parser


def _config(args):
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise HearError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.seed is not None:
        overrides["seed"] = args.seed
    for flag, key in (("manifest", "manifest"), ("data_root", "data_root")):
        if getattr(args, flag, None):
            overrides[key] = getattr(args, flag)
    return load_config(args.config, overrides)


def cmd_train_tokenizer(args) -> int:
    cfg = training.desk_steps(_config(args), "tokenizer", args.steps)
    path = training.train_tokenizer(cfg, args.out, args.resume, args.stop_after, args.force)
    print(path)
    return 0


def cmd_pretrain(args) -> int:
    cfg = training.desk_steps(_config(args), "pretrain", args.steps)
    if args.mask_bernoulli:
        cfg = replace(cfg, mask_bernoulli=True)
    path = training.pretrain(cfg, args.tokenizer, args.out, args.resume, args.stop_after, args.force)
    print(path)
    return 0


def cmd_finetune(args) -> int:
    cfg = _config(args)
    updates = {k: v for k, v in (("preset", args.preset), ("finetune_epochs", args.epochs),
                                 ("finetune_batch", args.batch), ("finetune_lr", args.lr)) if v}
    cfg = replace(cfg, **updates)
    summary = training.finetune(cfg, args.acoustic, args.out, args.mode, cv=not args.no_cv, force=args.force)
    for name, run in summary["runs"].items():
        split = summary["reported_split"]
        print(f"{name}\t{split}\taccuracy={run[split]['accuracy']:.4f}")
    print(f"mean\t{summary['reported_split']}\taccuracy={summary['mean_accuracy']:.4f}")
    return 0


def cmd_infer(args) -> int:
    result = training.infer(args.checkpoint, args.wav)
    print(json.dumps(result, indent=2, sort_keys=True))
    print(f"top-1: {result['top1']}", file=sys.stderr)
    return 0


def cmd_profile(args) -> int:
    from .downstream import HEARClassifier

    if args.checkpoint:
        model, _ = training.load_classifier(args.checkpoint, args.force)
    else:
        cfg = _config(args)
        model = training.build_classifier(cfg, args.classes, args.mode)
    report = build_report(model, args.duration, measure=args.measure_rtf, runs=args.runs)
    print(report.to_table())
    if args.json == "-":
        print(report.to_json())
    elif args.json:
        Path(args.json).parent.mkdir(parents=True, exist_ok=True)
        Path(args.json).write_text(report.to_json() + "\n")
    if args.figures:
        from .report import plot_cost_breakdown, plot_scaling

        fig_dir = Path(args.figures)
        plot_cost_breakdown(report.to_dict(), fig_dir / "flops_breakdown.png")
        shape = ModelShape(model.acoustic.cfg, model.task.cfg,
                           model.gate.spec_proj.out_features if model.gate is not None else 0,
                           model.head.fc1.out_features, model.num_classes, model.gate is not None)
        durations = [6, 12, 18, 24, 30, 45, 60]
        chunked = [estimate_flops(shape, WorkloadSpec(d, model.frontend))["acoustic"] for d in durations]
        mono = [sum(monolithic_flops(shape, WorkloadSpec(d, model.frontend)).values()) for d in durations]
        plot_scaling(durations, chunked, mono, fig_dir / "flops_scaling.png")
    return 0


def cmd_synth(args) -> int:
    manifest = synth_corpus(args.out, args.classes, args.clips, args.min_duration, args.max_duration, args.seed)
    print(manifest)
    return 0


def cmd_report(args) -> int:
    from .report import report

    for p in args.paths:
        if not Path(p).exists():
            raise DataError(f"no such metrics file: {p}")
    sys.stdout.write(report(args.paths, Path(args.out) if args.out else None, "\t" if args.delimiter == "tab" else ","))
    return 0


COMMANDS = {
    "train-tokenizer": cmd_train_tokenizer,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "infer": cmd_infer,
    "profile": cmd_profile,
    "synth": cmd_synth,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2) if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    from .numerics import set_deterministic

    set_deterministic()
    try:
        return COMMANDS[args.command](args)
    except HearError as e:
        log.error("%s", e)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())

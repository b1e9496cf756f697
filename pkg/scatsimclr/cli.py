import argparse
import csv
import difflib
import logging
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

from scatsimclr import __version__, config
from scatsimclr.augment import AugPolicy, policy_names, preview
from scatsimclr.augment import lanczos_resize
from scatsimclr.datasets import open_data, write_load_report
from scatsimclr.errors import ConfigurationError, ScatSimCLRError, UsageError
from scatsimclr.evaluation import ProbeConfig, extract_features, linear_eval
from scatsimclr.filterbank import FilterBankConfig, build_filter_bank, dump_filters
from scatsimclr.images import read_image
from scatsimclr.network import adapter_parameter_count
from scatsimclr.report import write_filter_report
from scatsimclr.scattering import ScatterConfig, channel_count, export_coefficients, padded_side
from scatsimclr.trainer import TrainConfig, Trainer, build_model, load_checkpoint, pretrain, save_checkpoint

logger = logging.getLogger("scatsimclr")

SWEEP_HEADER = ["J", "L", "block_count", "channels", "adapter_parameters",
                "final_contrastive_loss", "probe_top1"]
REPORTED_BLOCK_COUNTS = (8, 12, 16, 30)

# flag, TrainConfig field, type, help
TRAIN_FLAGS = [
    ("--epochs", "epochs", int, "training epochs"),
    ("--batch-size", "batch_size", int, "pairs per batch (N)"),
    ("--max-steps", "max_steps", int, "stop after this many optimizer steps"),
    ("--optimizer", "optimizer", str, "adam or sgd"),
    ("--lr", "learning_rate", float, "learning rate"),
    ("--momentum", "momentum", float, "SGD momentum"),
    ("--weight-decay", "weight_decay", float, "L2 weight decay"),
    ("--temperature", "temperature", float, "NT-Xent temperature tau"),
    ("--lambda", "lambda_value", float, "pretext weight after the warm-up"),
    ("--lambda-warmup", "lambda_warmup", int, "epochs (or steps) with lambda = 0"),
    ("--lambda-unit", "lambda_unit", str, "epoch or step"),
    ("--lambda-constant", "lambda_constant", float, "constant lambda, overrides the schedule"),
    ("--pretext", "pretext", str, "rotation, jigsaw or none"),
    ("--pretext-views", "pretext_views", str, "both or single"),
    ("--scales", "J", int, "scattering scales J"),
    ("--orientations", "L", int, "scattering orientations L"),
    ("--order", "order", int, "scattering order (1 or 2)"),
    ("--pad-policy", "pad_policy", str, "resize or zero-pad"),
    ("--image-size", "image_size", int, "side images are resized to"),
    ("--blocks", "block_count", int, "adapter residual blocks"),
    ("--hidden-dim", "hidden_dim", int, "adapter width"),
    ("--repr-dim", "repr_dim", int, "representation size"),
    ("--proj-dim", "proj_dim", int, "projection size"),
    ("--pool-grid", "pool_grid", int, "adapter pooling grid side"),
    ("--policy", "policy", str, "augmentation policy or +-joined transforms, e.g. crop+color-jitter"),
    ("--workers", "workers", int, "scattering worker threads"),
]


class ArgumentParser(argparse.ArgumentParser):
    """argparse parser whose errors raise UsageError, with close-match flag suggestions."""

    known_options = set()

    def error(self, message):
        hint = ""
        for token in message.replace(",", " ").split():
            if token.startswith("--"):
                match = difflib.get_close_matches(token.split("=")[0], sorted(self.known_options), n=1)
                if match:
                    hint = f" (did you mean {match[0]}?)"
                    break
        raise UsageError(f"{self.prog}: {message}{hint}")

    def add_argument(self, *args, **kwargs):
        action = super().add_argument(*args, **kwargs)
        ArgumentParser.known_options.update(s for s in action.option_strings if s.startswith("--"))
        return action


def _field_default(name):
    return {f.name: f.default for f in fields(TrainConfig)}[name]


def _add_common(parser):
    parser.add_argument("--seed", type=int, default=None, help="seed for all randomness (default: 0)")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="warnings only, no progress bars")


def _add_train_flags(parser, skip=()):
    parser.add_argument("--config", help="JSON file of TrainConfig fields")
    for flag, name, kind, text in TRAIN_FLAGS:
        if flag in skip:
            continue
        parser.add_argument(flag, dest=name, type=kind, default=None,
                            help=f"{text} (default: {_field_default(name)})")
    parser.add_argument("--lambda-auto", dest="lambda_auto", action="store_true", default=None,
                        help="experimental: lambda follows the running |C|/|P| ratio")


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser():
    parser = ArgumentParser(prog="scatsimclr",
                            description="Self-supervised contrastive learning on scattering features.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("pretrain", help="joint contrastive + pretext pretraining")
    p.add_argument("--data", help="dataset directory or synth:<kind>:<n>")
    p.add_argument("--out", default="runs/pretrain", help="output directory (default: runs/pretrain)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--report-params", action="store_true", help="print parameter counts and exit")
    _add_train_flags(p)
    _add_common(p)

    p = sub.add_parser("linear-eval", help="linear probe on a frozen encoder")
    p.add_argument("--checkpoint", required=True, help="pretrained checkpoint")
    p.add_argument("--data", required=True, help="labelled dataset directory or synth:<kind>:<n>")
    p.add_argument("--runs", type=int, default=config.PROBE_RUNS, help="probe runs, best is reported")
    p.add_argument("--steps", type=int, default=config.PROBE_STEPS, help="probe optimizer steps")
    p.add_argument("--lr", type=float, default=config.PROBE_LEARNING_RATE, help="probe learning rate")
    p.add_argument("--test-fraction", type=float, default=config.TEST_FRACTION, help="held-out fraction")
    p.add_argument("--init", default="uniform", choices=["uniform", "zeros"], help="probe initialization")
    p.add_argument("--features", help="also write the representations to this feature file")
    p.add_argument("--workers", type=int, default=1, help="scattering worker threads")
    p.add_argument("--out", default="linear_eval.csv", help="accuracy CSV (default: linear_eval.csv)")
    _add_common(p)

    p = sub.add_parser("scatter-export", help="write scattering coefficients to a feature file")
    p.add_argument("--data", required=True, help="dataset directory or synth:<kind>:<n>")
    p.add_argument("--out", required=True, help="feature file to write")
    p.add_argument("--scales", type=int, default=config.SCALES, help="scattering scales J")
    p.add_argument("--orientations", type=int, default=config.ORIENTATIONS, help="orientations L")
    p.add_argument("--order", type=int, default=config.SCATTER_ORDER, help="scattering order")
    p.add_argument("--image-size", type=int, default=96, help="side images are resized to")
    p.add_argument("--pad-policy", default=config.PAD_POLICY, help="resize or zero-pad")
    p.add_argument("--workers", type=int, default=1, help="scattering worker threads")
    _add_common(p)

    p = sub.add_parser("filters-dump", help="write the filter bank as images")
    p.add_argument("--scales", type=int, default=config.SCALES, help="scattering scales J")
    p.add_argument("--orientations", type=int, default=config.ORIENTATIONS, help="orientations L")
    p.add_argument("--size", type=int, default=128, help="filter grid side (power of two)")
    p.add_argument("--out", default="filters", help="output directory (default: filters)")
    p.add_argument("--mosaic", action="store_true", help="also write mosaic.png")
    p.add_argument("--report", help="also write a one-page PDF report to this path")
    _add_common(p)

    p = sub.add_parser("augment-preview", help="write two augmented views and a pretext view")
    p.add_argument("--input", required=True, help="image file")
    p.add_argument("--policy", default="default", help=f"one of: {', '.join(policy_names())}, or +-joined transforms")
    p.add_argument("--pretext", default="rotation", choices=["rotation", "jigsaw"], help="pretext transform")
    p.add_argument("--image-size", type=int, default=None, help="resize the input to this side first")
    p.add_argument("--out", default="preview", help="output directory (default: preview)")
    _add_common(p)

    p = sub.add_parser("sweep", help="grid over (J, L) or block counts, one CSV row per cell")
    p.add_argument("--scales", type=_int_list, dest="scale_grid", help="comma-separated J values")
    p.add_argument("--orientations", type=_int_list, dest="orientation_grid", help="comma-separated L values")
    p.add_argument("--blocks", type=_int_list, dest="block_grid", help="comma-separated block counts")
    p.add_argument("--data", help="dataset for training and probing (optional)")
    p.add_argument("--probe-steps", type=int, default=config.PROBE_STEPS, help="probe optimizer steps")
    p.add_argument("--probe-runs", type=int, default=1, help="probe runs per cell")
    p.add_argument("--out", default="sweep.csv", help="result CSV (default: sweep.csv)")
    _add_train_flags(p, skip=("--scales", "--orientations", "--blocks"))
    _add_common(p)

    p = sub.add_parser("reference", help="print the flag reference as Markdown")
    p.add_argument("--out", help="write to this file instead of stdout")
    _add_common(p)
    return parser


def configure_logging(args):
    level = logging.INFO
    if getattr(args, "verbose", False):
        level = logging.DEBUG
    elif getattr(args, "quiet", False):
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", force=True)


def train_config_from_args(args):
    """Defaults < --config file < flags."""
    values = TrainConfig().to_dict()
    if getattr(args, "config", None):
        values = config.merge_overrides(values, config.load_config_file(args.config))
    flags = {name: getattr(args, name, None) for name in values}
    values = config.merge_overrides(values, flags)
    return TrainConfig.from_dict(values)


def _progress(args):
    return not args.quiet and sys.stderr.isatty()


def _write_load_report(dataset, directory):
    """load_report.txt for folder datasets; synthetic sets have nothing to report."""
    if getattr(dataset, "manifest", None) is None:
        return None
    path = write_load_report(dataset, Path(directory) / "load_report.txt")
    logger.info("load report written to %s", path)
    return path


def report_params(cfg):
    channels = 3 * channel_count(cfg.J, cfg.L, cfg.order)
    print(f"Scattering channels per image: {channels} (J={cfg.J}, L={cfg.L}, order {cfg.order})")
    counts = build_model(cfg).parameter_counts()
    for name, count in counts.items():
        print(f"  {name:<12}{count:>14,d}")
    print("Adapter parameters by block count:")
    for blocks in REPORTED_BLOCK_COUNTS:
        count = adapter_parameter_count(replace(cfg.adapter_config, block_count=blocks), channels)
        print(f"  {blocks:>3} blocks{count:>14,d}")
    return counts


def cmd_pretrain(args):
    cfg = train_config_from_args(args)
    if args.report_params:
        report_params(cfg)
        return 0
    if not args.data:
        raise UsageError("pretrain: --data is required (or use --report-params)")

    out = Path(args.out)
    ckpt = None
    if args.resume:
        # a resumed run keeps the checkpoint's configuration
        ckpt = load_checkpoint(args.resume)
        overrides = {k: getattr(args, k) for k in ("epochs", "max_steps", "workers") if getattr(args, k) is not None}
        cfg = TrainConfig.from_dict({**ckpt.meta["train_config"], **overrides})
    config.write_resolved_config({**cfg.to_dict(), "data": args.data}, out)
    dataset = open_data(args.data, cfg.image_size, cfg.seed)
    _write_load_report(dataset, out)
    print(f"Pretraining on {len(dataset)} images from '{args.data}'...")
    if ckpt is not None:
        trainer = Trainer.resume(ckpt, dataset, out, _progress(args), **overrides)
        result = trainer.run()
    else:
        result = pretrain(dataset, cfg, out, _progress(args))
    final = save_checkpoint(result.checkpoint, out / "final.ckpt")
    if result.metrics:
        last = result.metrics[-1]
        print(f"Final epoch {last['epoch']}: contrastive loss {last['contrastive_loss']:.4f}")
    print(f"Done. Checkpoint written to '{final}'")
    return 0


def cmd_linear_eval(args):
    ckpt = load_checkpoint(args.checkpoint)
    train_cfg = ckpt.meta["train_config"]
    seed = args.seed if args.seed is not None else train_cfg["seed"]
    probe_cfg = ProbeConfig(steps=args.steps, learning_rate=args.lr, test_fraction=args.test_fraction,
                            runs=args.runs, seed=seed, init=args.init)
    out = Path(args.out)
    config.write_resolved_config({"checkpoint": args.checkpoint, "data": args.data,
                                  "probe": asdict(probe_cfg), "train_config": train_cfg}, out.parent)
    dataset = open_data(args.data, train_cfg["image_size"], seed)
    _write_load_report(dataset, out.parent)
    print(f"Linear evaluation of '{args.checkpoint}' on {len(dataset)} images...")
    result = linear_eval(ckpt, dataset, probe_cfg, args.workers, _progress(args))
    result.write_csv(out)
    if args.features:
        extract_features(ckpt, dataset, args.features, args.workers)
        print(f"Representations written to '{args.features}'")
    print(f"Top-1 accuracy over {len(result.accuracies)} runs: {result.top1:.4f}")
    return 0


def cmd_scatter_export(args):
    cfg = ScatterConfig(J=args.scales, L=args.orientations, order=args.order, pad_policy=args.pad_policy)
    bank = build_filter_bank(FilterBankConfig(J=args.scales, L=args.orientations,
                                              size=padded_side(args.image_size, args.image_size)))
    out = Path(args.out)
    config.write_resolved_config({"data": args.data, "scatter": asdict(cfg), "image_size": args.image_size,
                                  "seed": args.seed or 0}, out.parent)
    dataset = open_data(args.data, args.image_size, args.seed or 0)
    _write_load_report(dataset, out.parent)
    print(f"Scattering {len(dataset)} images (J={cfg.J}, L={cfg.L}, order {cfg.order})...")
    count = export_coefficients(iter(dataset), bank, cfg, out, args.workers)
    print(f"Done. {count} rows written to '{out}'")
    return 0


def cmd_filters_dump(args):
    bank = build_filter_bank(FilterBankConfig(J=args.scales, L=args.orientations, size=args.size))
    out = Path(args.out)
    config.write_resolved_config({"J": args.scales, "L": args.orientations, "size": args.size}, out)
    written = dump_filters(bank, out, mosaic=args.mosaic)
    print(f"Wrote {len(written)} filter images to '{out}'")
    if args.report:
        path = write_filter_report(bank, args.report)
        print(f"Filter report saved to '{path}'")
    return 0


def cmd_augment_preview(args):
    image = read_image(args.input)
    h, w = image.shape[:2]
    side = args.image_size or (max(h, w) if h != w else None)
    if side:
        image = lanczos_resize(image, side, side)
    policy = AugPolicy.named(args.policy, seed=args.seed or 0)
    out = Path(args.out)
    config.write_resolved_config({"input": args.input, "policy": args.policy, "pretext": args.pretext,
                                  "seed": args.seed or 0, "image_size": side}, out)
    written = preview(image, policy, args.seed or 0, out, pretext=args.pretext)
    for path in written:
        print(f"  {path}")
    return 0


def cmd_sweep(args):
    base = train_config_from_args(args)
    if args.epochs is None:
        base = replace(base, epochs=0)
    scales = args.scale_grid or [base.J]
    orientations = args.orientation_grid or [base.L]
    blocks = args.block_grid or [base.block_count]
    out = Path(args.out)
    config.write_resolved_config({**base.to_dict(), "data": args.data, "scales": scales,
                                  "orientations": orientations, "blocks": blocks}, out.parent)
    dataset = open_data(args.data, base.image_size, base.seed) if args.data else None
    probe_cfg = ProbeConfig(steps=args.probe_steps, runs=args.probe_runs, seed=base.seed)

    rows = []
    for J in scales:
        for L in orientations:
            for block_count in blocks:
                cfg = replace(base, J=J, L=L, block_count=block_count)
                channels = 3 * channel_count(J, L, cfg.order)
                row = {"J": J, "L": L, "block_count": block_count, "channels": channels,
                       "adapter_parameters": adapter_parameter_count(cfg.adapter_config, channels),
                       "final_contrastive_loss": "", "probe_top1": ""}
                if dataset is not None:
                    if cfg.epochs > 0:
                        result = pretrain(dataset, cfg)
                        ckpt = result.checkpoint
                        if result.metrics and result.metrics[-1]["contrastive_loss"] is not None:
                            row["final_contrastive_loss"] = f"{result.metrics[-1]['contrastive_loss']:.6f}"
                    else:
                        trainer = Trainer(cfg, dataset)
                        trainer.fit_statistics()
                        ckpt = trainer.checkpoint()
                    if dataset.labels is not None:
                        row["probe_top1"] = f"{linear_eval(ckpt, dataset, probe_cfg).top1:.6f}"
                logger.info("sweep cell J=%d L=%d blocks=%d done", J, L, block_count)
                rows.append(row)

    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=SWEEP_HEADER)
        writer.writeheader()
        writer.writerows(rows)
    print(f"Done. {len(rows)} sweep rows written to '{out}'")
    return 0


def render_reference(parser):
    """Markdown reference of every subcommand and flag."""
    lines = [f"# scatsimclr {__version__} command reference", ""]
    sub_action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for name, sub in sub_action.choices.items():
        lines += [f"## {name}", "", sub.description or "", "", "| flag | default | description |",
                  "|---|---|---|"]
        for action in sub._actions:
            if not action.option_strings or action.dest == "help":
                continue
            flag = ", ".join(f"`{s}`" for s in action.option_strings)
            default = "" if action.default in (None, False, argparse.SUPPRESS) else f"`{action.default}`"
            lines.append(f"| {flag} | {default} | {(action.help or '').replace('|', '/')} |")
        lines.append("")
    return "\n".join(lines)


def cmd_reference(args, parser):
    text = render_reference(parser)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n", encoding="utf-8")
        print(f"Reference written to '{out}'")
    else:
        print(text)
    return 0


COMMANDS = {
    "pretrain": cmd_pretrain,
    "linear-eval": cmd_linear_eval,
    "scatter-export": cmd_scatter_export,
    "filters-dump": cmd_filters_dump,
    "augment-preview": cmd_augment_preview,
    "sweep": cmd_sweep,
}


def main(argv=None):
    """Run one subcommand; returns 0 on success, 1 on usage errors, 2 on runtime errors."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return 1
        configure_logging(args)
        if args.command == "reference":
            return cmd_reference(args, parser)
        return COMMANDS[args.command](args)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 0
    except (UsageError, ConfigurationError) as e:
        print(f"Usage error: {e}", file=sys.stderr)
        return 1
    except (ScatSimCLRError, OSError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

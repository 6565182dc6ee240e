"""Command-line entry point.

    ntmask pretrain          --config pre.json
    ntmask protect           --config sa.json --set hparams.lambda=0.2
    ntmask verify-ownership  --config owner.json
    ntmask evaluate          --checkpoint source.ckpt --mask run/mask.ckpt --domains mnist mnist-color
    ntmask report            runs/a runs/b

Exit codes: 0 success, 1 run failure, 2 invalid command or config.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import data as D
from .evaluation import MetricsReport, format_table
from .model_core import Checkpoint, MaskedNetwork, network_from_checkpoint
from .pipelines import ConfigError, ExperimentConfig, apply_overrides, evaluate_model, run_experiment

log = logging.getLogger("ntmask")

EXIT_OK, EXIT_RUN, EXIT_CONFIG = 0, 1, 2
VERB_MODES = {"pretrain": ("pretrain",), "protect": ("sa", "sf", "df"), "verify-ownership": ("ownership",)}


@dataclass
class CliCommand:
    verb: str
    config: str | None = None
    overrides: list[str] = field(default_factory=list)
    seed: int | None = None
    out_dir: str | None = None
    args: argparse.Namespace | None = None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ntmask", description="Learn binary weight masks that keep a model "
                                "accurate on its source domain and useless elsewhere.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="verb", required=True)
    for verb, help_ in (("pretrain", "train the source classifier"),
                        ("protect", "learn a mask (mode sa, sf or df)"),
                        ("verify-ownership", "learn a mask that fails on watermarked inputs")):
        s = sub.add_parser(verb, help=help_)
        s.add_argument("--config", help="JSON experiment config")
        s.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted override, e.g. hparams.lambda=0.2 (repeatable)")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", dest="out_dir", help="run directory")
        s.add_argument("--resume", action="store_true", help="continue from out_dir/state.pt")
    e = sub.add_parser("evaluate", help="accuracy of a (masked) model on domains")
    e.add_argument("--checkpoint", required=True, help="source network checkpoint")
    e.add_argument("--mask", help="mask checkpoint; omit to evaluate the unmasked network")
    e.add_argument("--domains", nargs="+", required=True)
    e.add_argument("--split", default="test", choices=D.SPLITS)
    e.add_argument("--limit", type=int)
    r = sub.add_parser("report", help="compare finished runs")
    r.add_argument("runs", nargs="+", help="run directories or metrics.json files")
    return p


def parse_and_validate(argv: list[str]) -> tuple[CliCommand, ExperimentConfig | None]:
    """Parse argv; for training verbs also load, override and validate the config."""
    args = build_parser().parse_args(argv)
    cmd = CliCommand(args.verb, getattr(args, "config", None), getattr(args, "overrides", []),
                     getattr(args, "seed", None), getattr(args, "out_dir", None), args)
    if args.verb not in VERB_MODES:
        return cmd, None
    raw: dict = {}
    if cmd.config:
        try:
            raw = json.loads(Path(cmd.config).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {cmd.config} not found") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"{cmd.config}: invalid JSON ({e})") from None
    raw = apply_overrides(raw, cmd.overrides)
    if cmd.seed is not None:
        raw["seed"] = cmd.seed
    if cmd.out_dir is not None:
        raw["out_dir"] = cmd.out_dir
    if args.verb != "protect":
        raw.setdefault("mode", VERB_MODES[args.verb][0])
    cfg = ExperimentConfig.from_dict(raw)
    if cfg.mode not in VERB_MODES[args.verb]:
        raise ConfigError(f"mode: `{args.verb}` accepts {VERB_MODES[args.verb]}, got {cfg.mode!r}")
    return cmd, cfg.validate()


def _print_report(name: str, report: MetricsReport) -> None:
    print(format_table({name: report}))
    for k, v in report.summary().items():
        print(f"  {k} = {v}")


def _evaluate(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    net = network_from_checkpoint(ckpt)
    if args.mask:
        m = MaskedNetwork(net)
        m.load_scores(Checkpoint.load(args.mask).tensors)
        net = m
    sets = [D.conform(D.load_domain(d, args.split, args.limit), net.spec.input_shape) for d in args.domains]
    acc = evaluate_model(net, sets)
    for s in sets:
        a = acc[s.domain]
        print(f"{s.domain:<16} {float(a) * 100:6.2f}%  ({int(a * len(s))}/{len(s)})")
    return EXIT_OK


def _report(args) -> int:
    reports = {}
    for r in args.runs:
        path = Path(r)
        if path.is_dir():
            path = path / "metrics.json"
        reports[path.parent.name] = MetricsReport.load(path)
    print(format_table(reports))
    return EXIT_OK


def run(cmd: CliCommand, cfg: ExperimentConfig | None) -> int:
    if cmd.verb == "evaluate":
        return _evaluate(cmd.args)
    if cmd.verb == "report":
        return _report(cmd.args)
    if cfg.mode == "pretrain":
        ckpt = run_experiment(cfg)
        print(json.dumps(ckpt.meta.get("test_accuracy")))
        print(f"checkpoint: {Path(cfg.out_dir) / 'source.ckpt'}")
        return EXIT_OK
    report = run_experiment(cfg, resume=cmd.args.resume)
    _print_report(Path(cfg.out_dir).name, report)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    verbose = "-v" in argv or "--verbose" in argv
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cmd, cfg = parse_and_validate(argv)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    try:
        return run(cmd, cfg)
    except (ConfigError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:
        log.debug("run failed", exc_info=True)
        print(f"run failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point.

Every subcommand works inside one run directory. Configuration is resolved
as defaults, then the config file, then flags (``--scenario``, ``--seed``,
``--set key=value``), later sources winning. The config file is ``--config``
when given, otherwise ``<run dir>/config.txt`` if a previous stage wrote one,
so the stages of a run share one configuration. The resolved configuration
is written back to ``<run dir>/config.txt`` on every invocation.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from . import checkpoint as ckpt
from .data import SCENARIOS
from .experiments import (ExperimentConfig, RunPaths, load_data, parse_overrides, require,
                          run_quickstart, stage_ablate, stage_analyze_policy, stage_evaluate,
                          stage_generate, stage_train_adafuse, stage_train_baselines,
                          stage_train_dynmm, stage_train_moe)

OUTPUT_ROOT_ENV = "ADAFUSE_OUTPUT_ROOT"
DEFAULT_RUN_NAME = "run"

logger = logging.getLogger("adafuse")


def default_run_dir() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "adafuse-runs")) / DEFAULT_RUN_NAME


def resolve_config(args: argparse.Namespace, paths: RunPaths) -> ExperimentConfig:
    cfg = ExperimentConfig()
    source = Path(args.config) if args.config else paths.config
    if args.config:
        require(source, "config file")
    if source.exists():
        cfg = ExperimentConfig.load(source)
    overrides = {}
    if args.scenario is not None:
        if args.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {args.scenario!r}; "
                             f"choose from {', '.join(sorted(SCENARIOS))}")
        overrides["scenario.name"] = args.scenario
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    overrides.update(parse_overrides(args.set or []))
    return cfg.with_overrides(overrides) if overrides else cfg


def _load_bank(paths: RunPaths):
    return ckpt.load_bank(require(paths.bank, "baseline checkpoint"))[0]


def cmd_generate(cfg, paths, args) -> str:
    train, test = stage_generate(cfg, paths)
    return f"wrote {len(train)} training and {len(test)} test records to {paths.train.parent}"


def cmd_train_baselines(cfg, paths, args) -> str:
    train, _ = load_data(paths)
    stage_train_baselines(cfg, train, paths)
    return f"wrote {paths.bank} and {paths.baseline_metrics}"


def cmd_train_adafuse(cfg, paths, args) -> str:
    train, _ = load_data(paths)
    res = stage_train_adafuse(cfg, train, _load_bank(paths), paths)
    return (f"best epoch {res.best_epoch}, val AUC {res.best_val_auc:.4f}; "
            f"wrote {paths.adafuse} and {paths.metrics_log}")


def cmd_train_moe(cfg, paths, args) -> str:
    train, _ = load_data(paths)
    stage_train_moe(cfg, train, _load_bank(paths), paths)
    return f"wrote {paths.moe}"


def cmd_train_dynmm(cfg, paths, args) -> str:
    train, _ = load_data(paths)
    stage_train_dynmm(cfg, train, _load_bank(paths), paths)
    return f"wrote {paths.dynmm}"


def cmd_evaluate(cfg, paths, args) -> str:
    _, test = load_data(paths)
    report = stage_evaluate(cfg, test, paths, reference=args.reference)
    lines = [f"{'method':<12} {'auc':>7} {'ci_lo':>7} {'ci_hi':>7} {'p':>8} {'mflops':>8}"]
    for m in report.methods:
        p = "" if m.p_value is None else f"{m.p_value:.4f}"
        lines.append(f"{m.name:<12} {m.auc:7.4f} {m.ci[0]:7.4f} {m.ci[1]:7.4f} {p:>8} "
                     f"{m.mflops:8.4f}")
    lines.append(f"wrote {paths.report}")
    return "\n".join(lines)


def cmd_analyze_policy(cfg, paths, args) -> str:
    stats = stage_analyze_policy(paths)
    used = ", ".join(f"{k}={v}" for k, v in stats.histogram.items() if v)
    skips = ", ".join(f"{m}={s:.3f}" for m, s in zip("ABC", stats.skip_rates))
    return f"combos: {used}\nskip rates: {skips}\nwrote {paths.policy_combos}"


def cmd_ablate(cfg, paths, args) -> str:
    train, test = load_data(paths)
    rows = stage_ablate(cfg, train, test, paths, args.grid)
    lines = [f"{r.label:<16} val {r.val_auc:.4f} test {r.test_auc:.4f} combos {r.n_combos}"
             for r in rows]
    lines.append(f"wrote {paths.ablation(args.grid)}")
    return "\n".join(lines)


def cmd_quickstart(cfg, paths, args) -> str:
    run_quickstart(cfg, paths.root)
    return f"quickstart complete in {paths.root}"


COMMANDS = {
    "generate-data": (cmd_generate, "generate the synthetic train/test cohorts"),
    "train-baselines": (cmd_train_baselines, "pretrain encoders and the 15 fusion classifiers"),
    "train-adafuse": (cmd_train_adafuse, "train the modality-selection policy"),
    "train-moe": (cmd_train_moe, "train the mixture-of-experts gate"),
    "train-dynmm": (cmd_train_dynmm, "train the Gumbel-Softmax combo gate"),
    "evaluate": (cmd_evaluate, "AUC, bootstrap CI, DeLong p-value and MFLOPs per method"),
    "analyze-policy": (cmd_analyze_policy, "combo histogram and skip rates of the policy"),
    "ablate": (cmd_ablate, "freeze or objective ablation grid"),
    "quickstart": (cmd_quickstart, "run every stage from data generation to policy analysis"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", type=Path, default=None,
                        help=f"run directory (default: ${OUTPUT_ROOT_ENV}/{DEFAULT_RUN_NAME}, "
                             f"with ${OUTPUT_ROOT_ENV} defaulting to ./adafuse-runs)")
    common.add_argument("--config", default=None, help="key=value config file")
    common.add_argument("--scenario", default=None, help=f"one of {', '.join(sorted(SCENARIOS))}")
    common.add_argument("--seed", type=int, default=None, help="root seed")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field, e.g. loss.lambda_ent=0 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="adafuse", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_)
        if name == "evaluate":
            p.add_argument("--reference", default="adafuse",
                           help="method the DeLong p-values compare against")
        if name == "ablate":
            p.add_argument("--grid", choices=("freeze", "objective"), default="freeze")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        paths = RunPaths(args.out if args.out is not None else default_run_dir())
        cfg = resolve_config(args, paths)
        paths.make()
        cfg.save(paths.config)
        handler = COMMANDS[args.command][0]
        print(handler(cfg, paths, args))
    except (FileNotFoundError, ValueError) as exc:
        print(f"adafuse {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``odefuse <verb> [--config PATH] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import pipeline
from .train import TrainingError

logger = logging.getLogger("odefuse")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2
VERBS = ("prepare", "select", "train", "evaluate", "ablate", "explain", "hyperopt", "run",
         "config")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON pipeline config (default: bundled demo)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", type=Path, default=Path("run"), help="run directory")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="odefuse", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)
    sub.add_parser("prepare", parents=[common], help="clean, engineer and split features")
    sub.add_parser("select", parents=[common], help="choose the feature subset")
    sub.add_parser("train", parents=[common], help="fit the network on the selected features")
    for verb, text in (("evaluate", "score the trained model on the test split"),
                       ("explain", "Shapley attributions for test instances")):
        p = sub.add_parser(verb, parents=[common], help=text)
        p.add_argument("--manifest", type=Path, help="run manifest (default: OUT/run_manifest.json)")
        if verb == "explain":
            p.add_argument("--instance", type=int, default=0, help="test row to explain")
    sub.add_parser("ablate", parents=[common], help="train and score all six path ablations")
    sub.add_parser("hyperopt", parents=[common], help="random search; writes best_config.json")
    sub.add_parser("run", parents=[common], help="prepare, select, train and evaluate in one go")
    sub.add_parser("config", parents=[common], help="print the effective config as JSON")
    return parser


def load_config(args) -> pipeline.PipelineConfig:
    config = pipeline.PipelineConfig.load(args.config) if args.config \
        else pipeline.PipelineConfig()
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    return config


def dispatch(args) -> None:
    config = load_config(args)
    out = args.out
    verb = args.verb
    if verb == "config":
        sys.stdout.write(config.to_json())
    elif verb == "prepare":
        meta = pipeline.cmd_prepare(config, out)
        print(f"prepared {meta['rows']['train']} train / {meta['rows']['test']} test rows, "
              f"{meta['n_features']} features -> {out}")
    elif verb == "select":
        res = pipeline.cmd_select(config, out)
        print("selected: " + ", ".join(res.selected))
    elif verb == "train":
        m = pipeline.cmd_train(config, out)
        print(f"trained {m['n_params']} parameters, best epoch {m['best_epoch']}, "
              f"val MSE {m['best_val_loss']:.6g}")
    elif verb == "evaluate":
        print(pipeline.cmd_evaluate(config, out, args.manifest).to_text(), end="")
    elif verb == "ablate":
        pipeline.cmd_ablate(config, out)
        print((out / "ablation.txt").read_text(), end="")
    elif verb == "explain":
        att, summary = pipeline.cmd_explain(config, out, args.instance, args.manifest)
        print(f"base {att.base_value:.6f} + sum(phi) {att.phi.sum():.6f} "
              f"= prediction {att.prediction:.6f}")
        for name, v in summary.bar_rows():
            print(f"  {name:<28} {v:.6f}")
    elif verb == "hyperopt":
        _, result = pipeline.cmd_hyperopt(config, out)
        print(f"best validation MSE {result.best_score:.6g} with {result.best}")
    elif verb == "run":
        pipeline.cmd_prepare(config, out)
        pipeline.cmd_select(config, out)
        pipeline.cmd_train(config, out)
        print(pipeline.cmd_evaluate(config, out).to_text(), end="")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        dispatch(args)
    except (TrainingError, FloatingPointError, RuntimeError) as exc:
        logger.error("%s", exc)
        return EXIT_RUNTIME
    except (ValueError, KeyError, IndexError, FileNotFoundError) as exc:
        logger.error("%s", exc)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

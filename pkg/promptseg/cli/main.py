"""
Command-line entry point.

Commands: ``train``, ``eval``, ``ablate`` and ``plot``. Every command
accepts ``--config``, ``--set KEY=VALUE`` (repeatable), ``--out`` and
``--seed``. Exit codes: 0 success, 1 sweep finished with failed children,
2 usage or configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
from pathlib import Path
from typing import List, Sequence

from promptseg import __version__
from promptseg.cli.ablate import PRESETS, AblationMatrix, preset, run_sweep
from promptseg.cli.plot import PROJECTIONS, plot_convergence, plot_embeddings
from promptseg.pipeline.checkpoint import load_checkpoint
from promptseg.pipeline.config import RunConfig, load_run_config
from promptseg.pipeline.data import generate_dataset
from promptseg.pipeline.metrics import EvalSource, evaluate
from promptseg.pipeline.train import CONFIG_FILE, train
from promptseg.utils.decorators import timed
from promptseg.utils.display import banner, print_iou_table, print_summary_table
from promptseg.utils.errors import (
    DivergenceError,
    NonFiniteLossError,
    PromptSegError,
)
from promptseg.utils.logs import configure_logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED_CHILDREN = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3

SPLITS = ("train", "val")


def _fail(message: str, code: int) -> int:
    from tinycolors import cprint

    cprint(f"x {message}", as_="bold red")
    return code


def _overrides(args: argparse.Namespace) -> List[str]:
    overrides = list(args.set or [])
    if args.out is not None:
        overrides.append(f"out_dir={args.out}")
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    return overrides


def _run_config(args: argparse.Namespace) -> RunConfig:
    return load_run_config(args.config, _overrides(args))


def cmd_train(args: argparse.Namespace) -> int:
    """
    Train one run and write its checkpoint, metrics log and echoed config.
    """
    cfg = _run_config(args)
    configure_logging(cfg.run_dir)
    banner(f"promptseg {__version__} :: train", f"run {cfg.run_dir}")

    result, seconds = timed(train)(cfg)

    summary = {
        "final_miou": result.final,
        "text_encoder_hash": {"before": result.text_encoder_hash[0],
                              "after": result.text_encoder_hash[1]},
        "seconds": seconds,
    }
    with open(result.run_dir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)

    print_summary_table(["metric", "value"], [
        *[(f"{k} mIoU (%)", f"{100.0 * v:.2f}") for k, v in result.final.items()],
        ("checkpoint", result.checkpoint),
        ("seconds", f"{seconds:.1f}"),
    ])
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    """
    Evaluate a checkpoint on one split and write ``eval_<split>_<source>.json``.

    The dataset is regenerated from the ``config.yaml`` next to the
    checkpoint, or from ``--config``/``--set`` when there is none.
    """
    if args.split not in SPLITS:
        return _fail(f"Unknown split {args.split!r}; expected one of: {', '.join(SPLITS)}",
                     EXIT_USAGE)
    source = EvalSource.parse(args.source)

    checkpoint = Path(args.checkpoint)
    model, manifest = load_checkpoint(checkpoint)
    echoed = checkpoint.parent / CONFIG_FILE
    cfg = load_run_config(echoed if echoed.is_file() else args.config, _overrides(args))

    train_split, val_split = generate_dataset(cfg.data)
    split = train_split if args.split == "train" else val_split
    report = evaluate(model, split, source)

    out_dir = Path(args.out) if args.out is not None else checkpoint.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"eval_{args.split}_{source.value}.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({**report.to_dict(), "checkpoint": str(checkpoint),
                   "step": manifest.get("step")}, fh, indent=2)

    banner("promptseg :: eval", f"{checkpoint} on {args.split} ({source.value})")
    print_iou_table(report.per_class, report.miou)
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    """
    Run an ablation matrix; children land under the base config's run
    directory.
    """
    base = _run_config(args)
    if args.matrix is not None:
        matrix = AblationMatrix.load(args.matrix)
    else:
        matrix = preset(args.preset)
    if args.seeds:
        matrix = AblationMatrix(matrix.rows, list(args.seeds))

    configure_logging(base.run_dir)
    banner("promptseg :: ablate",
           f"{len(matrix.rows)} rows x {len(matrix.seeds)} seeds -> {base.run_dir}")

    summary = run_sweep(base, matrix, base.run_dir, workers=args.workers)
    print_summary_table(
        ["row", "mean val mIoU (%)", "std", "runs", "failed"],
        [(r.row, f"{100.0 * r.mean:.2f}", f"{100.0 * r.std:.2f}", r.runs, r.failures)
         for r in summary.rows],
    )
    if summary.failures:
        return _fail(f"{summary.failures} child run(s) failed; see {base.run_dir / 'summary.json'}",
                     EXIT_FAILED_CHILDREN)
    return EXIT_OK


def cmd_plot(args: argparse.Namespace) -> int:
    """
    Write a convergence or embeddings plot for a finished run.
    """
    run_dir = Path(args.run) if args.run is not None else _run_config(args).run_dir
    if args.kind == "convergence":
        path = plot_convergence(run_dir)
    else:
        path = plot_embeddings(run_dir, args.method)

    from tinycolors import cprint

    cprint(f"Wrote {path}", as_="bold green")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="YAML run configuration")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted override, e.g. train.gamma=0.5 (repeatable)")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--seed", type=int, default=None, help="training seed")

    parser = argparse.ArgumentParser(prog="promptseg",
                                     description="Prompt-conditioned segmentation at desk scale")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    train_cmd = commands.add_parser("train", parents=[common], help="train one run")
    train_cmd.set_defaults(handler=cmd_train)

    eval_cmd = commands.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    eval_cmd.add_argument("--checkpoint", required=True)
    eval_cmd.add_argument("--split", default="val")
    eval_cmd.add_argument("--source", default=EvalSource.DECODER.value,
                          help="decoder or raw-alignment")
    eval_cmd.set_defaults(handler=cmd_eval)

    ablate_cmd = commands.add_parser("ablate", parents=[common], help="run an ablation sweep")
    which = ablate_cmd.add_mutually_exclusive_group(required=True)
    which.add_argument("--matrix", type=Path, help="matrix YAML file")
    which.add_argument("--preset", choices=sorted(PRESETS))
    ablate_cmd.add_argument("--seeds", type=int, nargs="+", default=None)
    ablate_cmd.add_argument("--workers", type=int, default=1)
    ablate_cmd.set_defaults(handler=cmd_ablate)

    plot_cmd = commands.add_parser("plot", parents=[common], help="plot a finished run")
    plot_cmd.add_argument("--run", default=None, help="run directory")
    plot_cmd.add_argument("--kind", choices=("convergence", "embeddings"), default="convergence")
    plot_cmd.add_argument("--method", choices=PROJECTIONS, default="pca")
    plot_cmd.set_defaults(handler=cmd_plot)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    """
    Parse arguments, run the command and map errors to exit codes.
    """
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except (DivergenceError, NonFiniteLossError) as exc:
        logger.error("%s", exc)
        return _fail(str(exc), EXIT_NUMERIC)
    except PromptSegError as exc:
        return _fail(str(exc), EXIT_USAGE)


if __name__ == "__main__":
    raise SystemExit(main())

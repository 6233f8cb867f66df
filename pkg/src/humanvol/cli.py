"""``humanvol`` command line: ``synth``, ``train``, ``infer`` and ``eval``.

Exit codes: 0 success, 1 usage, 2 data or format error, 3 numeric failure.
Logs go to standard error; machine-readable outputs go to files.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from .autodiff import CheckpointFormatError, ShapeError
from .evaluation import (
    evaluate_item,
    extract_mesh,
    infer,
    load_prediction_dir,
    save_prediction,
    write_iou_curves,
    write_report,
)
from .io import GridFormatError
from .losses import NonFiniteLoss
from .meshes import MeshError
from .network import FULL_VOLUME
from .plotting import plot_iou, plot_losses, plot_normals
from .synth import build_corpus, load_corpus
from .training import (
    CheckpointMismatch,
    ConfigError,
    LossLog,
    TrainConfig,
    load_config,
    load_state,
    new_state,
    read_loss_log,
    save_state,
    split_corpus,
    train,
)

log = logging.getLogger("humanvol")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

CHECKPOINT_NAME = "checkpoint.dhck"
LOSS_NAME = "loss.csv"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _resolve_config(args) -> TrainConfig:
    config = load_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        config = TrainConfig(**{**vars(config), "seed": args.seed})
    return config


def _log_config(command: str, config: TrainConfig, **extra) -> None:
    lines = [f"{command}: resolved configuration"] + [f"  {line}" for line in config.render().splitlines()]
    lines += [f"  {k} = {v}" for k, v in extra.items()]
    log.info("\n".join(lines))


def _select(items, split: str, holdout_bodies: int, ids: str | None):
    if ids:
        wanted = [int(s) for s in ids.split(",")]
        by_id = {it.id: it for it in items}
        missing = [i for i in wanted if i not in by_id]
        if missing:
            raise FileNotFoundError(f"items not in corpus: {missing}")
        return [by_id[i] for i in wanted]
    if split == "all":
        return list(items)
    return split_corpus(items, holdout_bodies)[1]


def _item_dir(root: Path, item_id: int) -> Path:
    return root / f"item_{item_id:05d}"


# -- subcommands -------------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.bodies < 1 or args.views < 1:
        raise UsageError("synth: --bodies and --views must be positive")
    seed = 0 if args.seed is None else args.seed
    dims = tuple(n // args.divisor for n in FULL_VOLUME)
    log.info("synth: bodies=%d views=%d divisor=%d dims=%s seed=%d detail=%g out=%s",
             args.bodies, args.views, args.divisor, dims, seed, args.detail, args.out)
    build_corpus(args.out, args.bodies, args.views, dims, seed=seed, detail_amplitude=args.detail)
    return EXIT_OK


def cmd_train(args) -> int:
    config = _resolve_config(args)
    stages = {"1": (1,), "2": (2,), "all": (1, 2)}[args.stage]
    if 2 in stages and 1 not in stages and not args.resume:
        raise UsageError("train: --stage 2 needs --resume with a stage-1 checkpoint")
    _log_config("train", config, stage=args.stage, corpus=args.corpus, out=args.out, resume=args.resume)
    items = load_corpus(args.corpus)
    dims = items[0].dims
    if dims != config.spec.volume_dims:
        raise CheckpointMismatch(f"corpus volume {dims} does not match divisor {config.scale_divisor} "
                                 f"({config.spec.volume_dims})")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        state = load_state(args.resume, config, require_refiner=2 in stages)
        log.info("resumed from %s at iteration %d", args.resume, state.iteration)
    else:
        state = new_state(config)
    loss_path = out / LOSS_NAME
    with LossLog(loss_path, append=bool(args.resume)) as sink:
        train(state, items, config, stages, on_row=sink)
    save_state(out / CHECKPOINT_NAME, state)
    rows = read_loss_log(loss_path)
    if rows:
        plot_losses(rows, out / "loss.png")
    log.info("train: %d iterations logged, checkpoint %s", len(rows), out / CHECKPOINT_NAME)
    return EXIT_OK


def cmd_infer(args) -> int:
    config = _resolve_config(args)
    _log_config("infer", config, checkpoint=args.checkpoint, threshold=args.threshold,
                refine=not args.no_refine, split=args.split, items=args.items)
    if not 0.0 <= args.threshold <= 1.0:
        raise UsageError("infer: --threshold must lie in [0, 1]")
    state = load_state(args.checkpoint)
    items = _select(load_corpus(args.corpus), args.split, config.holdout_bodies, args.items)
    out = Path(args.out)
    for item, pred in zip(items, infer(state.net, items, args.threshold, config.batch)):
        mesh = extract_mesh(pred.occupancy, pred.normal, refine=not args.no_refine)
        save_prediction(_item_dir(out, item.id), pred, mesh)
    log.info("infer: wrote %d predictions to %s", len(items), out)
    return EXIT_OK


def cmd_eval(args) -> int:
    config = _resolve_config(args)
    if (args.checkpoint is None) == (args.predictions is None):
        raise UsageError("eval: give exactly one of --checkpoint or --predictions")
    _log_config("eval", config, checkpoint=args.checkpoint, predictions=args.predictions, split=args.split)
    items = _select(load_corpus(args.corpus), args.split, config.holdout_bodies, None)
    rows = []
    figure_normals = None
    if args.checkpoint:
        state = load_state(args.checkpoint)
        for item, pred in zip(items, infer(state.net, items, args.threshold, config.batch)):
            rows.append(evaluate_item(item, pred))
            figure_normals = figure_normals or (item.normal, pred.normal_raw, pred.normal)
    else:
        root = Path(args.predictions)
        for item in items:
            occ, normal, raw = load_prediction_dir(_item_dir(root, item.id))
            rows.append(evaluate_item(item, occupancy=occ, normal=normal, normal_raw=raw))
            figure_normals = figure_normals or (item.normal, raw, normal)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mean = write_report(out / "report.csv", rows)
    write_iou_curves(out / "iou_curves.csv", rows)
    plot_iou(rows, {r["id"]: r["curve"] for r in rows}, out / "report.png")
    if figure_normals is not None:
        plot_normals(*figure_normals, out / "normals.png")
    print(f"items={len(rows)} iou={mean['iou']:.4f} baseline_iou={mean['baseline_iou']:.4f} "
          f"sil_loss={mean['sil_loss']:.4f} cos_refined={mean['cos_refined']:.4f} "
          f"cos_unrefined={mean['cos_unrefined']:.4f} l2_refined={mean['l2_refined']:.4f} "
          f"l2_unrefined={mean['l2_unrefined']:.4f}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="overrides the configured seed")
    common.add_argument("--config", default=None, help="key = value configuration file")

    parser = _Parser(prog="humanvol", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="build a synthetic corpus")
    p.add_argument("--bodies", type=int, required=True)
    p.add_argument("--views", type=int, default=4)
    p.add_argument("--divisor", type=int, default=4, choices=(1, 2, 4, 8))
    p.add_argument("--detail", type=float, default=0.05, help="clothing wrinkle amplitude")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stage", choices=("1", "2", "all"), default="all")
    p.add_argument("--resume", default=None, help="training checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    for name, func, help_ in (("infer", cmd_infer, "predict occupancy, normals and meshes"),
                              ("eval", cmd_eval, "IoU and normal-error report")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--corpus", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--threshold", type=float, default=0.5)
        p.add_argument("--split", choices=("heldout", "all"), default="heldout" if name == "eval" else "all")
        if name == "infer":
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--items", default=None, help="comma-separated item ids")
            p.add_argument("--no-refine", action="store_true", help="skip normal-guided mesh refinement")
        else:
            p.add_argument("--checkpoint", default=None)
            p.add_argument("--predictions", default=None, help="directory of item_XXXXX prediction folders")
        p.set_defaults(func=func)
    return parser


_DATA_ERRORS = (CheckpointFormatError, CheckpointMismatch, GridFormatError, MeshError, ShapeError,
                FileNotFoundError, OSError, csv.Error, ValueError)


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(message)s", force=True)
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (NonFiniteLoss, FloatingPointError) as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except _DATA_ERRORS as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_DATA
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``diffkg <command> [--config FILE] [--set key=value ...]``.

Commands
--------
synth      write a synthetic raw dataset into ``data_dir``
ingest     k-core filter, split and index raw files into ``data_dir/processed``
train      train on the processed dataset; writes metrics, checkpoint, report
gen-kg     export the denoised KG of a checkpoint as a triplet file
eval       full-rank evaluation of a checkpoint
recommend  top-N items for the given (original) user ids, as JSON lines

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import signal
import sys
import threading
from collections.abc import Callable, Sequence
from pathlib import Path

import numpy as np

from diffkg import numgrad as ng
from diffkg.checkpoint import CheckpointError
from diffkg.config import ConfigError, LoggingConfig, RunConfig, load_run_config, write_resolved_config
from diffkg.diffusion import ScheduleError
from diffkg.evaluator import build_report, format_summary, group_metrics, rank_top_n, write_report
from diffkg.graph import (
    GraphError,
    build_norm_adjacency,
    inject_noise,
    k_core_filter,
    load_dataset,
    load_interactions,
    load_triplets,
    split,
    write_dataset,
    write_triplets,
)
from diffkg.logs import configure_logging
from diffkg.model import DiffKGModel
from diffkg.models import Recommendation
from diffkg.numgrad import NumericalError
from diffkg.synth import write_synthetic
from diffkg.trainer import Trainer

logger = logging.getLogger("diffkg")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

PROCESSED_DIR = "processed"

_stop = threading.Event()


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that reports usage errors with exit code 1."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _handle_signal(signum: int, frame: object) -> None:
    logger.info(
        "Signal %d received; stopping after the current epoch",
        signum,
        extra={"event": "stop_requested"},
    )
    _stop.set()


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def _processed_dir(cfg: RunConfig) -> Path:
    return cfg.data_dir / PROCESSED_DIR


def _build_trainer(cfg: RunConfig) -> Trainer:
    data, kg = load_dataset(_processed_dir(cfg))
    adjacency = build_norm_adjacency(data.train)
    model = DiffKGModel.init(cfg, data.train.n_users, kg, adjacency, np.random.default_rng(cfg.seed))
    return Trainer(model, data, kg, cfg, eval_every=cfg.eval_every)


def _load_trained(cfg: RunConfig) -> Trainer:
    trainer = _build_trainer(cfg)
    checkpoint = cfg.resolved_checkpoint
    if not checkpoint.exists():
        raise FileNotFoundError(f"Checkpoint not found: {checkpoint}")
    trainer.load(checkpoint)
    return trainer


def _evaluate_and_report(cfg: RunConfig, trainer: Trainer) -> None:
    result = trainer.evaluate(cfg.cutoff)
    report = build_report(result, group_metrics(result, trainer.data, cfg.n_groups))
    path = write_report(report, cfg.output_dir / "evaluation.csv")
    logger.info("%s", format_summary(report), extra={"event": "evaluation_summary"})
    logger.info("Evaluation written to %s", path, extra={"event": "evaluation_written"})


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(cfg: RunConfig, args: argparse.Namespace) -> int:
    noise = cfg.noise_ratio if "noise_ratio" in cfg.model_fields_set else None
    write_synthetic(cfg.data_dir, cfg.synth_kind, cfg.seed, noise)
    return EXIT_OK


def cmd_ingest(cfg: RunConfig, args: argparse.Namespace) -> int:
    interactions = load_interactions(cfg.interactions_path or cfg.data_dir / "interactions.txt")
    graph = k_core_filter(interactions, cfg.kcore)
    data = split(graph, cfg.test_ratio, cfg.seed)
    kg = load_triplets(
        cfg.triplets_path or cfg.data_dir / "kg.txt",
        n_items=graph.n_items,
        item_map=graph.item_map,
        drop_unknown_items=True,
    )
    if cfg.noise_ratio > 0:
        kg = inject_noise(kg, cfg.noise_ratio, cfg.seed)
    write_dataset(_processed_dir(cfg), data, kg)
    logger.info(
        "Processed dataset: %d users, %d items, %d train / %d test interactions, %d triplets",
        graph.n_users,
        graph.n_items,
        data.train.n_interactions,
        data.test.n_interactions,
        kg.n_triplets,
        extra={"event": "ingest_completed"},
    )
    return EXIT_OK


def cmd_train(cfg: RunConfig, args: argparse.Namespace) -> int:
    trainer = _build_trainer(cfg)
    _stop.clear()
    previous = {sig: signal.signal(sig, _handle_signal) for sig in (signal.SIGINT, signal.SIGTERM)}
    try:
        trainer.fit(
            metrics_csv=cfg.output_dir / "metrics.csv",
            stop_event=_stop,
            checkpoint_path=cfg.resolved_checkpoint,
        )
    finally:
        for sig, handler in previous.items():
            signal.signal(sig, handler)
    _evaluate_and_report(cfg, trainer)
    return EXIT_OK


def cmd_gen_kg(cfg: RunConfig, args: argparse.Namespace) -> int:
    trainer = _load_trained(cfg)
    kg = trainer.kg_denoised
    path = cfg.output_dir / "kg_denoised.txt"
    path.parent.mkdir(parents=True, exist_ok=True)
    write_triplets(kg, path)
    logger.info(
        "Wrote %d denoised triplets to %s", kg.n_triplets, path, extra={"event": "kg_exported"}
    )
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args: argparse.Namespace) -> int:
    _evaluate_and_report(cfg, _load_trained(cfg))
    return EXIT_OK


def cmd_recommend(cfg: RunConfig, args: argparse.Namespace) -> int:
    trainer = _load_trained(cfg)
    train = trainer.data.train
    user_map = train.user_map
    unknown = [u for u in args.users if u not in user_map]
    if unknown:
        raise GraphError(f"unknown user id(s): {', '.join(str(u) for u in unknown)}")

    dense = np.array([user_map[u] for u in args.users], dtype=np.int64)
    x_u, x_i = trainer.model.final_embeddings(trainer.kg_denoised)
    scores = x_u[dense] @ x_i.T
    top = rank_top_n(scores, train.user_items[dense], cfg.cutoff)
    for row, (user, items) in enumerate(zip(args.users, top)):
        items = items[items >= 0]
        record = Recommendation(
            user=user,
            items=[int(train.item_ids[i]) for i in items],
            scores=[float(scores[row, i]) for i in items],
        )
        print(record.model_dump_json())
    return EXIT_OK


COMMANDS: dict[str, Callable[[RunConfig, argparse.Namespace], int]] = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "train": cmd_train,
    "gen-kg": cmd_gen_kg,
    "eval": cmd_eval,
    "recommend": cmd_recommend,
}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="diffkg", description="Knowledge-graph diffusion recommender.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="run file with key = value lines")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one setting; repeatable",
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        command = sub.add_parser(name, parents=[common])
        if name == "recommend":
            command.add_argument("--users", type=int, nargs="+", required=True)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    configure_logging(LoggingConfig(format="text"))
    args = build_parser().parse_args(argv)

    try:
        cfg = load_run_config(args.config, args.overrides)
    except (ConfigError, FileNotFoundError) as exc:
        logger.critical("Invalid configuration: %s", exc, extra={"event": "config_error"})
        return EXIT_USAGE

    configure_logging(cfg.logging, command=args.command)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    write_resolved_config(cfg, cfg.output_dir / "resolved_config.toml")
    logger.info(
        "Running %s (seed %d, %d-bit)",
        args.command,
        cfg.seed,
        cfg.precision,
        extra={"event": "command_started"},
    )

    try:
        with ng.default_dtype(cfg.dtype):
            return COMMANDS[args.command](cfg, args)
    except (ConfigError, ScheduleError) as exc:
        logger.critical("Invalid configuration: %s", exc, extra={"event": "config_error"})
        return EXIT_USAGE
    except NumericalError as exc:
        logger.critical("Numerical failure: %s", exc, extra={"event": "numerical_error"})
        return EXIT_NUMERICAL
    except (CheckpointError, FileNotFoundError, ValueError) as exc:
        # GraphError, ShapeError and UnicodeDecodeError land here too.
        logger.critical("Data error: %s", exc, extra={"event": "data_error"})
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

"""
Command-line pipeline: synth -> preprocess -> partition -> mine -> train ->
embed -> evaluate -> report, each stage writing into <outdir>/<stage>/.

Copyright (c) 2024 seasonmatch developers
SPDX-License-Identifier: MIT
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import torch

from ..backbone import build_model, load_weights, read_descriptors, save_weights, write_descriptors
from ..dataset import (
    aligned_corpus,
    align,
    default_buffer,
    default_test_segments,
    filter_frames,
    load_traverse,
    make_partition,
    parse_segments,
    partition,
    read_partition,
    synth_corpus,
    write_partition,
    write_synth,
    write_traverse,
)
from ..formats import atomic_path, write_manifest
from ..metric import (
    LOSS_TRIPLET,
    mine_pairs,
    mine_triplets,
    negative_population,
    positive_population,
    read_samples,
    train,
    triplet_population,
    write_samples,
)
from ..retrieval import describe, eval_report, evaluate_descriptors, layer_sweep
from . import report as report_files
from .config import config_keys, load_config, run_config

logger = logging.getLogger(__name__)

STAGES = ("synth", "preprocess", "partition", "mine", "train", "embed", "evaluate", "report")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

THREADS_ENV = "SEASONMATCH_THREADS"


def configure_threads() -> int:
    """
    @brief Apply SEASONMATCH_THREADS to torch; unset means one thread with
           deterministic algorithms.

    @return Number of intra-op threads.
    """
    value = os.environ.get(THREADS_ENV, "").strip()
    if not value:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
        return 1
    try:
        threads = int(value)
    except ValueError as exc:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {value!r}") from exc
    if threads < 1:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {value!r}")
    torch.set_num_threads(threads)
    return threads


def stage_dir(cfg: run_config, stage: str) -> Path:
    # pylint: disable=missing-function-docstring
    return Path(cfg.outdir) / stage


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing {path}: run the '{stage}' stage first")
    return path


def _image_size(cfg: run_config):
    c = cfg.corpus
    if c.height > 0 and c.width > 0 and c.channels > 0:
        return (c.height, c.width, c.channels)
    return None


def load_corpus(cfg: run_config) -> aligned_corpus:
    """
    @brief Reload the aligned corpus written by the preprocess stage.
    """
    listing = _require(stage_dir(cfg, "preprocess") / "traverses.csv", "preprocess")
    rows = pd.read_csv(listing, dtype=str)
    size = _image_size(cfg)
    traverses = [
        load_traverse(listing.parent / row.manifest, season=row.season, image_size=size)
        for row in rows.itertuples(index=False)
    ]
    return aligned_corpus(traverses)


def _load_partition(cfg: run_config) -> partition:
    return read_partition(_require(stage_dir(cfg, "partition") / "partition.txt", "partition"))


def _model_for(cfg: run_config, corpus: aligned_corpus):
    m = cfg.model
    return build_model(
        m.backbone, corpus.image_size(), m.tap or None, m.head_dim, m.subtract_mean, cfg.seed
    )


def _stage_synth(cfg: run_config, outdir: Path) -> None:
    corpus = synth_corpus(cfg.to_synth_config())
    manifests = write_synth(corpus, outdir)
    with atomic_path(outdir / "corpus.txt") as tmp:
        tmp.write_text("".join(f"{p.name}\n" for p in manifests), encoding="utf-8")


def _stage_preprocess(cfg: run_config, outdir: Path) -> None:
    if cfg.corpus.manifests:
        manifests = [Path(p.strip()) for p in cfg.corpus.manifests.split(",") if p.strip()]
    else:
        listing = _require(stage_dir(cfg, "synth") / "corpus.txt", "synth")
        names = listing.read_text(encoding="utf-8").split()
        manifests = [listing.parent / name for name in names]

    size = _image_size(cfg)
    f = cfg.filter
    kept = []
    for path in manifests:
        t = load_traverse(path, image_size=size)
        kept.append(filter_frames(t, f.speed_min, f.darkness_min))
    corpus = align(kept, f.align_tol_m)

    rows = []
    for t in corpus.traverses:
        name = f"{t.season}.csv"
        write_traverse(t, outdir / name)
        rows.append((t.season, name))
    with atomic_path(outdir / "traverses.csv") as tmp:
        pd.DataFrame(rows, columns=["season", "manifest"]).to_csv(tmp, index=False)


def _stage_partition(cfg: run_config, outdir: Path) -> None:
    n = len(load_corpus(cfg))
    p = cfg.partition
    segments = parse_segments(p.test_segments) if p.test_segments else default_test_segments(n)
    buffer = p.buffer if p.buffer is not None else default_buffer(n)
    write_partition(make_partition(n, segments, buffer), outdir / "partition.txt")


def _stage_mine(cfg: run_config, outdir: Path) -> None:
    corpus = load_corpus(cfg)
    split = _load_partition(cfg)
    labeling = cfg.to_labeling()
    exclusion = cfg.mine.negative_exclusion
    populations = [
        ("positive", positive_population(corpus, labeling, split)),
        ("negative", negative_population(corpus, labeling, exclusion, split)),
        ("triplet", triplet_population(corpus, labeling, exclusion, split)),
    ]
    for kind, count in populations:
        logger.info("eligible %s population: %d", kind, count)

    if cfg.train.loss == LOSS_TRIPLET:
        samples = mine_triplets(corpus, labeling, cfg.mine.n_triplets, cfg.seed, exclusion, split)
    else:
        samples = mine_pairs(
            corpus, labeling, cfg.mine.n_pairs, cfg.mine.n_pairs, cfg.seed, exclusion, split
        )
    write_samples(samples, outdir / "samples.csv")
    with atomic_path(outdir / "populations.csv") as tmp:
        pd.DataFrame(populations, columns=["kind", "population"]).to_csv(tmp, index=False)


def _stage_train(cfg: run_config, outdir: Path) -> None:
    corpus = load_corpus(cfg)
    split = _load_partition(cfg)
    samples = read_samples(_require(stage_dir(cfg, "mine") / "samples.csv", "mine"))
    model = _model_for(cfg, corpus)
    if cfg.model.weights:
        load_weights(model, cfg.model.weights, strict=False)
    if cfg.model.subtract_mean:
        total = np.zeros(corpus.image_size()[2], dtype=np.float64)
        for t in corpus.traverses:
            total += t.images(split.train_indices).mean(axis=(0, 1, 2), dtype=np.float64)
        mean = total / len(corpus.traverses)
        model.input_mean.copy_(torch.from_numpy(mean.astype(np.float32)).view(-1, 1, 1))

    log: List[tuple] = []

    def checkpoint(epoch: int, mean_loss: float, seen: int) -> None:
        save_weights(model, outdir / f"epoch_{epoch:03d}.smw")
        log.append((epoch, mean_loss, seen))
        with atomic_path(outdir / "train_log.csv") as tmp:
            frame = pd.DataFrame(log, columns=["epoch", "mean_loss", "samples_seen"])
            frame.to_csv(tmp, index=False)

    train(model, samples, cfg.to_train_config(), corpus, on_epoch=checkpoint)
    save_weights(model, outdir / "model.smw")


def _stage_embed(cfg: run_config, outdir: Path) -> None:
    corpus = load_corpus(cfg)
    split = _load_partition(cfg)
    weights = _require(stage_dir(cfg, "train") / "model.smw", "train")
    model = load_weights(_model_for(cfg, corpus), weights)
    indices = split.test_indices
    descriptors = describe(corpus, model, indices, cfg.eval.source)

    rows = []
    for season, values in descriptors.items():
        name = f"{season}.smd"
        write_descriptors(outdir / name, values)
        rows.append((season, name, cfg.eval.source))
    with atomic_path(outdir / "index.csv") as tmp:
        pd.DataFrame(rows, columns=["season", "file", "source"]).to_csv(tmp, index=False)
    with atomic_path(outdir / "frames.csv") as tmp:
        pd.DataFrame({"frame_index": indices}).to_csv(tmp, index=False)


def _embedded_source(cfg: run_config, listing: Optional[pd.DataFrame] = None) -> str:
    # descriptor source recorded by the embed stage, the configured one before it ran
    if listing is None:
        path = stage_dir(cfg, "embed") / "index.csv"
        listing = pd.read_csv(path, dtype=str) if path.is_file() else None
    if listing is not None and len(listing):
        return str(listing["source"].iloc[0])
    return cfg.eval.source


def _stage_evaluate(cfg: run_config, outdir: Path) -> None:
    source_dir = stage_dir(cfg, "embed")
    listing = pd.read_csv(_require(source_dir / "index.csv", "embed"), dtype=str)
    frames = pd.read_csv(_require(source_dir / "frames.csv", "embed"))["frame_index"]
    descriptors = {
        row.season: read_descriptors(_require(source_dir / row.file, "embed"))
        for row in listing.itertuples(index=False)
    }
    report = evaluate_descriptors(
        descriptors,
        frames.to_numpy(),
        cfg.eval.tolerance,
        cfg.eval.thresholds,
        _embedded_source(cfg, listing),
    )
    report_files.write_fc_matrix(report, outdir / report_files.FC_MATRIX_CSV)
    report_files.write_pr_curve(report.pr_curve, outdir / report_files.PR_CURVE_CSV)
    report_files.write_matches(report, outdir / report_files.MATCHES_DIR)

    taps = cfg.sweep_taps()
    if taps:
        corpus = load_corpus(cfg)
        weights = _require(stage_dir(cfg, "train") / "model.smw", "train")
        model = load_weights(_model_for(cfg, corpus), weights)
        sweep = layer_sweep(corpus, model, taps, frames.to_numpy(), cfg.eval.tolerance)
        report_files.write_comparison(sweep, outdir / report_files.LAYER_SWEEP_CSV)


def _stage_report(cfg: run_config, outdir: Path) -> None:
    source_dir = stage_dir(cfg, "evaluate")
    seasons, matrix = report_files.read_fc_matrix(
        _require(source_dir / report_files.FC_MATRIX_CSV, "evaluate")
    )
    curve = report_files.read_pr_curve(
        _require(source_dir / report_files.PR_CURVE_CSV, "evaluate")
    )
    matches = {}
    for query, reference in matrix:
        path = source_dir / report_files.MATCHES_DIR / f"{query}__{reference}.csv"
        if path.is_file():
            matches[(query, reference)] = report_files.read_matches(path)
    source = _embedded_source(cfg)
    result = eval_report(seasons, matrix, matches, curve, cfg.eval.tolerance, source)
    report_files.emit_report(result, outdir)

    methods = {source: result}
    sweep = source_dir / report_files.LAYER_SWEEP_CSV
    others = dict(report_files.read_comparison(sweep)) if sweep.is_file() else {}
    for method, path in cfg.compare_runs().items():
        others[method] = eval_report(*report_files.read_fc_matrix(path), source=method)
    for method, other in others.items():
        if method in methods:
            raise ValueError(f"method {method!r} appears twice in the comparison")
        methods[method] = other
    if len(methods) > 1:
        report_files.emit_comparison(methods, outdir)


_STAGE_FUNCS: Dict[str, Callable[[run_config, Path], None]] = {
    "synth": _stage_synth,
    "preprocess": _stage_preprocess,
    "partition": _stage_partition,
    "mine": _stage_mine,
    "train": _stage_train,
    "embed": _stage_embed,
    "evaluate": _stage_evaluate,
    "report": _stage_report,
}


def run_stage(name: str, cfg: run_config) -> Path:
    """
    @brief Run one stage and record its MANIFEST.sha256.

    @param name: One of STAGES.
    @param cfg: Run configuration.

    @return Stage output directory.
    """
    if name not in _STAGE_FUNCS:
        raise ValueError(f"unknown stage {name!r}; choose from {', '.join(STAGES)}")
    outdir = stage_dir(cfg, name)
    outdir.mkdir(parents=True, exist_ok=True)
    logger.info("stage %s -> %s", name, outdir)
    _STAGE_FUNCS[name](cfg, outdir)
    write_manifest(outdir)
    return outdir


def run_subcommand(name: str, cfg: run_config) -> int:
    """
    @brief Run a stage, turning failures into an exit status and a one-line
           diagnostic on stderr.

    @return 0 ok, 1 usage, 2 data error, 3 numerical failure.

    Usage:
        status = run_subcommand("evaluate", load_config("run.cfg"))
    """
    if name not in _STAGE_FUNCS:
        sys.stderr.write(f"seasonmatch: unknown subcommand {name!r}\n")
        return EXIT_USAGE
    try:
        run_stage(name, cfg)
    except FloatingPointError as exc:
        logger.debug("stage %s failed", name, exc_info=True)
        sys.stderr.write(f"seasonmatch {name}: numerical failure: {exc}\n")
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError, IndexError, RuntimeError) as exc:
        logger.debug("stage %s failed", name, exc_info=True)
        sys.stderr.write(f"seasonmatch {name}: error: {exc}\n")
        return EXIT_DATA
    return EXIT_OK


class _parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# flag -> (config key, type)
_FLAGS = (
    ("--outdir", "outdir", str),
    ("--seed", "seed", int),
    ("--manifests", "corpus.manifests", str),
    ("--speed-min", "filter.speed_min", float),
    ("--darkness-min", "filter.darkness_min", float),
    ("--align-tol-m", "filter.align_tol_m", float),
    ("--buffer", "partition.buffer", int),
    ("--test-segments", "partition.test_segments", str),
    ("--loss", "train.loss", str),
    ("--epochs", "train.epochs", int),
    ("--margin", "train.margin", float),
    ("--lr", "train.lr", float),
    ("--batch-size", "train.batch_size", int),
    ("--n-pairs", "mine.n_pairs", int),
    ("--n-triplets", "mine.n_triplets", int),
    ("--tolerance", "eval.tolerance", int),
    ("--log-level", "log.level", str),
)


def build_parser() -> argparse.ArgumentParser:
    # pylint: disable=missing-function-docstring
    parser = _parser(
        prog="seasonmatch",
        description="Cross-season place recognition pipeline.",
        epilog=f"{THREADS_ENV} caps torch threads; unset runs single-threaded and deterministic.",
    )
    parser.add_argument("subcommand", choices=STAGES + ("all",), help="stage to run")
    parser.add_argument("--config", help="flat 'section.key = value' config file")
    for flag, key, kind in _FLAGS:
        parser.add_argument(flag, dest=key, type=kind, default=None, help=f"config key {key}")
    parser.add_argument(
        "--fine-tune", dest="train.fine_tune", action="store_const", const=True, default=None,
        help="config key train.fine_tune",
    )
    parser.add_argument(
        "--set", dest="extra", action="append", default=[], metavar="KEY=VALUE",
        help="set any config key, e.g. --set synth.n_places=100",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, object]:
    values: Dict[str, object] = {}
    for item in args.extra:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        values[key.strip()] = value
    keys = config_keys()
    for key, value in vars(args).items():
        if key in keys and value is not None:
            values[key] = value
    return values


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    @brief Console entry point: seasonmatch <subcommand> --config <file> [overrides]
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, _overrides(args))
        level = "DEBUG" if args.verbose else cfg.log.level.upper()
        if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ValueError(f"unknown log level {cfg.log.level!r}")
        logging.basicConfig(
            level=level,
            stream=sys.stderr,
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        )
        configure_threads()
    except ValueError as exc:
        sys.stderr.write(f"seasonmatch: usage error: {exc}\n")
        return EXIT_USAGE

    if args.subcommand == "all":
        # external manifests replace the synthetic corpus
        stages = tuple(s for s in STAGES if s != "synth" or not cfg.corpus.manifests)
    else:
        stages = (args.subcommand,)
    for name in stages:
        status = run_subcommand(name, cfg)
        if status != EXIT_OK:
            return status
    return EXIT_OK

#!/usr/bin/env python3
"""
Noisy-label light field saliency

Command-line tool for generating synthetic light field corpora, training saliency networks on
noisy labels, evaluating them and analyzing forgetting behaviour.
"""

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from . import __version__
from .checkpoint_manager import CheckpointManager, read_checkpoint
from .corpus_manager import CorpusManager
from .evalkit import (MetricReport, cross_scene_correlation, forgetting_analysis, label_quality, predict,
                      render_map, write_correlation_report, write_forgetting_report,
                      write_metric_report)
from .exceptions import (AnalysisError, CheckpointError, ConfigError, CorpusLoadError, DimensionError,
                         ForgettingStateError, SaliencyError)
from .experiments import delta_sweep
from .forgetting import ForgettingState
from .fusion import ArchitectureConfig, build_network
from .synthdata import FocalStackSample, GenConfig, generate_corpus
from .trainer import DTYPES, TrainConfig, Trainer, Variant, training_views

LOG_LEVEL_ENV = "NLFSAL_LOG_LEVEL"
MANIFEST_FILE = "manifest.jsonl"
RUN_FILE = "run.json"
# Entries of an output directory that do not count as previous outputs
KEPT = {MANIFEST_FILE, "logs"}


def setup_logging(log_dir: Path, command: str, verbose: bool = False) -> Path:
    """Configure application logging to a timestamped file and the console"""
    log_dir.mkdir(parents=True, exist_ok=True)
    log_file = log_dir / f"{command}_{datetime.now().strftime('%Y%m%d_%H%M%S')}.log"
    level_name = os.environ.get(LOG_LEVEL_ENV, "INFO").upper()
    level = logging.DEBUG if verbose else getattr(logging, level_name, logging.INFO)

    logging.basicConfig(
        level=level,
        format="%(asctime)s - %(levelname)s - %(message)s",
        handlers=[
            logging.FileHandler(log_file),
            logging.StreamHandler()
        ],
        force=True,
    )
    return log_file


@dataclass
class RunManifest:
    """One line of manifest.jsonl"""
    command: str
    argv: list[str]
    output_dir: str
    version: str = __version__
    config_path: str | None = None
    config_sha256: str | None = None
    effective_config: dict[str, Any] = field(default_factory=dict)
    seed: int | None = None
    started: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    finished: str | None = None
    exit_status: int | None = None

    def record_config(self, path: str | None, sha256: str | None, config: dict[str, Any],
                      seed: int | None) -> None:
        self.config_path = path
        self.config_sha256 = sha256
        self.effective_config = config
        self.seed = seed

    def append(self, path: Path, status: int) -> None:
        self.finished = datetime.now(timezone.utc).isoformat()
        self.exit_status = status
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(asdict(self), sort_keys=True) + "\n")


def load_config(path: str | None) -> tuple[dict[str, Any], str | None]:
    """Read a JSON config; returns ({}, None) when no path is given"""
    if path is None:
        return {}, None
    config_path = Path(path)
    if not config_path.is_file():
        raise ConfigError(f"Config file '{path}' not found. Pass an existing JSON file with --config "
                          "or omit the option to use the defaults.")
    raw = config_path.read_bytes()
    try:
        data = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ConfigError(f"Config file '{path}' is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"Config file '{path}' must hold a JSON object")
    return data, hashlib.sha256(raw).hexdigest()


def has_outputs(directory: Path) -> bool:
    return directory.is_dir() and any(p.name not in KEPT for p in directory.iterdir())


def clear_outputs(directory: Path) -> None:
    for p in sorted(directory.iterdir()):
        if p.name in KEPT:
            continue
        if p.is_dir():
            shutil.rmtree(p)
        else:
            p.unlink()
    logging.info(f"Cleared previous outputs in {directory}")


def _prepare_output(directory: Path, force: bool, keep: bool = False) -> None:
    if has_outputs(directory) and not keep:
        if not force:
            raise ConfigError(f"Output directory '{directory}' is not empty. Use --force to "
                              "overwrite it.")
        clear_outputs(directory)
    directory.mkdir(parents=True, exist_ok=True)


def _read_split(corpus: Path, split: str | None) -> list[FocalStackSample]:
    samples = CorpusManager(corpus).read_corpus(split)
    if not samples:
        raise CorpusLoadError(f"no {split or 'corpus'} samples found", corpus)
    return samples


def cmd_gen(args: argparse.Namespace, manifest: RunManifest) -> int:
    """Generate a synthetic corpus"""
    data, sha = load_config(args.config)
    config = GenConfig.from_dict(data)
    manifest.record_config(args.config, sha, config.to_dict(), args.seed)
    out = Path(args.out)
    manager = CorpusManager(out)
    if has_outputs(out):
        if not args.force:
            raise ConfigError(f"Output directory '{out}' is not empty. Use --force to overwrite it.")
        manager.clear()
    samples = generate_corpus(config, args.seed)
    manager.write_corpus(samples, description={"config": config.to_dict(), "seed": args.seed},
                         progress_callback=lambda p: logging.debug(f"Writing corpus: {p}%"))
    return 0


def _train_config(args: argparse.Namespace, data: dict[str, Any],
                  sample: FocalStackSample) -> TrainConfig:
    overrides = {"variant": args.variant, "delta": args.delta, "alpha": args.alpha, "a": args.a,
                 "m_l": args.ml, "epochs": args.epochs, "lr": args.lr, "seed": args.seed}
    data = dict(data)
    data.update({k: v for k, v in overrides.items() if v is not None})
    architecture = dict(data.get("architecture") or {})
    architecture.setdefault("k", sample.k)
    architecture.setdefault("channels", int(sample.all_focus.shape[0]))
    data["architecture"] = architecture
    return TrainConfig.from_dict(data)


def cmd_train(args: argparse.Namespace, manifest: RunManifest) -> int:
    """Train one variant on a corpus"""
    data, sha = load_config(args.config)
    corpus = Path(args.corpus)
    train_samples = _read_split(corpus, "train")
    eval_samples = CorpusManager(corpus).read_corpus("eval")
    config = _train_config(args, data, train_samples[0])
    manifest.record_config(args.config, sha, config.to_dict(), config.seed)
    out = Path(args.out)
    _prepare_output(out, args.force, keep=args.resume is not None)

    run = {"corpus": str(corpus.resolve()), "config": config.to_dict(),
           "config_hash": config.config_hash(), "variant": config.variant, "version": __version__}
    for name, payload in ((RUN_FILE, run), ("config.json", config.to_dict())):
        with open(out / name, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")

    trainer = Trainer(training_views(train_samples), config, eval_samples, out)
    if args.resume is not None:
        trainer.resume(args.resume)
    record = trainer.train(status_callback=logging.debug, log_callback=logging.info)
    if not record.forgetting_enabled:
        logging.info(f"Variant {record.variant}: pixel forgetting disabled")
    return 0


def cmd_eval(args: argparse.Namespace, manifest: RunManifest) -> int:
    """Evaluate a checkpoint against clean masks"""
    checkpoint = read_checkpoint(args.ckpt)
    architecture = ArchitectureConfig.from_dict(checkpoint.state.get("architecture"))
    train_config = checkpoint.state.get("train_config", {})
    dtype = DTYPES[train_config.get("dtype", "float32")]
    batch_size = int(train_config.get("batch_size", 8))
    manifest.record_config(str(args.ckpt), checkpoint.config_hash, train_config, train_config.get("seed"))

    samples = _read_split(Path(args.corpus), None if args.split == "all" else args.split)
    for sample in samples:
        h, w = sample.clean_mask.shape
        if (sample.k, sample.all_focus.shape[0]) != (architecture.k, architecture.channels) \
                or h % architecture.divisor or w % architecture.divisor:
            raise CheckpointError(
                f"Checkpoint architecture (k={architecture.k}, channels={architecture.channels}, "
                f"sides divisible by {architecture.divisor}) does not fit sample {sample.sample_id} "
                f"(k={sample.k}, {h}x{w})")
    network, params = build_network(architecture, 0, dtype)
    try:
        params.load_state(checkpoint.params)
    except DimensionError as e:
        raise CheckpointError(f"checkpoint parameters do not match its architecture: {e}") from e

    out = Path(args.out)
    _prepare_output(out, args.force)
    outputs = predict(network, samples, dtype, batch_size)
    report = MetricReport()
    for sample, maps in zip(samples, outputs):
        report.add(sample.sample_id, maps["s_i"], sample.clean_mask)
        if args.save_maps:
            render_map(maps["s_i"], out / "maps" / f"{sample.sample_id}.pgm")
            if args.stages:
                render_map(maps["s_f"], out / "maps" / f"{sample.sample_id}_s_f.pgm")
                render_map(maps["s_r"], out / "maps" / f"{sample.sample_id}_s_r.pgm")
    write_metric_report(out / "metrics.csv", report)
    write_metric_report(out / "label_quality.csv", label_quality(samples))
    logging.info(f"Evaluated {report.count} samples: F {report.mean_f:.4f}, MAE {report.mean_mae:.4f}")
    return 0


def _read_run(run_dir: Path) -> dict[str, Any]:
    path = run_dir / RUN_FILE
    if not path.is_file():
        raise AnalysisError(f"'{run_dir}' is not a training run directory ({RUN_FILE} missing)")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def cmd_analyze(args: argparse.Namespace, manifest: RunManifest) -> int:
    """Run one analysis on a training run or corpus"""
    run_dir = Path(args.run) if args.run else None
    run = _read_run(run_dir) if run_dir is not None else None
    if args.corpus:
        corpus = Path(args.corpus)
    elif run is not None:
        corpus = Path(run["corpus"])
    else:
        raise ConfigError("analyze needs --run or --corpus")
    out = Path(args.out) if args.out else (run_dir or corpus) / "analysis"
    manifest.record_config(None, run["config_hash"] if run else None,
                           run["config"] if run else {}, run["config"]["seed"] if run else None)

    if args.analysis == "correlation":
        report = cross_scene_correlation(_read_split(corpus, "train"))
        write_correlation_report(out / "correlation.csv", report)
        logging.info(f"Correlation: {len(report.rows)} scenes, {report.omitted} without noisy pixels")
        return 0

    if run is None or run_dir is None:
        raise ConfigError(f"analyze {args.analysis} needs --run")
    if args.analysis == "forgetting":
        manager = CheckpointManager(run_dir)
        if not manager.has_latest():
            raise AnalysisError(f"run '{run_dir}' has no checkpoint to analyze")
        checkpoint = manager.load()
        if checkpoint.forgetting is None:
            raise AnalysisError(f"Run '{run_dir}' was trained with variant '{run['variant']}', which "
                                "logs no forgetting state. Train with variant pfm or full.")
        try:
            state = ForgettingState.from_tensors(checkpoint.forgetting)
        except ForgettingStateError as e:
            raise AnalysisError(f"forgetting log is incomplete: {e}") from e
        report = forgetting_analysis(state, _read_split(corpus, "train"), checkpoint.epoch)
        write_forgetting_report(out, report)
        logging.info(f"Forgetting analysis over {checkpoint.epoch} epochs written to {out}")
        return 0

    config = TrainConfig.from_dict(run["config"])
    if args.epochs is not None:
        config.epochs = args.epochs
        config.validate()
    samples = CorpusManager(corpus).read_corpus()
    train_samples = [s for s in samples if s.split == "train"]
    eval_samples = [s for s in samples if s.split == "eval"]
    delta_sweep(training_views(train_samples), eval_samples, config, out / "delta_sweep",
                workers=args.workers, log_callback=logging.info)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="nlfsal", description=__doc__.strip().splitlines()[0],
                                     parents=[common])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen", parents=[common], help="generate a synthetic corpus")
    gen.add_argument("--config", help="JSON generation config")
    gen.add_argument("--out", required=True, help="corpus directory")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--force", action="store_true", help="overwrite a non-empty directory")
    gen.set_defaults(handler=cmd_gen, out_dir=lambda a: Path(a.out))

    train = commands.add_parser("train", parents=[common], help="train on a corpus")
    train.add_argument("--config", help="JSON training config")
    train.add_argument("--corpus", required=True)
    train.add_argument("--out", required=True, help="run directory")
    train.add_argument("--variant", choices=[v.value for v in Variant])
    train.add_argument("--delta", type=float)
    train.add_argument("--alpha", type=float)
    train.add_argument("--a", type=float)
    train.add_argument("--ml", type=int)
    train.add_argument("--epochs", type=int)
    train.add_argument("--lr", type=float)
    train.add_argument("--seed", type=int)
    train.add_argument("--resume", help="checkpoint directory to continue from")
    train.add_argument("--force", action="store_true")
    train.set_defaults(handler=cmd_train, out_dir=lambda a: Path(a.out))

    evaluate = commands.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    evaluate.add_argument("--ckpt", required=True)
    evaluate.add_argument("--corpus", required=True)
    evaluate.add_argument("--out", required=True)
    evaluate.add_argument("--split", choices=["train", "eval", "all"], default="eval")
    evaluate.add_argument("--save-maps", action="store_true", help="write one PGM per sample")
    evaluate.add_argument("--stages", action="store_true", help="with --save-maps, also s_f and s_r")
    evaluate.add_argument("--force", action="store_true")
    evaluate.set_defaults(handler=cmd_eval, out_dir=lambda a: Path(a.out))

    analyze = commands.add_parser("analyze", parents=[common], help="analyze a run or corpus")
    analyze.add_argument("analysis", choices=["forgetting", "correlation", "delta-sweep"])
    analyze.add_argument("--run")
    analyze.add_argument("--corpus", help="override the corpus recorded in the run")
    analyze.add_argument("--out")
    analyze.add_argument("--workers", type=int, default=1)
    analyze.add_argument("--epochs", type=int, help="epochs per sweep run")
    analyze.set_defaults(handler=cmd_analyze, out_dir=lambda a: Path(a.out) if a.out else
                         (Path(a.run) if a.run else Path(a.corpus or ".")) / "analysis")
    return parser


def main(argv: list[str] | None = None) -> int:
    """Application entry point"""
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    out_dir = args.out_dir(args)
    setup_logging(out_dir / "logs", args.command, args.verbose)
    manifest = RunManifest(args.command, argv, str(out_dir))
    status = 1
    try:
        status = args.handler(args, manifest)
    except ConfigError as e:
        logging.error(str(e))
        status = 2
    except (SaliencyError, OSError) as e:
        logging.error(f"{args.command} failed: {e}", exc_info=True)
        status = 1
    finally:
        manifest.append(out_dir / MANIFEST_FILE, status)
    return status


if __name__ == "__main__":
    sys.exit(main())

"""
Experiments
The desk-scale reference experiment (baseline against full variant over several seeds) and the
forgetting-margin sweep.
"""

import logging
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from .corpus_manager import CorpusManager
from .evalkit import forgetting_analysis, label_quality, write_csv
from .exceptions import AnalysisError
from .synthdata import FocalStackSample, GenConfig, NoiseSpec, SceneSpec, TrainingView, generate_corpus
from .trainer import TrainConfig, Trainer, Variant, training_views

SWEEP_DELTAS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)
SWEEP_FIELDS = ("delta", "f_measure", "mae", "epochs")


def reference_gen_config() -> GenConfig:
    """200 train / 50 eval scenes, 64x64, k = 4, radius-2 morphology plus 10% flips"""
    return GenConfig(n_train=200, n_eval=50, k=4, scene=SceneSpec(height=64, width=64),
                     noise=NoiseSpec(mode="corruption", rate=0.1, radius=2))


def reference_train_config(seed: int, epochs: int = 20) -> TrainConfig:
    return TrainConfig(epochs=epochs, seed=seed)


def load_or_generate(directory: str | Path, config: GenConfig, seed: int) -> list[FocalStackSample]:
    """Read the corpus in directory, generating it first if it is empty"""
    manager = CorpusManager(directory)
    if manager.is_empty():
        manager.write_corpus(generate_corpus(config, seed),
                             description={"config": config.to_dict(), "seed": seed})
    return manager.read_corpus()


@dataclass
class SeedResult:
    seed: int
    baseline_f: float
    baseline_mae: float
    full_f: float
    full_mae: float
    separation: float | None
    noisy_first_learn: float | None
    clean_first_learn: float | None


@dataclass
class ReferenceResult:
    label_f: float
    label_mae: float
    seeds: list[SeedResult] = field(default_factory=list)

    def mean(self, name: str) -> float:
        return float(np.mean([getattr(s, name) for s in self.seeds]))

    def rows(self) -> list[dict[str, Any]]:
        return [vars(s) | {"label_f": self.label_f, "label_mae": self.label_mae} for s in self.seeds]


def reference_experiment(workdir: str | Path, seeds: Sequence[int] = (0, 1, 2), epochs: int = 20,
                         gen_config: GenConfig | None = None, corpus_seed: int = 0,
                         log_callback: Callable[[str], None] | None = None) -> ReferenceResult:
    """Train baseline and full variants per seed on the reference corpus

    Args:
        workdir: Directory for the corpus and per-seed runs
        seeds: Training seeds
        epochs: Epochs per run
        gen_config: Corpus configuration (defaults to the reference corpus)
        corpus_seed: Corpus generation seed
        log_callback: Optional callback for progress messages

    Returns:
        ReferenceResult with per-seed metrics and forgetting statistics
    """
    workdir = Path(workdir)
    samples = load_or_generate(workdir / "corpus", gen_config or reference_gen_config(), corpus_seed)
    train_samples = [s for s in samples if s.split == "train"]
    eval_samples = [s for s in samples if s.split == "eval"]
    views = training_views(train_samples)
    quality = label_quality(eval_samples)
    result = ReferenceResult(quality.mean_f, quality.mean_mae)
    for seed in seeds:
        outcome = {}
        for variant in (Variant.BASELINE, Variant.FULL):
            config = replace(reference_train_config(seed, epochs), variant=variant.value)
            trainer = Trainer(views, config, eval_samples, workdir / f"seed_{seed}" / variant.value)
            record = trainer.train(log_callback=log_callback)
            outcome[variant] = (trainer, record.final)
        full_trainer, full_final = outcome[Variant.FULL]
        _, base_final = outcome[Variant.BASELINE]
        assert full_trainer.forgetting is not None
        report = forgetting_analysis(full_trainer.forgetting, train_samples, epochs)
        result.seeds.append(SeedResult(
            seed=seed,
            baseline_f=base_final.val_f_measure, baseline_mae=base_final.val_mae,
            full_f=full_final.val_f_measure, full_mae=full_final.val_mae,
            separation=report.separation("any"),
            noisy_first_learn=report.get("any", "noisy").mean_first_learn,
            clean_first_learn=report.get("any", "clean").mean_first_learn,
        ))
        logging.info(f"Seed {seed}: baseline F {base_final.val_f_measure:.4f}, "
                     f"full F {full_final.val_f_measure:.4f}")
    write_csv(workdir / "reference.csv",
              ("seed", "baseline_f", "baseline_mae", "full_f", "full_mae", "separation",
               "noisy_first_learn", "clean_first_learn", "label_f", "label_mae"),
              result.rows())
    return result


def delta_sweep(train_views: Sequence[TrainingView], validation: Sequence[FocalStackSample],
                config: TrainConfig, out_dir: str | Path, deltas: Sequence[float] = SWEEP_DELTAS,
                workers: int = 1, log_callback: Callable[[str], None] | None = None) -> list[dict[str, Any]]:
    """Train the full variant once per forgetting margin and report validation metrics

    Args:
        train_views: Training samples
        validation: Samples with clean masks
        config: Base configuration; delta and variant are overridden per run
        out_dir: Directory receiving one run per margin and delta_sweep.csv
        deltas: Margins to try
        workers: Concurrent trainings
        log_callback: Optional callback for progress messages

    Returns:
        One row per margin, in the order given
    """
    if not validation:
        raise AnalysisError("The margin sweep needs evaluation samples with clean masks; "
                            "generate the corpus with n_eval > 0.")
    out_dir = Path(out_dir)

    def run(delta: float) -> dict[str, Any]:
        cfg = replace(config, delta=delta, variant=Variant.FULL.value)
        trainer = Trainer(train_views, cfg, validation, out_dir / f"delta_{delta:.2f}")
        final = trainer.train(log_callback=log_callback).final
        assert final is not None
        return {"delta": delta, "f_measure": final.val_f_measure, "mae": final.val_mae,
                "epochs": cfg.epochs}

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        rows = list(pool.map(run, deltas))
    write_csv(out_dir / "delta_sweep.csv", SWEEP_FIELDS, rows)
    best = max(rows, key=lambda r: r["f_measure"])
    logging.info(f"Margin sweep finished: best delta {best['delta']} (F {best['f_measure']:.4f})")
    return rows

"""Trainer - Training loop joining the fusion network, pixel forgetting and the noise penalty"""

import hashlib
import json
import logging
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any, ClassVar, NamedTuple

import numpy as np
import torch

from .checkpoint_manager import Checkpoint, CheckpointManager, load_optimizer_tensors, optimizer_tensors
from .evalkit import batch_tensors, evaluate_model, write_csv
from .exceptions import CheckpointError, ConfigError, TrainingDivergedError
from .forgetting import ForgettingConfig, ForgettingState, transform_matrix
from .fusion import ArchitectureConfig, build_network
from .noiseloss import (CorrelationStats, PeerBatch, Scores, batch_scores, diagnostics_row,
                        estimate_delta, penalty_terms, sample_peer_pairs)
from .synthdata import FocalStackSample, TrainingView


class Variant(str, Enum):
    """Ablation variants: each single component added to the baseline, or all of them"""
    BASELINE = "baseline"
    MFFO = "mffo"
    PFM = "pfm"
    PLOSS = "ploss"
    FULL = "full"

    @classmethod
    def parse(cls, name: "str | Variant") -> "Variant":
        try:
            return cls(name)
        except ValueError:
            choices = ", ".join(v.value for v in cls)
            raise ConfigError(f"unknown variant {name!r}; choose one of {choices}") from None

    @property
    def mffo(self) -> bool:
        return self in (Variant.MFFO, Variant.FULL)

    @property
    def pfm(self) -> bool:
        return self in (Variant.PFM, Variant.FULL)

    @property
    def ploss(self) -> bool:
        return self in (Variant.PLOSS, Variant.FULL)


class LRPolicy(str, Enum):
    FIXED = "fixed"
    INVERSE = "inverse"


DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class TrainConfig:
    """Training hyperparameters

    Attributes:
        epochs: Number of epochs
        lr: Base learning rate
        beta1, beta2: Adam moment coefficients
        batch_size: Samples per batch, at least max(m_l, 3)
        seed: Seed for initialization, shuffling, pair sampling and augmentation
        delta: Forgetting margin
        a: Confidence descent coefficient
        alpha: Penalty coefficient
        m_l: Pair budget (m_l - 1 cross pairs per anchor)
        variant: Ablation variant
        lr_policy: "fixed" or "inverse" (lr * (1 + gamma * t) ** -power)
        flip, rotate, crop: Augmentation flags
        crop_size: Side of the random crop
        dtype: "float32" or "float64"
        checkpoint_every: Keep a numbered checkpoint every this many epochs (0 for final only)
        architecture: Network shape
    """
    epochs: int = 30
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 8
    seed: int = 0
    delta: float = 0.3
    a: float = 0.04
    alpha: float = 0.2
    m_l: int = 4
    variant: str = Variant.FULL.value
    lr_policy: str = LRPolicy.INVERSE.value
    lr_gamma: float = 1e-4
    lr_power: float = 0.75
    flip: bool = False
    rotate: bool = False
    crop: bool = False
    crop_size: int = 48
    dtype: str = "float32"
    checkpoint_every: int = 5
    architecture: ArchitectureConfig = field(default_factory=ArchitectureConfig)

    HASH_EXCLUDED: ClassVar[tuple[str, ...]] = ("epochs", "checkpoint_every")

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be at least 1, got {self.epochs}")
        if self.lr < 0:
            raise ConfigError(f"learning rate must be non-negative, got {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("Adam coefficients must lie in [0, 1)")
        if self.m_l < 2:
            raise ConfigError(f"m_l must be at least 2, got {self.m_l}")
        if self.batch_size < max(self.m_l, 3):
            raise ConfigError(f"batch_size {self.batch_size} is too small to draw cross pairs; "
                              f"use at least {max(self.m_l, 3)}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be non-negative, got {self.alpha}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}, got {self.dtype!r}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be non-negative")
        Variant.parse(self.variant)
        try:
            LRPolicy(self.lr_policy)
        except ValueError:
            raise ConfigError(f"unknown lr_policy {self.lr_policy!r}") from None
        self.forgetting_config().validate()
        self.architecture.validate()
        if self.crop and (self.crop_size < 1 or self.crop_size % self.architecture.divisor):
            raise ConfigError(f"crop_size must be a positive multiple of {self.architecture.divisor}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return DTYPES[self.dtype]

    def forgetting_config(self) -> ForgettingConfig:
        return ForgettingConfig(self.delta, self.a)

    def effective_architecture(self) -> ArchitectureConfig:
        return replace(self.architecture, mffo=Variant.parse(self.variant).mffo)

    def effective_alpha(self) -> float:
        return self.alpha if Variant.parse(self.variant).ploss else 0.0

    def config_hash(self) -> str:
        """SHA-256 of every setting that influences training numerics"""
        payload = {k: v for k, v in self.to_dict().items() if k not in self.HASH_EXCLUDED}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()

    @classmethod
    def from_dict(cls, data: dict[str, Any] | None) -> "TrainConfig":
        data = dict(data or {})
        unknown = sorted(set(data) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigError(f"unknown training keys: {unknown}")
        data["architecture"] = ArchitectureConfig.from_dict(data.get("architecture"))
        config = cls(**data)
        config.validate()
        return config

    def to_dict(self) -> dict[str, Any]:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["architecture"] = self.architecture.to_dict()
        return out


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    ce_term: float
    penalty_term: float
    lr: float
    val_f_measure: float | None
    val_mae: float | None
    forgetting_events: int
    forgetting_total: int
    steps: int


EPOCH_FIELDS = tuple(f.name for f in fields(EpochRecord))
DIAGNOSTIC_FIELDS = ("epoch", "delta_11", "delta_12", "delta_21", "delta_22",
                     "omega_11", "omega_12", "omega_21", "omega_22", "S_mean", "Psi_mean")


@dataclass
class RunRecord:
    """Per-epoch history of one training run"""
    variant: str
    config_hash: str
    forgetting_enabled: bool
    epochs: list[EpochRecord] = field(default_factory=list)
    diagnostics: list[dict[str, Any]] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)

    @property
    def final(self) -> EpochRecord | None:
        return self.epochs[-1] if self.epochs else None

    def append(self, record: EpochRecord, diagnostics: dict[str, Any]) -> None:
        expected = len(self.epochs)
        if record.epoch != expected:
            raise ValueError(f"epoch {record.epoch} recorded after {expected - 1}")
        self.epochs.append(record)
        self.diagnostics.append(diagnostics)

    def summary(self) -> dict[str, Any]:
        final = self.final
        return {
            "variant": self.variant,
            "config_hash": self.config_hash,
            "forgetting_enabled": self.forgetting_enabled,
            "epochs": len(self.epochs),
            "final": asdict(final) if final else None,
            "checkpoints": list(self.checkpoints),
        }

    def write(self, run_dir: str | Path) -> None:
        run_dir = Path(run_dir)
        write_csv(run_dir / "run_record.csv", EPOCH_FIELDS, [asdict(e) for e in self.epochs])
        write_csv(run_dir / "diagnostics.csv", DIAGNOSTIC_FIELDS, self.diagnostics)
        with open(run_dir / "summary.json", "w", encoding="utf-8") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


class Augmentation(NamedTuple):
    """Spatial transform applied identically to image, slices and label (last two axes)"""
    flip_h: bool = False
    flip_v: bool = False
    turns: int = 0
    crop: tuple[int, int, int] | None = None

    @property
    def invertible(self) -> bool:
        return self.crop is None

    def apply(self, x: torch.Tensor) -> torch.Tensor:
        if self.crop is not None:
            top, left, size = self.crop
            x = x[..., top:top + size, left:left + size]
        if self.flip_h:
            x = torch.flip(x, dims=(-1,))
        if self.flip_v:
            x = torch.flip(x, dims=(-2,))
        if self.turns:
            x = torch.rot90(x, self.turns, dims=(-2, -1))
        return x

    def invert(self, x: torch.Tensor) -> torch.Tensor:
        if not self.invertible:
            raise ValueError("a cropped view cannot be mapped back to the full image")
        if self.turns:
            x = torch.rot90(x, -self.turns, dims=(-2, -1))
        if self.flip_v:
            x = torch.flip(x, dims=(-2,))
        if self.flip_h:
            x = torch.flip(x, dims=(-1,))
        return x


def make_batches(order: np.ndarray, batch_size: int, minimum: int) -> list[np.ndarray]:
    """Split order into batches; a trailing batch smaller than minimum joins the previous one"""
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if len(batches) > 1 and len(batches[-1]) < minimum:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def _batch_seed(seed: int, epoch: int, batch: int, stream: int = 0) -> int:
    return int(np.random.SeedSequence([seed, epoch, batch, stream]).generate_state(1)[0])


def training_views(samples: Sequence[FocalStackSample]) -> list[TrainingView]:
    return [s.training_view() for s in samples]


class Trainer:
    """Trains one variant on a fixed set of training views"""

    def __init__(self, train_views: Sequence[TrainingView], config: TrainConfig,
                 validation: Sequence[FocalStackSample] = (), run_dir: str | Path | None = None):
        """Initialize the trainer

        Args:
            train_views: Training samples without clean masks
            config: Training configuration
            validation: Samples evaluated against their clean masks after each epoch
            run_dir: Output directory for checkpoints and run files; None keeps everything in memory
        """
        config.validate()
        self.config = config
        self.variant = Variant.parse(config.variant)
        self.views = sorted(train_views, key=lambda v: v.sample_id)
        self.validation = list(validation)
        self._check_corpus()
        self.dtype = config.torch_dtype
        self.network, self.params = build_network(config.effective_architecture(), config.seed,
                                                  self.dtype)
        self.names = self.params.names()
        self.optimizer = torch.optim.Adam([self.params[n] for n in self.names], lr=config.lr,
                                          betas=(config.beta1, config.beta2))
        self.shape = tuple(self.views[0].noisy_label.shape)
        self.forgetting = (ForgettingState([v.sample_id for v in self.views], self.shape)
                           if self.variant.pfm else None)
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.checkpoints = (CheckpointManager(self.run_dir, config.checkpoint_every)
                            if self.run_dir is not None else None)
        self.record = RunRecord(self.variant.value, config.config_hash(), self.forgetting is not None)
        self.start_epoch = 0
        self.step_count = 0
        self.stop_requested = False
        self.use_crop = config.crop
        if config.crop and self.forgetting is not None:
            logging.warning("Random crop disabled: forgetting tracking needs pixel-exact inverse "
                            "transforms")
            self.use_crop = False
        self.stats = {'steps': 0, 'samples_seen': 0, 'forgetting_events': 0}

    def _check_corpus(self) -> None:
        config = self.config
        needed = max(config.m_l, config.batch_size)
        if len(self.views) < needed:
            raise ConfigError(f"training needs at least {needed} samples, got {len(self.views)}")
        shapes = {v.noisy_label.shape for v in self.views} | {s.clean_mask.shape for s in self.validation}
        if len(shapes) != 1:
            raise ConfigError(f"all samples must share one resolution, found {sorted(shapes)}")
        h, w = shapes.pop()
        d = config.architecture.divisor
        if h % d or w % d:
            raise ConfigError(f"resolution {h}x{w} is not divisible by {d}")
        if config.crop and config.crop_size > min(h, w):
            raise ConfigError(f"crop_size {config.crop_size} exceeds the image size {h}x{w}")
        arch = config.architecture
        for v in list(self.views) + list(self.validation):
            k, channels = v.focal_stack.shape[0], v.all_focus.shape[0]
            if k != arch.k or channels != arch.channels:
                raise ConfigError(f"sample {v.sample_id} has k={k}, channels={channels}; the "
                                  f"configuration expects k={arch.k}, channels={arch.channels}")

    def learning_rate(self, step: int) -> float:
        config = self.config
        if LRPolicy(config.lr_policy) is LRPolicy.FIXED:
            return config.lr
        return config.lr * (1.0 + config.lr_gamma * step) ** (-config.lr_power)

    def stop(self) -> None:
        """Stop after the current epoch"""
        self.stop_requested = True
        logging.info("Training stop requested")

    def resume(self, path: str | Path | None = None) -> None:
        """Continue from a checkpoint written by a run with the same configuration

        Args:
            path: Checkpoint directory; defaults to this run's latest/
        """
        if path is None and self.checkpoints is None:
            raise CheckpointError("no checkpoint given and the trainer has no run directory")
        manager = self.checkpoints or CheckpointManager(Path(path or "."))
        checkpoint = manager.load(path, self.config.config_hash())
        self.params.load_state(checkpoint.params)
        load_optimizer_tensors(self.optimizer, self.names, checkpoint.optimizer)
        if self.forgetting is not None:
            if checkpoint.forgetting is None:
                raise CheckpointError("checkpoint holds no forgetting state for this variant")
            self.forgetting = ForgettingState.from_tensors(checkpoint.forgetting)
        state = checkpoint.state
        self.start_epoch = checkpoint.epoch
        self.step_count = int(state["step"])
        self.stats['steps'] = self.step_count
        if self.forgetting is not None:
            self.stats['forgetting_events'] = self.forgetting.total_events()
        self.record.epochs = [EpochRecord(**e) for e in state.get("history", [])]
        self.record.diagnostics = list(state.get("diagnostics", []))
        self.record.checkpoints = list(state.get("checkpoints", []))
        logging.info(f"Resuming {self.variant.value} run at epoch {self.start_epoch}")

    def _draw_augmentation(self, epoch: int, batch: int) -> Augmentation:
        config = self.config
        if not (config.flip or config.rotate or self.use_crop):
            return Augmentation()
        rng = np.random.default_rng([config.seed, epoch, batch, 1])
        flip_h, flip_v = (bool(b) for b in rng.integers(0, 2, size=2)) if config.flip else (False, False)
        turns = int(rng.integers(0, 4)) if config.rotate else 0
        crop = None
        if self.use_crop:
            h, w = self.shape
            size = config.crop_size
            crop = (int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1)), size)
        return Augmentation(flip_h, flip_v, turns, crop)

    def _confidence(self, ids: Sequence[str], stream: str, aug: Augmentation) -> torch.Tensor:
        assert self.forgetting is not None
        maps = np.stack([self.forgetting.confidence(i, stream, self.config.a) for i in ids])
        return aug.apply(torch.from_numpy(maps).to(self.dtype))

    def _update_forgetting(self, views: Sequence[TrainingView], s_f: torch.Tensor, s_r: torch.Tensor,
                           aug: Augmentation, epoch: int) -> int:
        assert self.forgetting is not None
        delta = self.config.delta
        canonical_f = aug.invert(s_f.detach()).double().numpy()
        canonical_r = aug.invert(s_r.detach()).double().numpy()
        added = 0
        for j, view in enumerate(views):
            added += self.forgetting.update(view.sample_id, {
                "f": transform_matrix(canonical_f[j], view.noisy_label, delta),
                "r": transform_matrix(canonical_r[j], view.noisy_label, delta),
            }, epoch)
        return added

    def _run_epoch(self, epoch: int) -> tuple[EpochRecord, dict[str, Any]]:
        config = self.config
        alpha = config.effective_alpha()
        minimum = max(config.m_l, 3)
        order = np.random.default_rng([config.seed, epoch]).permutation(len(self.views))
        batches = make_batches(order, config.batch_size, minimum)
        loss_sum = ce_sum = penalty_sum = 0.0
        S_sum = Psi_sum = 0.0
        stats: CorrelationStats | None = None
        added = 0
        lr = self.learning_rate(self.step_count)
        for b, indices in enumerate(batches):
            views = [self.views[i] for i in indices]
            ids = [v.sample_id for v in views]
            aug = self._draw_augmentation(epoch, b)
            all_focus, focal_stack = batch_tensors(views, self.dtype)
            labels = torch.from_numpy(np.stack([v.noisy_label for v in views])).to(self.dtype)
            all_focus, focal_stack, labels = aug.apply(all_focus), aug.apply(focal_stack), aug.apply(labels)
            m_f = m_r = None
            if self.forgetting is not None:
                m_f, m_r = self._confidence(ids, "f", aug), self._confidence(ids, "r", aug)

            triple = self.network(all_focus, focal_stack, m_f, m_r)
            generator = torch.Generator().manual_seed(_batch_seed(config.seed, epoch, b))
            pairs = sample_peer_pairs(len(views), config.m_l, generator)
            loss = ce = penalty = None
            for s in (triple.s_i, triple.s_f, triple.s_r):
                terms = penalty_terms(PeerBatch(s, labels, pairs, alpha, config.m_l), "mean")
                loss = terms.loss.mean() if loss is None else loss + terms.loss.mean()
                matched = terms.matched.mean()
                ce = matched if ce is None else ce + matched
                gap = (terms.matched - terms.loss).mean()
                penalty = gap if penalty is None else penalty + gap
            assert loss is not None and ce is not None and penalty is not None
            if not torch.isfinite(loss):
                last = (self.checkpoints.latest_dir
                        if self.checkpoints is not None and self.checkpoints.has_latest() else None)
                raise TrainingDivergedError(f"non-finite loss in epoch {epoch}, batch {b}", epoch, last)

            lr = self.learning_rate(self.step_count)
            for group in self.optimizer.param_groups:
                group["lr"] = lr
            self.params.zero_grad()
            loss.backward()
            self.optimizer.step()
            self.step_count += 1

            if self.forgetting is not None:
                added += self._update_forgetting(views, triple.s_f, triple.s_r, aug, epoch)

            s_i = triple.s_i.detach()
            batch_stats = estimate_delta(s_i.double().numpy(), labels.double().numpy())
            stats = batch_stats if stats is None else stats.merge(batch_stats)
            scores = batch_scores(batch_stats, PeerBatch(s_i, labels.detach(), pairs, alpha, config.m_l))
            S_sum += scores.S
            Psi_sum += scores.Psi
            loss_sum += loss.item()
            ce_sum += ce.item()
            penalty_sum += penalty.item()
            self.stats['steps'] += 1
            self.stats['samples_seen'] += len(views)
            logging.debug(f"Epoch {epoch} batch {b}: loss {loss.item():.6f} (lr {lr:.3e})")

        n = len(batches)
        self.stats['forgetting_events'] += added
        val_f = val_mae = None
        if self.validation:
            report = evaluate_model(self.network, self.validation, self.dtype, config.batch_size)
            val_f, val_mae = report.mean_f, report.mean_mae
        record = EpochRecord(
            epoch=epoch, loss=loss_sum / n, ce_term=ce_sum / n, penalty_term=penalty_sum / n, lr=lr,
            val_f_measure=val_f, val_mae=val_mae, forgetting_events=added,
            forgetting_total=self.forgetting.total_events() if self.forgetting is not None else 0,
            steps=self.step_count)
        assert stats is not None
        diagnostics = diagnostics_row(epoch, stats, Scores(S_sum / n, Psi_sum / n))
        return record, diagnostics

    def _checkpoint(self, final: bool) -> None:
        if self.checkpoints is None:
            return
        next_epoch = len(self.record.epochs)
        if final or (self.checkpoints.every and next_epoch % self.checkpoints.every == 0):
            self.record.checkpoints.append(f"checkpoints/epoch_{next_epoch - 1:04d}")
        state = {
            "epoch": next_epoch,
            "step": self.step_count,
            "config_hash": self.record.config_hash,
            "variant": self.variant.value,
            "architecture": self.config.effective_architecture().to_dict(),
            "train_config": self.config.to_dict(),
            "history": [asdict(e) for e in self.record.epochs],
            "diagnostics": list(self.record.diagnostics),
            "checkpoints": list(self.record.checkpoints),
        }
        checkpoint = Checkpoint(
            params=self.params.state(),
            optimizer=optimizer_tensors(self.optimizer, self.names),
            forgetting=self.forgetting.to_tensors() if self.forgetting is not None else None,
            state=state,
        )
        self.checkpoints.save(checkpoint, final=final)

    def train(self, progress_callback: Callable[[int], None] | None = None,
              status_callback: Callable[[str], None] | None = None,
              log_callback: Callable[[str], None] | None = None) -> RunRecord:
        """Run the remaining epochs

        Args:
            progress_callback: Callback function to report progress percentage (0-100)
            status_callback: Callback function to report current status message
            log_callback: Callback function to report detailed log messages

        Returns:
            RunRecord with one entry per finished epoch
        """
        config = self.config
        self.stop_requested = False
        log = log_callback or logging.info
        log(f"Training variant {self.variant.value} on {len(self.views)} samples, epochs "
            f"{self.start_epoch}..{config.epochs - 1} (config {self.record.config_hash[:12]})")
        for epoch in range(self.start_epoch, config.epochs):
            if self.stop_requested:
                logging.info(f"Training stopped before epoch {epoch}")
                break
            if status_callback:
                status_callback(f"Epoch {epoch + 1}/{config.epochs}")
            record, diagnostics = self._run_epoch(epoch)
            self.record.append(record, diagnostics)
            self._checkpoint(final=epoch == config.epochs - 1)
            message = (f"Epoch {epoch}: loss {record.loss:.5f} (ce {record.ce_term:.5f}, "
                       f"penalty {record.penalty_term:.5f})")
            if record.val_f_measure is not None:
                message += f", val F {record.val_f_measure:.4f} MAE {record.val_mae:.4f}"
            if self.forgetting is not None:
                message += f", forgetting events {record.forgetting_events}"
            log(message)
            if progress_callback:
                progress_callback(int(100 * (epoch + 1) / config.epochs))
        if self.run_dir is not None:
            self.record.write(self.run_dir)
        return self.record


def train(train_views: Sequence[TrainingView], config: TrainConfig,
          validation: Sequence[FocalStackSample] = (), run_dir: str | Path | None = None,
          resume: str | Path | None = None, **callbacks: Callable[..., None]) -> RunRecord:
    """Train one configuration; see Trainer"""
    trainer = Trainer(train_views, config, validation, run_dir)
    if resume is not None:
        trainer.resume(resume)
    return trainer.train(**callbacks)


def ablation(train_views: Sequence[TrainingView], config: TrainConfig, variant: str | Variant,
             validation: Sequence[FocalStackSample] = (), run_dir: str | Path | None = None,
             **callbacks: Callable[..., None]) -> RunRecord:
    """Train one ablation variant with otherwise identical settings"""
    variant = Variant.parse(variant)
    return train(train_views, replace(config, variant=variant.value), validation, run_dir,
                 **callbacks)

"""
Checkpoint Manager
Stores and restores training state: parameters, optimizer moments, forgetting state and the
run bookkeeping needed to continue a run exactly.
"""

import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import torch

from . import gradcore
from .exceptions import CheckpointError, TensorFormatError

PARAMS_FILE = "params.bin"
OPTIMIZER_FILE = "optimizer.bin"
FORGETTING_FILE = "forgetting.bin"
STATE_FILE = "state.json"
LATEST = "latest"


@dataclass
class Checkpoint:
    """Everything needed to continue or evaluate a run

    Attributes:
        params: Parameter tensors by name
        optimizer: Flattened optimizer moments ("<param>/exp_avg", ...), empty if absent
        forgetting: Flattened forgetting state, None when forgetting is disabled
        state: JSON bookkeeping (next epoch, step count, config hash, architecture, history)
    """
    params: dict[str, torch.Tensor]
    optimizer: dict[str, torch.Tensor] = field(default_factory=dict)
    forgetting: dict[str, torch.Tensor] | None = None
    state: dict[str, Any] = field(default_factory=dict)

    @property
    def epoch(self) -> int:
        """Next epoch to run"""
        return int(self.state.get("epoch", 0))

    @property
    def config_hash(self) -> str | None:
        return self.state.get("config_hash")


def optimizer_tensors(optimizer: torch.optim.Optimizer, names: list[str]) -> dict[str, torch.Tensor]:
    """Flatten Adam moments by parameter name; names follow the optimizer's parameter order"""
    state = optimizer.state_dict()["state"]
    out: dict[str, torch.Tensor] = {}
    for index, name in enumerate(names):
        entry = state.get(index)
        if not entry:
            continue
        out[f"{name}/exp_avg"] = entry["exp_avg"]
        out[f"{name}/exp_avg_sq"] = entry["exp_avg_sq"]
        out[f"{name}/step"] = torch.as_tensor(entry["step"], dtype=torch.float32).reshape(())
    return out


def load_optimizer_tensors(optimizer: torch.optim.Optimizer, names: list[str],
                           tensors: dict[str, torch.Tensor]) -> None:
    """Inverse of optimizer_tensors"""
    state_dict = optimizer.state_dict()
    restored: dict[int, dict[str, torch.Tensor]] = {}
    for index, name in enumerate(names):
        if f"{name}/exp_avg" not in tensors:
            continue
        restored[index] = {
            "step": tensors[f"{name}/step"].clone().reshape(()),
            "exp_avg": tensors[f"{name}/exp_avg"].clone(),
            "exp_avg_sq": tensors[f"{name}/exp_avg_sq"].clone(),
        }
    unknown = {k.rsplit("/", 1)[0] for k in tensors} - set(names)
    if unknown:
        raise CheckpointError(f"optimizer state for unknown parameters: {sorted(unknown)}")
    optimizer.load_state_dict({"state": restored, "param_groups": state_dict["param_groups"]})


def write_checkpoint(path: str | Path, checkpoint: Checkpoint) -> Path:
    """Write a checkpoint directory; output bytes depend only on the checkpoint contents"""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    gradcore.save_tensors(path / PARAMS_FILE, checkpoint.params)
    gradcore.save_tensors(path / OPTIMIZER_FILE, checkpoint.optimizer)
    forgetting_path = path / FORGETTING_FILE
    if checkpoint.forgetting is not None:
        gradcore.save_tensors(forgetting_path, checkpoint.forgetting)
    else:
        forgetting_path.unlink(missing_ok=True)
    with open(path / STATE_FILE, "w", encoding="utf-8") as fh:
        json.dump(checkpoint.state, fh, indent=2, sort_keys=True)
        fh.write("\n")
    logging.debug(f"Wrote checkpoint to {path}")
    return path


def read_checkpoint(path: str | Path) -> Checkpoint:
    """Read a checkpoint directory

    Raises:
        CheckpointError: missing files, corrupted tensor streams or unreadable state
    """
    path = Path(path)
    if not (path / STATE_FILE).is_file() or not (path / PARAMS_FILE).is_file():
        raise CheckpointError(f"Checkpoint '{path}' not found or incomplete. Pass a directory "
                              f"containing {PARAMS_FILE} and {STATE_FILE}.")
    try:
        params = gradcore.load_tensors(path / PARAMS_FILE)
        optimizer = (gradcore.load_tensors(path / OPTIMIZER_FILE)
                     if (path / OPTIMIZER_FILE).is_file() else {})
        forgetting = (gradcore.load_tensors(path / FORGETTING_FILE)
                      if (path / FORGETTING_FILE).is_file() else None)
        with open(path / STATE_FILE, encoding="utf-8") as fh:
            state = json.load(fh)
    except TensorFormatError as e:
        raise CheckpointError(f"corrupted checkpoint {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise CheckpointError(f"unreadable checkpoint state {path / STATE_FILE}: {e}") from e
    return Checkpoint(params, optimizer, forgetting, state)


class CheckpointManager:
    """Manages the checkpoints of one run directory"""

    def __init__(self, run_dir: str | Path, every: int = 5):
        """Initialize the Checkpoint Manager

        Args:
            run_dir: Run output directory; checkpoints live in run_dir/checkpoints
            every: Keep a numbered checkpoint every this many epochs
        """
        self.root = Path(run_dir) / "checkpoints"
        self.every = every

    @property
    def latest_dir(self) -> Path:
        return self.root / LATEST

    def epoch_dir(self, epoch: int) -> Path:
        return self.root / f"epoch_{epoch:04d}"

    def has_latest(self) -> bool:
        return (self.latest_dir / STATE_FILE).is_file()

    def save(self, checkpoint: Checkpoint, final: bool = False) -> Path:
        """Write latest/ and, on the cadence or at the end, a numbered copy

        Args:
            checkpoint: Checkpoint whose state records the next epoch to run
            final: Also keep a numbered copy regardless of the cadence

        Returns:
            Path of latest/
        """
        finished = checkpoint.epoch
        staging = self.root / f".{LATEST}.tmp"
        if staging.exists():
            shutil.rmtree(staging)
        write_checkpoint(staging, checkpoint)
        if self.latest_dir.exists():
            shutil.rmtree(self.latest_dir)
        staging.rename(self.latest_dir)
        if final or (self.every > 0 and finished % self.every == 0):
            numbered = self.epoch_dir(finished - 1)
            if numbered.exists():
                shutil.rmtree(numbered)
            shutil.copytree(self.latest_dir, numbered)
            logging.info(f"Saved checkpoint {numbered}")
        return self.latest_dir

    def load(self, path: str | Path | None = None, config_hash: str | None = None) -> Checkpoint:
        """Read a checkpoint and check that it belongs to the same configuration

        Args:
            path: Checkpoint directory (defaults to latest/)
            config_hash: Expected configuration hash; None skips the check

        Returns:
            The checkpoint
        """
        checkpoint = read_checkpoint(path or self.latest_dir)
        if config_hash is not None and checkpoint.config_hash != config_hash:
            raise CheckpointError(
                f"Checkpoint {path or self.latest_dir} was written with configuration "
                f"{checkpoint.config_hash}, but this run uses {config_hash}. Resume with the "
                "original configuration (only epochs and checkpoint cadence may change).")
        logging.info(f"Loaded checkpoint at epoch {checkpoint.epoch} from {path or self.latest_dir}")
        return checkpoint

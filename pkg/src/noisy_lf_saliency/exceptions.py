"""
Exception hierarchy
Every error raised by the package derives from SaliencyError and from the closest built-in
"""

from pathlib import Path


class SaliencyError(Exception):
    """Base class for all package errors"""


class DimensionError(SaliencyError, ValueError):
    """Tensor shapes do not line up

    Attributes:
        axes: Names of the offending axes, e.g. ("input.channels", "weight.in_channels")
        sizes: The sizes found on those axes
    """

    def __init__(self, message: str, axes: tuple[str, ...] = (), sizes: tuple[int, ...] = ()):
        self.axes = axes
        self.sizes = sizes
        if axes:
            detail = ", ".join(f"{a}={s}" for a, s in zip(axes, sizes)) if sizes else ", ".join(axes)
            message = f"{message} [{detail}]"
        super().__init__(message)


class GenerationError(SaliencyError, RuntimeError):
    """A synthetic scene could not be generated"""


class CorpusLoadError(SaliencyError, OSError):
    """A corpus file is missing or malformed"""

    def __init__(self, message: str, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        if path is not None:
            message = f"{message}: {path}"
        super().__init__(message)


class TensorFormatError(SaliencyError, ValueError):
    """A serialized tensor stream is corrupted"""


class ForgettingStateError(SaliencyError, KeyError):
    """Forgetting state requested for an unknown sample id"""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class BatchConstructionError(SaliencyError, ValueError):
    """Not enough distinct samples to draw cross-scene pairs"""


class ConfigError(SaliencyError, ValueError):
    """Invalid configuration, unknown variant or corpus/config mismatch"""


class CheckpointError(SaliencyError, RuntimeError):
    """Checkpoint cannot be read or does not match the requested run"""


class AnalysisError(SaliencyError, RuntimeError):
    """An analysis was requested on a run or corpus that cannot support it"""


class TrainingDivergedError(SaliencyError, FloatingPointError):
    """The training loss became non-finite

    Attributes:
        epoch: Epoch in which the loss diverged
        last_checkpoint: Directory of the last good checkpoint, if any
    """

    def __init__(self, message: str, epoch: int, last_checkpoint: Path | None = None):
        self.epoch = epoch
        self.last_checkpoint = last_checkpoint
        super().__init__(message)

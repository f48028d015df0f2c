"""
Pixel forgetting
Per-pixel forgetting-event bookkeeping across epochs and the forgetting-guided fusion of the
two initial predictions into the final saliency map.
"""

import logging
from collections.abc import Iterable, Mapping
from dataclasses import asdict, dataclass, fields
from typing import Any

import numpy as np
import torch
from scipy.special import expit
from torch import nn

from . import gradcore
from .exceptions import ConfigError, DimensionError, ForgettingStateError

STREAMS = ("f", "r")
EVENT_THRESHOLD = 3


@dataclass
class ForgettingConfig:
    """Margin and descent coefficient of the forgetting mechanism"""
    delta: float = 0.3
    a: float = 0.04

    def validate(self) -> None:
        if not 0.0 < self.delta < 1.0:
            raise ConfigError(f"margin delta must lie in (0, 1), got {self.delta}")
        if self.a <= 0:
            raise ConfigError(f"descent coefficient a must be positive, got {self.a}")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any] | None) -> "ForgettingConfig":
        data = dict(data or {})
        unknown = sorted(set(data) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigError(f"unknown forgetting keys: {unknown}")
        config = cls(**data)
        config.validate()
        return config

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def transform_matrix(s: np.ndarray, y: np.ndarray, delta: float) -> np.ndarray:
    """1 where the prediction agrees with the label within delta, else 0

    Args:
        s: Prediction map in [0, 1]
        y: Binary label map
        delta: Margin

    Returns:
        uint8 map T
    """
    if s.shape != y.shape:
        raise DimensionError("prediction and label differ in shape", ("s.shape", "y.shape"))
    return (np.abs(s - y) <= delta).astype(np.uint8)


def confidence_weight(G: np.ndarray, a: float) -> np.ndarray:
    """M = 2 / (1 + exp(a * G^2)); 1 at G = 0, saturating to 0 without overflow"""
    g = np.asarray(G, dtype=np.float64)
    return 2.0 * expit(-a * g * g)


@dataclass
class StreamRecord:
    """Forgetting bookkeeping of one prediction stream of one sample"""
    T: np.ndarray | None
    G: np.ndarray
    first_learn: np.ndarray


class ForgettingState:
    """Per-sample transformation matrices, forgetting counts and first-learning epochs

    State exists for exactly the ids given at construction (the training set).
    """

    def __init__(self, sample_ids: Iterable[str], shape: tuple[int, int]):
        self.shape = tuple(shape)
        self._records: dict[str, dict[str, StreamRecord]] = {}
        self._last_epoch: dict[str, int] = {}
        for sample_id in sorted(sample_ids):
            self._records[sample_id] = {
                s: StreamRecord(None, np.zeros(self.shape, np.int64),
                                np.full(self.shape, -1, np.int64))
                for s in STREAMS
            }
            self._last_epoch[sample_id] = -1

    def ids(self) -> list[str]:
        return list(self._records)

    def __contains__(self, sample_id: str) -> bool:
        return sample_id in self._records

    def _record(self, sample_id: str, stream: str) -> StreamRecord:
        try:
            return self._records[sample_id][stream]
        except KeyError:
            raise ForgettingStateError(f"no forgetting state for sample {sample_id!r} "
                                       f"(stream {stream!r})") from None

    def counts(self, sample_id: str, stream: str) -> np.ndarray:
        return self._record(sample_id, stream).G

    def transform(self, sample_id: str, stream: str) -> np.ndarray | None:
        return self._record(sample_id, stream).T

    def first_learn(self, sample_id: str, stream: str) -> np.ndarray:
        return self._record(sample_id, stream).first_learn

    def last_epoch(self, sample_id: str) -> int:
        if sample_id not in self._last_epoch:
            raise ForgettingStateError(f"no forgetting state for sample {sample_id!r}")
        return self._last_epoch[sample_id]

    def confidence(self, sample_id: str, stream: str, a: float) -> np.ndarray:
        """Soft weight map M, recomputed from G on every call"""
        return confidence_weight(self.counts(sample_id, stream), a)

    def total_events(self, stream: str | None = None) -> int:
        streams = STREAMS if stream is None else (stream,)
        return int(sum(r[s].G.sum() for r in self._records.values() for s in streams))

    def update(self, sample_id: str, T_new: Mapping[str, np.ndarray], epoch: int) -> int:
        """Record one epoch's transformation matrices for a sample

        Args:
            sample_id: Training sample id
            T_new: Binary maps per stream ("f", "r")
            epoch: Current epoch; each sample is updated at most once per epoch

        Returns:
            Number of forgetting events added (both streams)
        """
        last = self.last_epoch(sample_id)
        if epoch <= last:
            raise ForgettingStateError(f"sample {sample_id!r} already updated in epoch {last}")
        added = 0
        for stream in STREAMS:
            record = self._record(sample_id, stream)
            t_new = np.asarray(T_new[stream], dtype=np.uint8)
            if t_new.shape != self.shape:
                raise DimensionError("transformation matrix has the wrong shape",
                                     ("T.shape", "state.shape"))
            if record.T is not None:
                forgotten = t_new < record.T
                record.G[forgotten] += 1
                added += int(forgotten.sum())
            record.T = t_new.copy()
            newly = (record.first_learn < 0) & (t_new == 1)
            record.first_learn[newly] = epoch
        self._last_epoch[sample_id] = epoch
        return added

    def to_tensors(self) -> dict[str, torch.Tensor]:
        """Flatten into name -> tensor for the gradcore tensor format"""
        out: dict[str, torch.Tensor] = {}
        for sample_id, streams in self._records.items():
            out[f"{sample_id}/last_epoch"] = torch.tensor(float(self._last_epoch[sample_id]))
            for stream, record in streams.items():
                out[f"{sample_id}/G_{stream}"] = torch.from_numpy(record.G.astype(np.float32))
                out[f"{sample_id}/first_{stream}"] = torch.from_numpy(
                    record.first_learn.astype(np.float32))
                if record.T is not None:
                    out[f"{sample_id}/T_{stream}"] = torch.from_numpy(record.T.astype(np.float32))
        return out

    @classmethod
    def from_tensors(cls, tensors: Mapping[str, torch.Tensor]) -> "ForgettingState":
        ids = sorted({name.split("/", 1)[0] for name in tensors})
        if not ids:
            raise ForgettingStateError("empty forgetting state")
        try:
            shape = tuple(tensors[f"{ids[0]}/G_{STREAMS[0]}"].shape)
            state = cls(ids, shape)
            for sample_id in ids:
                state._last_epoch[sample_id] = int(tensors[f"{sample_id}/last_epoch"].item())
                for stream in STREAMS:
                    record = state._records[sample_id][stream]
                    record.G = tensors[f"{sample_id}/G_{stream}"].numpy().astype(np.int64)
                    record.first_learn = tensors[f"{sample_id}/first_{stream}"].numpy().astype(np.int64)
                    t = tensors.get(f"{sample_id}/T_{stream}")
                    record.T = None if t is None else t.numpy().astype(np.uint8)
        except KeyError as e:
            raise ForgettingStateError(f"forgetting state lacks {e}") from None
        logging.debug(f"Restored forgetting state for {len(ids)} samples")
        return state


def update_forgetting(state: ForgettingState, sample_id: str, T_new_f: np.ndarray,
                      T_new_r: np.ndarray, epoch: int) -> ForgettingState:
    """Add forgetting events where T drops from 1 to 0 and store the new matrices"""
    state.update(sample_id, {"f": T_new_f, "r": T_new_r}, epoch)
    return state


class GuidedFusion(nn.Module):
    """Fusion convolution over the confidence-weighted initial predictions"""

    def __init__(self, kernel: int = 3):
        super().__init__()
        self.kernel = kernel
        self.weight = nn.Parameter(torch.zeros(1, 2, kernel, kernel))
        self.bias = nn.Parameter(torch.zeros(1))

    def forward(self, s_f: torch.Tensor, s_r: torch.Tensor, m_f: torch.Tensor, m_r: torch.Tensor,
                out_size: tuple[int, int] | None = None) -> torch.Tensor:
        return guided_fuse(s_f, s_r, m_f, m_r, self, out_size)


def guided_fuse(s_f: torch.Tensor, s_r: torch.Tensor, m_f: torch.Tensor, m_r: torch.Tensor,
                params: GuidedFusion, out_size: tuple[int, int] | None = None) -> torch.Tensor:
    """s_i = sigmoid(Up(w * C[M_f . s_f; M_r . s_r] + b))

    Args:
        s_f, s_r: (B, H, W) initial predictions
        m_f, m_r: (B, H, W) confidence weights, treated as constants
        params: Fusion convolution
        out_size: Target size of the upsample (defaults to the prediction grid)

    Returns:
        (B, H', W') final saliency map in (0, 1)
    """
    if not (s_f.shape == s_r.shape == m_f.shape == m_r.shape):
        raise DimensionError("fusion inputs differ in shape", ("s_f", "s_r", "M_f", "M_r"))
    weighted = gradcore.concat([
        gradcore.mul(m_f.detach(), s_f).unsqueeze(1),
        gradcore.mul(m_r.detach(), s_r).unsqueeze(1),
    ])
    z = gradcore.conv2d(weighted, params.weight, params.bias, padding=params.kernel // 2)
    z = gradcore.upsample(z, size=out_size or tuple(s_f.shape[-2:]))
    return gradcore.sigmoid(z).squeeze(1)

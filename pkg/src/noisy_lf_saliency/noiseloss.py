"""
Cross-scene noise penalty
Cross entropy on matched prediction/label pairs minus a weighted average over mismatched
cross-scene pairs, and the correlation statistics used to monitor it.
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Literal, NamedTuple

import numpy as np
import torch

from .exceptions import BatchConstructionError, DimensionError

EPSILON = 1e-7
# Class order of every 2x2 matrix below: index 0 is +1 (salient), index 1 is -1 (background)
CLASSES = ("+1", "-1")


def cross_entropy(s: torch.Tensor, y: torch.Tensor, reduction: Literal["sum", "mean"] = "sum",
                  eps: float = EPSILON) -> torch.Tensor:
    """Binary cross entropy reduced over the last two (pixel) axes

    Args:
        s: Predictions in [0, 1], shape (..., H, W)
        y: Binary labels, same shape
        reduction: "sum" or "mean" over pixels
        eps: Probabilities are clamped to [eps, 1 - eps]

    Returns:
        Tensor of the leading shape (a scalar for a single map)
    """
    if s.shape != y.shape:
        raise DimensionError("prediction and label differ in shape", ("s.shape", "y.shape"))
    if s.dim() < 2:
        raise DimensionError("cross entropy needs (H, W) maps", ("ndim",), (s.dim(),))
    p = s.clamp(eps, 1.0 - eps)
    per_pixel = -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p))
    if reduction == "sum":
        return per_pixel.sum(dim=(-2, -1))
    if reduction == "mean":
        return per_pixel.mean(dim=(-2, -1))
    raise ValueError(f"unknown reduction {reduction!r}")


@dataclass
class CorrelationStats:
    """Empirical agreement statistics between binarized predictions and labels

    Attributes:
        counts: 2x2 pixel counts, rows prediction class, columns label class
        joint: Joint frequencies
        marginal_s: Prediction class frequencies
        marginal_y: Label class frequencies
        delta: joint - outer(marginal_s, marginal_y)
        omega: 1 where delta > 0, else 0
    """
    counts: np.ndarray
    joint: np.ndarray
    marginal_s: np.ndarray
    marginal_y: np.ndarray
    delta: np.ndarray
    omega: np.ndarray

    @classmethod
    def from_counts(cls, counts: np.ndarray) -> "CorrelationStats":
        counts = np.asarray(counts, dtype=np.int64)
        total = counts.sum()
        if total == 0:
            raise DimensionError("no pixels to estimate correlations from", ("pixels",), (0,))
        joint = counts / total
        marginal_s = joint.sum(axis=1)
        marginal_y = joint.sum(axis=0)
        delta = joint - np.outer(marginal_s, marginal_y)
        return cls(counts, joint, marginal_s, marginal_y, delta, (delta > 0).astype(np.int64))

    def merge(self, other: "CorrelationStats") -> "CorrelationStats":
        return CorrelationStats.from_counts(self.counts + other.counts)


def _class_index(values: np.ndarray, threshold: float) -> np.ndarray:
    """0 for the salient class (value >= threshold), 1 for background"""
    return np.where(np.asarray(values) >= threshold, 0, 1)


def estimate_delta(predictions: np.ndarray | Sequence[np.ndarray], labels: np.ndarray | Sequence[np.ndarray],
                   threshold: float = 0.5) -> CorrelationStats:
    """Estimate the 2x2 correlation matrix and its sign from pixel frequencies

    Args:
        predictions: Prediction maps (binarized here at threshold)
        labels: Binary label maps of the same shape
        threshold: Binarization threshold for predictions and labels

    Returns:
        CorrelationStats over all given pixels
    """
    s = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if s.shape != y.shape:
        raise DimensionError("predictions and labels differ in shape", ("s.shape", "y.shape"))
    if s.size == 0:
        raise DimensionError("no pixels to estimate correlations from", ("pixels",), (0,))
    a = _class_index(s, threshold).ravel()
    b = _class_index(y, threshold).ravel()
    counts = np.bincount(a * 2 + b, minlength=4).reshape(2, 2)
    return CorrelationStats.from_counts(counts)


def omega_score(omega: np.ndarray, s: np.ndarray, y: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Per-pixel Omega(s, y)"""
    return np.asarray(omega)[_class_index(s, threshold), _class_index(y, threshold)]


class Scores(NamedTuple):
    S: float
    Psi: float


def score_functions(omega: np.ndarray, anchor: tuple[np.ndarray, np.ndarray],
                    cross: tuple[np.ndarray, np.ndarray], alpha: float,
                    threshold: float = 0.5) -> Scores:
    """S = Omega(anchor) - Omega(cross), Psi = Omega(anchor) - alpha * Omega(cross)

    Pixel maps are averaged. Diagnostic only; training uses cross entropy instead.
    """
    anchor_score = float(np.mean(omega_score(omega, *anchor, threshold=threshold)))
    cross_score = float(np.mean(omega_score(omega, *cross, threshold=threshold)))
    return Scores(anchor_score - cross_score, anchor_score - alpha * cross_score)


def sample_peer_pairs(batch_size: int, m_l: int, generator: torch.Generator) -> torch.Tensor:
    """Draw m_l - 1 ordered cross pairs per anchor

    Each pair holds two distinct batch indices, both different from the anchor.

    Returns:
        (batch_size, m_l - 1, 2) index tensor
    """
    if m_l < 2:
        raise BatchConstructionError(f"m_l must be at least 2, got {m_l}")
    if batch_size < max(m_l, 3):
        raise BatchConstructionError(
            f"{batch_size} samples cannot provide cross pairs for m_l={m_l}; "
            f"use a batch of at least {max(m_l, 3)} samples")
    pairs = torch.empty(batch_size, m_l - 1, 2, dtype=torch.long)
    for anchor in range(batch_size):
        others = torch.tensor([j for j in range(batch_size) if j != anchor], dtype=torch.long)
        for n in range(m_l - 1):
            pick = torch.randperm(len(others), generator=generator)[:2]
            pairs[anchor, n] = others[pick]
    return pairs


@dataclass
class PeerBatch:
    """Predictions, labels and cross pairs of one training batch

    Attributes:
        predictions: (B, H, W) maps in (0, 1)
        labels: (B, H, W) binary noisy labels
        pairs: (B, m_l - 1, 2) indices (prediction of i_n, label of i_n')
        alpha: Penalty coefficient
        m_l: Pair budget
    """
    predictions: torch.Tensor
    labels: torch.Tensor
    pairs: torch.Tensor
    alpha: float = 0.2
    m_l: int = 4

    def __post_init__(self) -> None:
        if self.predictions.shape != self.labels.shape:
            raise DimensionError("predictions and labels differ in shape",
                                 ("predictions.shape", "labels.shape"))
        if tuple(self.pairs.shape) != (self.predictions.shape[0], self.m_l - 1, 2):
            raise BatchConstructionError(f"pairs have shape {tuple(self.pairs.shape)}, expected "
                                         f"({self.predictions.shape[0]}, {self.m_l - 1}, 2)")
        anchors = torch.arange(self.pairs.shape[0]).view(-1, 1)
        if (self.pairs[..., 0] == self.pairs[..., 1]).any() or (self.pairs == anchors.unsqueeze(-1)).any():
            raise BatchConstructionError("cross pairs must use two distinct non-anchor samples")


class PenaltyTerms(NamedTuple):
    """Per-anchor components of the penalty loss"""
    matched: torch.Tensor
    mismatched: torch.Tensor
    loss: torch.Tensor


def penalty_terms(batch: PeerBatch, reduction: Literal["sum", "mean"] = "mean") -> PenaltyTerms:
    """L_t per anchor: CE(s_i, y_i) - alpha / (m_l - 1) * sum_n CE(s_{i_n}, y_{i_n'})

    The mismatched terms are summed in sorted order, so permuting pairs leaves L_t unchanged.
    """
    matched = cross_entropy(batch.predictions, batch.labels, reduction)
    cross_s = batch.predictions[batch.pairs[..., 0]]
    cross_y = batch.labels[batch.pairs[..., 1]]
    mismatched = cross_entropy(cross_s, cross_y, reduction)
    ordered, _ = torch.sort(mismatched, dim=-1)
    penalty = ordered.sum(dim=-1) * (batch.alpha / (batch.m_l - 1))
    return PenaltyTerms(matched, mismatched, matched - penalty)


def penalty_loss(batch: PeerBatch, reduction: Literal["sum", "mean"] = "mean") -> torch.Tensor:
    """Batch mean of the per-anchor penalty loss; may be negative"""
    loss = penalty_terms(batch, reduction).loss.mean()
    logging.debug(f"Penalty loss {loss.item():.6f} over {batch.predictions.shape[0]} anchors "
                  f"(alpha={batch.alpha}, m_l={batch.m_l})")
    return loss


def batch_scores(stats: CorrelationStats, batch: PeerBatch, threshold: float = 0.5) -> Scores:
    """Mean S and Psi over all anchors and their cross pairs"""
    s = batch.predictions.detach().cpu().numpy()
    y = batch.labels.detach().cpu().numpy()
    pairs = batch.pairs.numpy()
    S_total, Psi_total, n = 0.0, 0.0, 0
    for anchor in range(s.shape[0]):
        for a, b in pairs[anchor]:
            scores = score_functions(stats.omega, (s[anchor], y[anchor]), (s[a], y[b]),
                                     batch.alpha, threshold)
            S_total += scores.S
            Psi_total += scores.Psi
            n += 1
    return Scores(S_total / n, Psi_total / n)


def diagnostics_row(epoch: int, stats: CorrelationStats, scores: Scores) -> dict[str, float | int]:
    """Flatten one epoch's correlation statistics for the diagnostics CSV"""
    row: dict[str, float | int] = {"epoch": epoch}
    for a in range(2):
        for b in range(2):
            row[f"delta_{a + 1}{b + 1}"] = float(stats.delta[a, b])
    for a in range(2):
        for b in range(2):
            row[f"omega_{a + 1}{b + 1}"] = int(stats.omega[a, b])
    row["S_mean"] = scores.S
    row["Psi_mean"] = scores.Psi
    return row

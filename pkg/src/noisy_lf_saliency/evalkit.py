"""
Evaluation kit
F-measure and MAE against clean masks, the forgetting-event and cross-scene noise analyses,
saliency map rendering and CSV reports.
"""

import csv
import logging
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .corpus_manager import write_pgm
from .exceptions import AnalysisError, DimensionError
from .forgetting import EVENT_THRESHOLD, STREAMS, ForgettingState
from .fusion import SaliencyNetwork
from .synthdata import FocalStackSample, NoiseMode

BETA2 = 0.3


def adaptive_threshold(s: np.ndarray) -> float:
    return float(min(2.0 * float(np.mean(s)), 1.0))


def f_measure(s: np.ndarray, y: np.ndarray, beta2: float = BETA2) -> float:
    """F-measure of s binarized at the adaptive threshold min(2 * mean(s), 1)

    Pixels at exactly zero never count as salient. Returns 1 when both the binarized
    prediction and the mask are empty and 0 when there is no true positive.
    """
    s = np.asarray(s, dtype=np.float64)
    y = np.asarray(y) > 0.5
    if s.shape != y.shape:
        raise DimensionError("prediction and mask differ in shape", ("s.shape", "y.shape"))
    predicted = (s >= adaptive_threshold(s)) & (s > 0)
    if not predicted.any() and not y.any():
        return 1.0
    tp = int(np.count_nonzero(predicted & y))
    if tp == 0:
        return 0.0
    precision = tp / int(np.count_nonzero(predicted))
    recall = tp / int(np.count_nonzero(y))
    return (1.0 + beta2) * precision * recall / (beta2 * precision + recall)


def mae(s: np.ndarray, y: np.ndarray) -> float:
    s = np.asarray(s, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if s.shape != y.shape:
        raise DimensionError("prediction and mask differ in shape", ("s.shape", "y.shape"))
    return float(np.mean(np.abs(s - y)))


@dataclass
class MetricReport:
    """Per-sample and mean F-measure and MAE

    Attributes:
        sample_ids: Evaluated samples, in order
        f_measures: Per-sample F-measure
        maes: Per-sample MAE
        thresholds: Per-sample adaptive binarization threshold
        beta2: F-measure weight
    """
    sample_ids: list[str] = field(default_factory=list)
    f_measures: list[float] = field(default_factory=list)
    maes: list[float] = field(default_factory=list)
    thresholds: list[float] = field(default_factory=list)
    beta2: float = BETA2

    def add(self, sample_id: str, s: np.ndarray, y: np.ndarray) -> None:
        self.sample_ids.append(sample_id)
        self.f_measures.append(f_measure(s, y, self.beta2))
        self.maes.append(mae(s, y))
        self.thresholds.append(adaptive_threshold(s))

    @property
    def count(self) -> int:
        return len(self.sample_ids)

    @property
    def mean_f(self) -> float:
        return float(np.mean(self.f_measures)) if self.f_measures else float("nan")

    @property
    def mean_mae(self) -> float:
        return float(np.mean(self.maes)) if self.maes else float("nan")

    def rows(self) -> list[dict[str, Any]]:
        rows: list[dict[str, Any]] = [
            {"sample_id": i, "f_measure": f, "mae": m, "threshold": t}
            for i, f, m, t in zip(self.sample_ids, self.f_measures, self.maes, self.thresholds)
        ]
        rows.append({"sample_id": "mean", "f_measure": self.mean_f, "mae": self.mean_mae,
                     "threshold": ""})
        return rows


def write_csv(path: str | Path, fieldnames: Sequence[str], rows: Iterable[Mapping[str, Any]]) -> Path:
    """Write rows with repr-formatted floats and '\\n' line endings"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fieldnames), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in fieldnames})
    logging.debug(f"Wrote {path}")
    return path


def write_metric_report(path: str | Path, report: MetricReport) -> Path:
    return write_csv(path, ("sample_id", "f_measure", "mae", "threshold"), report.rows())


def batch_tensors(samples: Sequence[Any], dtype: torch.dtype) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack the all-focus images and focal stacks of samples or training views"""
    all_focus = torch.from_numpy(np.stack([s.all_focus for s in samples])).to(dtype)
    focal_stack = torch.from_numpy(np.stack([s.focal_stack for s in samples])).to(dtype)
    return all_focus, focal_stack


def predict(network: SaliencyNetwork, samples: Sequence[Any], dtype: torch.dtype = torch.float32,
            batch_size: int = 8) -> list[dict[str, np.ndarray]]:
    """Forward pass without forgetting guidance (M = 1)

    Returns:
        Per sample {"s_i", "s_f", "s_r"} float64 maps
    """
    outputs: list[dict[str, np.ndarray]] = []
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            triple = network(*batch_tensors(chunk, dtype))
            for b in range(len(chunk)):
                outputs.append({name: getattr(triple, name)[b].double().numpy()
                                for name in ("s_i", "s_f", "s_r")})
    return outputs


def evaluate_model(network: SaliencyNetwork, samples: Sequence[FocalStackSample],
                   dtype: torch.dtype = torch.float32, batch_size: int = 8) -> MetricReport:
    """MetricReport of the final prediction against the clean masks"""
    report = MetricReport()
    for sample, out in zip(samples, predict(network, samples, dtype, batch_size)):
        report.add(sample.sample_id, out["s_i"], sample.clean_mask)
    logging.debug(f"Evaluated {report.count} samples: F={report.mean_f:.4f} MAE={report.mean_mae:.4f}")
    return report


def label_quality(samples: Sequence[FocalStackSample]) -> MetricReport:
    """MetricReport of the noisy labels themselves against the clean masks"""
    report = MetricReport()
    for sample in samples:
        report.add(sample.sample_id, sample.noisy_label, sample.clean_mask)
    return report


def render_map(s: np.ndarray | torch.Tensor, path: str | Path) -> Path:
    """Write a map in [0, 1] as an 8-bit PGM"""
    if isinstance(s, torch.Tensor):
        s = s.detach().double().cpu().numpy()
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2:
        raise DimensionError("saliency map must be (H, W)", ("ndim",), (s.ndim,))
    write_pgm(path, s)
    return Path(path)


def _require_noise_masks(samples: Sequence[FocalStackSample]) -> None:
    for sample in samples:
        if sample.metadata["noise"].get("mode") == NoiseMode.HEURISTIC.value:
            raise AnalysisError(
                f"Sample {sample.sample_id} has heuristic labels; this analysis needs a corpus "
                "generated with noise mode 'corruption' (or 'clean').")


def bounding_box(mask: np.ndarray) -> tuple[slice, slice] | None:
    """Bounding box of the nonzero pixels, or None if the mask is empty"""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    return slice(rows[0], rows[-1] + 1), slice(cols[0], cols[-1] + 1)


@dataclass
class PopulationStats:
    """Forgetting statistics of one pixel population (noisy or clean) in one stream"""
    stream: str
    population: str
    pixels: int = 0
    over_threshold: int = 0
    bbox_pixels: int = 0
    bbox_over_threshold: int = 0
    first_learn_sum: int = 0
    never_learned: int = 0
    histogram: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    @property
    def applicable(self) -> bool:
        return self.pixels > 0

    @property
    def over_threshold_fraction(self) -> float | None:
        return self.over_threshold / self.pixels if self.pixels else None

    @property
    def bbox_over_threshold_fraction(self) -> float | None:
        return self.bbox_over_threshold / self.bbox_pixels if self.bbox_pixels else None

    @property
    def mean_first_learn(self) -> float | None:
        return self.first_learn_sum / self.pixels if self.pixels else None

    def row(self) -> dict[str, Any]:
        return {"stream": self.stream, "population": self.population, "pixels": self.pixels,
                "applicable": int(self.applicable),
                "over_threshold_fraction": self.over_threshold_fraction,
                "bbox_pixels": self.bbox_pixels,
                "bbox_over_threshold_fraction": self.bbox_over_threshold_fraction,
                "mean_first_learn": self.mean_first_learn,
                "never_learned": self.never_learned}


@dataclass
class ForgettingReport:
    n_epochs: int
    threshold: int
    stats: dict[tuple[str, str], PopulationStats]

    def get(self, stream: str, population: str) -> PopulationStats:
        return self.stats[(stream, population)]

    def separation(self, stream: str = "any") -> float | None:
        """Ratio of the noisy to the clean over-threshold fraction"""
        noisy = self.get(stream, "noisy").over_threshold_fraction
        clean = self.get(stream, "clean").over_threshold_fraction
        if noisy is None or clean is None or (clean == 0 and noisy == 0):
            return None
        return noisy / clean if clean else float("inf")

    def summary_rows(self) -> list[dict[str, Any]]:
        return [s.row() for s in self.stats.values()]

    def histogram_rows(self) -> list[dict[str, Any]]:
        rows = []
        for s in self.stats.values():
            for epoch, count in enumerate(s.histogram[:self.n_epochs]):
                rows.append({"stream": s.stream, "population": s.population, "epoch": epoch,
                             "count": int(count)})
            rows.append({"stream": s.stream, "population": s.population, "epoch": "never",
                         "count": int(s.never_learned)})
        return rows


def forgetting_analysis(state: ForgettingState, samples: Sequence[FocalStackSample],
                        n_epochs: int, threshold: int = EVENT_THRESHOLD) -> ForgettingReport:
    """Forgetting-event and first-learning distributions split by noisy and clean pixels

    Args:
        state: Forgetting state logged by a training run
        samples: The run's training samples, with clean masks (noise mask is label != mask)
        n_epochs: Epochs trained; never-learned pixels count as learned at this epoch
        threshold: A pixel counts when it has more than this many forgetting events

    Returns:
        ForgettingReport per stream ("f", "r" and "any") and population
    """
    _require_noise_masks(samples)
    stats = {(stream, pop): PopulationStats(stream, pop, histogram=np.zeros(n_epochs + 1, np.int64))
             for stream in (*STREAMS, "any") for pop in ("noisy", "clean")}
    for sample in samples:
        if sample.sample_id not in state:
            raise AnalysisError(f"no forgetting state logged for {sample.sample_id}")
        noisy = (sample.noisy_label > 0.5) != (sample.clean_mask > 0.5)
        box = bounding_box(sample.clean_mask > 0.5)
        in_box = np.zeros_like(noisy)
        if box is not None:
            in_box[box] = True
        G = {s: state.counts(sample.sample_id, s) for s in STREAMS}
        first = {s: state.first_learn(sample.sample_id, s) for s in STREAMS}
        G["any"] = np.maximum(G["f"], G["r"])
        learned = [np.where(first[s] < 0, np.iinfo(np.int64).max, first[s]) for s in STREAMS]
        earliest = np.minimum(*learned)
        first["any"] = np.where(earliest == np.iinfo(np.int64).max, -1, earliest)
        for stream in (*STREAMS, "any"):
            over = G[stream] > threshold
            censored = np.where(first[stream] < 0, n_epochs, first[stream])
            for pop, where in (("noisy", noisy), ("clean", ~noisy)):
                st = stats[(stream, pop)]
                st.pixels += int(where.sum())
                st.over_threshold += int((over & where).sum())
                st.bbox_pixels += int((where & in_box).sum())
                st.bbox_over_threshold += int((over & where & in_box).sum())
                st.first_learn_sum += int(censored[where].sum())
                st.never_learned += int(((first[stream] < 0) & where).sum())
                st.histogram += np.bincount(np.clip(censored[where], 0, n_epochs),
                                            minlength=n_epochs + 1)[:n_epochs + 1]
    for st in stats.values():
        if not st.applicable:
            logging.info(f"Stream {st.stream}: no {st.population} pixels, split not applicable")
    return ForgettingReport(n_epochs, threshold, stats)


def write_forgetting_report(out_dir: str | Path, report: ForgettingReport) -> list[Path]:
    out_dir = Path(out_dir)
    summary = write_csv(out_dir / "forgetting_summary.csv",
                        ("stream", "population", "pixels", "applicable", "over_threshold_fraction",
                         "bbox_pixels", "bbox_over_threshold_fraction", "mean_first_learn",
                         "never_learned"),
                        report.summary_rows())
    histogram = write_csv(out_dir / "first_learn_histogram.csv",
                          ("stream", "population", "epoch", "count"), report.histogram_rows())
    return [summary, histogram]


@dataclass
class CorrelationReport:
    rows: list[dict[str, Any]]
    omitted: int


def cross_scene_correlation(samples: Sequence[FocalStackSample]) -> CorrelationReport:
    """One point per scene: mean intensity and mean normalized distance of its noisy pixels

    Distances are measured from the clean object's centroid and divided by the image diagonal.
    Scenes without noisy pixels are omitted and counted.
    """
    _require_noise_masks(samples)
    rows: list[dict[str, Any]] = []
    omitted = 0
    for sample in samples:
        noisy = (sample.noisy_label > 0.5) != (sample.clean_mask > 0.5)
        if not noisy.any():
            omitted += 1
            continue
        h, w = noisy.shape
        obj = np.argwhere(sample.clean_mask > 0.5)
        centroid = obj.mean(axis=0) if obj.size else np.array([(h - 1) / 2.0, (w - 1) / 2.0])
        points = np.argwhere(noisy)
        distance = np.sqrt(((points - centroid) ** 2).sum(axis=1)).mean() / np.hypot(h, w)
        intensity = sample.all_focus.mean(axis=0)[noisy].mean()
        rows.append({"sample_id": sample.sample_id, "noisy_pixels": int(noisy.sum()),
                     "mean_intensity": float(intensity), "mean_distance": float(distance)})
    if omitted:
        logging.info(f"Omitted {omitted} scenes without noisy pixels")
    return CorrelationReport(rows, omitted)


def write_correlation_report(path: str | Path, report: CorrelationReport) -> Path:
    return write_csv(path, ("sample_id", "noisy_pixels", "mean_intensity", "mean_distance"),
                     report.rows)

"""
Corpus Manager
Reads and writes synthetic light field corpora as directories of PGM images and JSON metadata
"""

import json
import logging
import shutil
from collections.abc import Callable, Iterable
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image

from .exceptions import CorpusLoadError
from .synthdata import FocalStackSample, SampleMetadata

META_FILE = "meta.json"
CORPUS_FILE = "corpus.json"


def to_bytes(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] to 0..255 with round-half-up"""
    return np.floor(np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_pgm(path: str | Path, values: np.ndarray) -> None:
    """Write a (H, W) array in [0, 1] as a binary PGM (P5, maxval 255)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_bytes(values)).save(path, format="PPM")


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a binary PGM into a float64 (H, W) array in [0, 1]

    Raises:
        CorpusLoadError: the file is missing, not a P5 PGM, or truncated
    """
    path = Path(path)
    if not path.exists():
        raise CorpusLoadError("missing image file", path)
    try:
        with Image.open(path) as img:
            if img.format != "PPM" or img.mode != "L":
                raise CorpusLoadError(f"not a grayscale PGM (format={img.format}, mode={img.mode})",
                                      path)
            img.load()
            data = np.asarray(img, dtype=np.uint8)
    except CorpusLoadError:
        raise
    except (OSError, ValueError, SyntaxError) as e:
        raise CorpusLoadError(f"malformed PGM ({e})", path) from e
    return data.astype(np.float64) / 255.0


class CorpusManager:
    """Manages a corpus directory: one subdirectory per sample"""

    def __init__(self, root: str | Path):
        """Initialize the Corpus Manager

        Args:
            root: Corpus directory
        """
        self.root = Path(root)

    def list_ids(self, split: str | None = None) -> list[str]:
        """List sample ids in sorted order

        Args:
            split: Optional split filter ("train" or "eval")

        Returns:
            Sorted sample ids
        """
        if not self.root.is_dir():
            raise CorpusLoadError("corpus directory not found", self.root)
        ids = sorted(p.name for p in self.root.iterdir() if (p / META_FILE).is_file())
        if split is not None:
            ids = [i for i in ids if self.read_metadata(i)["split"] == split]
        logging.debug(f"Found {len(ids)} samples in {self.root} (split={split})")
        return ids

    def is_empty(self) -> bool:
        return not self.root.exists() or not any(self.root.iterdir())

    def clear(self) -> None:
        """Remove all sample directories and the corpus descriptor; manifests are kept"""
        if not self.root.is_dir():
            return
        for p in sorted(self.root.iterdir()):
            if p.is_dir() and (p / META_FILE).is_file():
                shutil.rmtree(p)
        (self.root / CORPUS_FILE).unlink(missing_ok=True)
        logging.info(f"Cleared existing samples in {self.root}")

    def _image_names(self, stem: str, channels: int) -> list[str]:
        if channels == 1:
            return [f"{stem}.pgm"]
        return [f"{stem}_c{c}.pgm" for c in range(channels)]

    def write_sample(self, sample: FocalStackSample) -> Path:
        """Write one sample directory

        Args:
            sample: Sample to write

        Returns:
            Path of the sample directory
        """
        directory = self.root / sample.sample_id
        directory.mkdir(parents=True, exist_ok=True)
        channels = sample.all_focus.shape[0]
        for c, name in enumerate(self._image_names("allfocus", channels)):
            write_pgm(directory / name, sample.all_focus[c])
        for j, slice_ in enumerate(sample.focal_stack):
            for c, name in enumerate(self._image_names(f"slice_{j:02d}", channels)):
                write_pgm(directory / name, slice_[c])
        write_pgm(directory / "noisy.pgm", sample.noisy_label)
        write_pgm(directory / "clean.pgm", sample.clean_mask)
        with open(directory / META_FILE, "w", encoding="utf-8") as fh:
            json.dump(sample.metadata, fh, indent=2, sort_keys=True)
            fh.write("\n")
        logging.debug(f"Wrote sample {sample.sample_id} to {directory}")
        return directory

    def write_corpus(self, samples: Iterable[FocalStackSample], description: dict[str, Any] | None = None,
                     progress_callback: Callable[[int], None] | None = None) -> int:
        """Write all samples and an optional corpus descriptor

        Args:
            samples: Samples to write
            description: Generation config and seed, stored as corpus.json
            progress_callback: Optional callback receiving a percentage

        Returns:
            Number of samples written
        """
        samples = list(samples)
        self.root.mkdir(parents=True, exist_ok=True)
        for n, sample in enumerate(samples, start=1):
            self.write_sample(sample)
            if progress_callback:
                progress_callback(int(100 * n / max(len(samples), 1)))
        if description is not None:
            with open(self.root / CORPUS_FILE, "w", encoding="utf-8") as fh:
                json.dump(description, fh, indent=2, sort_keys=True)
                fh.write("\n")
        logging.info(f"Corpus with {len(samples)} samples written to {self.root}")
        return len(samples)

    def read_metadata(self, sample_id: str) -> SampleMetadata:
        path = self.root / sample_id / META_FILE
        try:
            with open(path, encoding="utf-8") as fh:
                meta = json.load(fh)
        except FileNotFoundError as e:
            raise CorpusLoadError("missing metadata", path) from e
        except json.JSONDecodeError as e:
            raise CorpusLoadError(f"malformed metadata ({e})", path) from e
        for key in ("id", "split", "k", "scene", "noise"):
            if key not in meta:
                raise CorpusLoadError(f"metadata lacks '{key}'", path)
        return meta

    def read_description(self) -> dict[str, Any] | None:
        path = self.root / CORPUS_FILE
        if not path.is_file():
            return None
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)

    def read_sample(self, sample_id: str) -> FocalStackSample:
        """Read one sample

        Args:
            sample_id: Sample directory name

        Returns:
            The sample, bit-identical to what was written
        """
        directory = self.root / sample_id
        meta = self.read_metadata(sample_id)
        channels = int(meta["scene"].get("channels", 1))
        all_focus = np.stack([read_pgm(directory / n)
                              for n in self._image_names("allfocus", channels)])
        slices = []
        for j in range(int(meta["k"])):
            slices.append(np.stack([read_pgm(directory / n)
                                    for n in self._image_names(f"slice_{j:02d}", channels)]))
        stack = np.stack(slices)
        noisy = read_pgm(directory / "noisy.pgm")
        clean = read_pgm(directory / "clean.pgm")
        for name, arr in (("noisy.pgm", noisy), ("clean.pgm", clean)):
            if arr.shape != all_focus.shape[1:]:
                raise CorpusLoadError(f"{name} is {arr.shape}, image is {all_focus.shape[1:]}",
                                      directory / name)
        return FocalStackSample(sample_id, all_focus, stack, noisy, clean, meta)

    def read_corpus(self, split: str | None = None) -> list[FocalStackSample]:
        """Read all samples (optionally one split) in sorted id order"""
        samples = [self.read_sample(i) for i in self.list_ids(split)]
        logging.info(f"Loaded {len(samples)} samples from {self.root}")
        return samples

import json
import os

import numpy as np
import pytest
import torch

from noisy_lf_saliency.corpus_manager import CorpusManager
from noisy_lf_saliency.fusion import ArchitectureConfig
from noisy_lf_saliency.synthdata import (FocalStackSample, GenConfig, NoiseSpec, SceneSpec,
                                         generate_corpus)
from noisy_lf_saliency.trainer import TrainConfig

RUN_SLOW_ENV = "NLFSAL_RUN_SLOW"


def pytest_collection_modifyitems(config, items):
    if os.environ.get(RUN_SLOW_ENV) == "1":
        return
    skip_slow = pytest.mark.skip(reason=f"slow; set {RUN_SLOW_ENV}=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


# ---- Tiny corpora ----
def tiny_gen_config(mode="corruption", n_train=6, n_eval=3, **noise):
    noise.setdefault("rate", 0.1)
    noise.setdefault("radius", 1)
    return GenConfig(n_train=n_train, n_eval=n_eval, k=3, blur_scale=4.0,
                     scene=SceneSpec(height=32, width=32, num_objects=2),
                     noise=NoiseSpec(mode=mode, **noise))


@pytest.fixture(scope="session")
def corpus():
    """Six training and three evaluation scenes, 32x32, k = 3, corruption noise"""
    return generate_corpus(tiny_gen_config(), seed=0)


@pytest.fixture(scope="session")
def train_samples(corpus):
    return [s for s in corpus if s.split == "train"]


@pytest.fixture(scope="session")
def eval_samples(corpus):
    return [s for s in corpus if s.split == "eval"]


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory, corpus):
    """The tiny corpus written to disk once per session"""
    root = tmp_path_factory.mktemp("corpus")
    CorpusManager(root).write_corpus(corpus, description={"config": tiny_gen_config().to_dict(),
                                                          "seed": 0})
    return root


@pytest.fixture(scope="session")
def heuristic_corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("heuristic")
    CorpusManager(root).write_corpus(generate_corpus(tiny_gen_config("heuristic"), seed=0))
    return root


# ---- Tiny networks ----
@pytest.fixture
def tiny_architecture():
    """Two encoder levels, widths 4 and 8; sides must be multiples of 4"""
    return ArchitectureConfig(k=3, channels=1, widths=(4, 8), levels=2, head_width=4)


@pytest.fixture
def tiny_train_config(tiny_architecture):
    return TrainConfig(epochs=2, batch_size=3, m_l=3, seed=0, dtype="float64",
                       checkpoint_every=1, architecture=tiny_architecture)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def float64_inputs():
    """Batch of three random 16x16 scenes with k = 3 slices and binary labels"""
    generator = torch.Generator().manual_seed(7)
    all_focus = torch.rand(3, 1, 16, 16, generator=generator, dtype=torch.float64)
    focal_stack = torch.rand(3, 3, 1, 16, 16, generator=generator, dtype=torch.float64)
    labels = (torch.rand(3, 16, 16, generator=generator, dtype=torch.float64) > 0.5).double()
    return all_focus, focal_stack, labels


def make_sample(sample_id, clean_mask, noisy_label, all_focus=None, k=2, mode="corruption"):
    """Hand-built sample for analyses that only read masks, labels and the all-focus image"""
    h, w = clean_mask.shape
    if all_focus is None:
        all_focus = np.full((1, h, w), 0.5)
    metadata = {"id": sample_id, "split": "train", "seed": 0, "k": k, "blur_scale": 0.0,
                "scene": SceneSpec(height=h, width=w).to_dict(),
                "noise": NoiseSpec(mode=mode).to_dict()}
    stack = np.repeat(all_focus[None], k, axis=0)
    return FocalStackSample(sample_id, all_focus, stack, noisy_label.astype(np.float64),
                            clean_mask.astype(np.float64), metadata)


# ---- CLI configs ----
@pytest.fixture
def gen_config_file(tmp_path):
    path = tmp_path / "gen.json"
    path.write_text(json.dumps({"n_train": 6, "n_eval": 3, "k": 3, "blur_scale": 4.0,
                                "scene": {"height": 32, "width": 32},
                                "noise": {"mode": "corruption", "rate": 0.1, "radius": 1}}))
    return path


@pytest.fixture
def train_config_file(tmp_path):
    path = tmp_path / "train.json"
    path.write_text(json.dumps({"batch_size": 3, "m_l": 3, "epochs": 2, "checkpoint_every": 1,
                                "architecture": {"widths": [4, 8], "levels": 2,
                                                 "head_width": 4}}))
    return path


@pytest.fixture
def sample_factory():
    return make_sample


@pytest.fixture
def gen_config_factory():
    return tiny_gen_config

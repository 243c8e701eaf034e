import numpy as np
import pytest
import torch

from ztts import pipeline
from ztts.presets import tiny_config
from ztts.synthetic import make_corpus

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_corpus")
    manifest = make_corpus(root, n_clips=4, sample_rate=8000, seed=7)
    return manifest


@pytest.fixture(scope="session")
def tiny_dataset(tiny_corpus, tmp_path_factory):
    """Prepared tiny dataset shared by pipeline-level tests (read-only)."""
    workdir = tmp_path_factory.mktemp("tiny_run")
    cfg = tiny_config(str(workdir), str(tiny_corpus))
    pipeline.prepare_data(cfg)
    return cfg


def sine(freq: float, sr: int, seconds: float = 1.0, amp: float = 0.5) -> np.ndarray:
    t = np.arange(int(sr * seconds)) / sr
    return (amp * np.sin(2 * np.pi * freq * t)).astype(np.float32)

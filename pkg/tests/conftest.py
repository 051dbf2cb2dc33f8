import copy

import numpy as np
import pytest

from mdprune.corpus import build_sequences, generate_corpus, split_calibration
from mdprune.model import (ModelConfig, build_toy_model,
                           collect_activation_stats, freeze_pretrained,
                           pretrain)


@pytest.fixture(scope="session")
def small_setup():
    """A pretrained depth-1 toy model with activation stats, plus its
    calibration and held-out splits. Shared read-only across tests; tests
    that mutate must deepcopy."""
    docs = generate_corpus(7, n_docs=16, doc_len=64)
    full = build_sequences(docs, 16)
    calib, held = split_calibration(full, 0.125)
    cfg = ModelConfig(depth=1, width=16, seed=7)
    model = build_toy_model(cfg)
    pretrain(model, calib, steps=150, lr=0.2, batch_size=8, seed=7)
    freeze_pretrained(model)
    collect_activation_stats(model, calib)
    return model, calib, held


@pytest.fixture()
def model_copy(small_setup):
    model, calib, held = small_setup
    return copy.deepcopy(model), calib, held


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)

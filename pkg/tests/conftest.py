"""
Shared fixtures: a tiny configuration that keeps every model forward pass
in the millisecond range, and an in-memory corpus generated from it.
"""

from typing import Any, Dict, Final

import numpy as np
import pytest

from htsc.data.corpus import Corpus
from htsc.training.config import Config, ConfigBuilder


TINY: Final[Dict[str, Any]] = {
    "data.image_size": 16,
    "data.patch": 4,
    "data.pos_rows": 2,
    "data.max_entities": 2,
    "data.vocab_size": 32,
    "data.n_max": 16,
    "data.train": 8,
    "data.val": 4,
    "data.test": 4,
    "model.width": 16,
    "model.heads": 2,
    "model.enc_blocks": 1,
    "model.dec_blocks": 1,
    "eclo.Q": 4,
    "eclo.P": 4,
    "eclo.M": 2,
    "nwgm.queries": 2,
    "train.batch_size": 4,
    "train.epochs": 2,
    "stage2.epochs": 1,
}


def tiny_config(**changes: Any) -> Config:
    """
    The tiny configuration with dotted-key changes written as a__b=value.
    """

    builder: ConfigBuilder = ConfigBuilder().update(TINY)
    for key, value in changes.items():
        builder.set(key.replace("__", "."), value)
    return builder.build()


@pytest.fixture
def config() -> Config:
    return tiny_config()


@pytest.fixture
def corpus(config: Config) -> Corpus:
    return Corpus.from_config(config)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def make_config():
    return tiny_config

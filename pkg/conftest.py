"""Shared fixtures: a tiny model for fast unit tests and one full default
pipeline run (session scoped) for the slow end-to-end checks."""

import logging

import numpy as np
import pytest

from embedding_align_lab.config import CorpusConfig, ModelConfig
from embedding_align_lab.lab_tools.corpus import Vocabulary
from embedding_align_lab.lab_tools.encoders import init_params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig(image_size=8, patch_size=4, vision_width=8, text_width=8, embed_dim=6, heads=2,
                       head_width=4, vision_depth=1, text_depth=1, mlp_width=12, vocab_size=40,
                       max_text_length=8)


@pytest.fixture
def tiny_params(tiny_config):
    return init_params(tiny_config, seed=0)


@pytest.fixture
def vocab():
    return Vocabulary.default()


@pytest.fixture
def tiny_corpus_config():
    return CorpusConfig(shapes=["circle", "square"], colors=["red", "blue"], per_class=5, seed=3)


@pytest.fixture
def random_image(rng, tiny_config):
    size = tiny_config.image_size
    return rng.uniform(0.1, 0.9, size=(size, size, 3)).astype(np.float32)


@pytest.fixture(scope="session")
def pipeline_run(tmp_path_factory):
    """gen -> train -> attack (100 pairs) -> eval -> detect with the default configuration."""
    from embedding_align_lab.cli import main

    logging.getLogger().setLevel(logging.INFO)
    out = tmp_path_factory.mktemp("pipeline")
    for command in (["gen"], ["train"], ["attack", "--num-pairs", "100"], ["eval"], ["detect"]):
        assert main(["--out", str(out), "--seed", "0", *command]) == 0, command
    return out

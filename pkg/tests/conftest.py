import numpy as np
import pytest
import torch

from glyphreid.config import model_config_for_corpus
from glyphreid.corpus import CorpusSpec, generate_corpus
from glyphreid.model import ModelConfig, RetrievalModel


TINY_MODEL = ModelConfig(
    image_layers=1, text_layers=1, cross_layers=1,
    hidden_dim=16, heads=2, proj_dim=8,
)


@pytest.fixture
def small_corpus():
    spec = CorpusSpec(
        n_identities=6, images_per_identity=2, texts_per_image=1,
        occlusion_rate=0.2, max_len=8, seed=11,
    )
    return generate_corpus(spec)


@pytest.fixture
def tiny_model(small_corpus):
    torch.manual_seed(0)
    return RetrievalModel(model_config_for_corpus(TINY_MODEL, small_corpus))


@pytest.fixture
def rng():
    return np.random.default_rng(123)

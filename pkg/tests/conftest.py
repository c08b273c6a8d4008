import numpy as np
import pytest
import torch

from brainalign.core import EncoderConfig, SubjectSpec, new_rng

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return new_rng(1234)


@pytest.fixture
def toy_config():
    return EncoderConfig(token_count=3, token_dim=8, subject_token_count=2, latent_query_count=4,
                         encoder_depth=1, attention_heads=2, output_channels=5)


@pytest.fixture
def two_specs():
    return [SubjectSpec("A", 7), SubjectSpec("B", 11)]


def random_boxes(rng, n):
    lo = rng.random((n, 2)) * 0.8
    hi = lo + 0.01 + rng.random((n, 2)) * (1.0 - lo - 0.01)
    return np.hstack([lo, hi])

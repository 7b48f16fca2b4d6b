import numpy as np
import pytest

from t2vlad import data as D
from t2vlad.model import Model, ModelConfig

SMALL_SYNTH = dict(
    num_pairs=12, num_topics=4,
    experts=("motion", "audio"), dims=(10, 8),
    noise_sigma=0.05, seed=3, latent_dim=16, topics_per_pair=2,
    segment_range=(3, 6), token_range=(4, 8),
    max_segments=6, max_tokens=10, text_dim=12,
    text_mode="embedding", captions_per_video=1, expert_dropout=0.2,
)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """A 12-pair two-expert dataset written to disk once per session."""
    root = tmp_path_factory.mktemp("smallds")
    sd = D.generate_synthetic_dataset(D.SynthConfig(**SMALL_SYNTH))
    path = D.write_dataset(sd, str(root))
    return D.load_dataset(path)


@pytest.fixture(scope="session")
def small_model(small_dataset):
    cfg = ModelConfig.from_dataset(small_dataset, dim=16, k=3, heads=2,
                                   dropout=0.0, max_tokens=10)
    return Model(cfg, seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)

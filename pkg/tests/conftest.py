import numpy as np
import pytest

from physiolite.model import ModelConfig, build_model
from physiolite.signal_io import gen_synthetic, standard_spectral_spec
from physiolite.training import TrainConfig, train


def tiny_config(**kw) -> ModelConfig:
    base = dict(signal_channels=4, n_freqs=4, kernel_set=(3, 5), stem_channels=8, branch_channels=8,
                mix_channels=16, embed_dim=16, depth=1, n_classes=3, window_len=64, seed=0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def spectral_small():
    return gen_synthetic(standard_spectral_spec(seed=3, n_windows=150, window_len=128))


@pytest.fixture(scope="session")
def trained_small(spectral_small):
    """Small model trained on the spectral benchmark; shared by quantization tests."""
    cfg = ModelConfig(signal_channels=4, n_freqs=8, stem_channels=16, branch_channels=16, mix_channels=32,
                      embed_dim=32, depth=2, n_classes=3, window_len=128, seed=0)
    model, history = train(build_model(cfg), spectral_small, TrainConfig(epochs=12, warmup_epochs=2, seed=0))
    return model, history

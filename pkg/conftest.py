"""Shared pytest fixtures."""
import numpy as np
import pytest
import yaml

from src.attention import AttentionParams
from src.config_manager import ConfigManager
from src.config_schema import EnhanceConfig, Strategy
from src.pipeline import RunSpec
from src.tensor_core import Rng


@pytest.fixture(autouse=True)
def reset_config_manager():
    ConfigManager.reset()
    yield
    ConfigManager.reset()


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def small_params(rng):
    """Two heads over an 8-wide model."""
    return AttentionParams.initialize(rng, d_model=8, d_k=4, heads=2)


@pytest.fixture
def small_spec():
    """Quick run: B=1, F=4, C=8, H=W=2, T=3, depth 2."""
    return RunSpec(seed=7, batch=1, frames=4, channels=8, height=2, width=2, steps=3,
                   depth=2, d_k=4, heads=2,
                   enhance=EnhanceConfig(strategy=Strategy.ENHANCE_BLOCK, tau=1.0))


@pytest.fixture
def make_sharp_params():
    """Single head with W_q = W_k = gain * I: each frame attends almost only to itself."""

    def make(d_model: int, gain: float, rng: Rng) -> AttentionParams:
        base = AttentionParams.initialize(rng, d_model=d_model, d_k=d_model, heads=1)
        identity = np.eye(d_model) * gain
        return AttentionParams(d_model=d_model, d_k=d_model, heads=1,
                               w_q=identity, w_k=identity, w_v=base.w_v, w_o=base.w_o)

    return make


@pytest.fixture
def config_file(tmp_path):
    """Writes a small config YAML; keyword sections are merged over the base."""

    def write(name: str = "config.yaml", **sections):
        data = {
            'run': {'seed': 3, 'frames': 4, 'channels': 8, 'height': 2, 'width': 2, 'steps': 2},
            'model': {'depth': 2, 'd_k': 4, 'heads': 2},
            'output': {'out_dir': str(tmp_path / 'out')},
        }
        for key, value in sections.items():
            data.setdefault(key, {}).update(value)
        path = tmp_path / name
        with open(path, 'w') as f:
            yaml.dump(data, f)
        return path

    return write

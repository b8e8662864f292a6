import numpy as np
import pytest

from motionmix.data_io import SyntheticConfig, generate_scenario
from motionmix.model import ModelConfig, PredictionModel


def tiny_config(**over):
    base = dict(
        history_steps=4,
        future_steps=6,
        dt=0.2,
        lstm_hidden=8,
        mcg_width=8,
        mcg_depth=2,
        cg_hidden_layers=1,
        max_road_segments=4,
        n_heads=1,
        modes_per_head=3,
        n_modes=3,
        anchor_dim=8,
        seed=0,
    )
    base.update(over)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_scenario():
    cfg = SyntheticConfig(template="t_junction", count=1, seed=7,
                          history_steps=4, future_steps=6)
    return generate_scenario(cfg, 0, np.random.default_rng(3))


@pytest.fixture
def tiny_model(tiny_scenario):
    model = PredictionModel(tiny_config())
    return model


@pytest.fixture
def scenario_batch():
    cfg = SyntheticConfig(template="t_junction", count=4, seed=5,
                          history_steps=4, future_steps=6)
    return [generate_scenario(cfg, i, np.random.default_rng(100 + i))
            for i in range(4)]

import numpy as np
import pytest
import torch

from scdkit.config import ModelConfig

# One verdict line per acceptance criterion, echoed at the end of the run
# so they stay visible in the full-suite output.
CRITERION_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERION_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def seed_all(seed: int) -> np.random.Generator:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    return np.random.default_rng(seed)


def toy_config(**overrides) -> ModelConfig:
    cfg = ModelConfig(
        stage_channels=(16, 32, 64, 128),
        stage_depths=(1, 1, 2, 1),
        state_dim=8,
        num_classes=4,
        seed=0,
    )
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg

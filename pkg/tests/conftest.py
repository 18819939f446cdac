import numpy as np
import pytest

from hvqcodec.model import HierarchicalVQModel, ModelConfig


def tiny_config(**kw) -> ModelConfig:
    base = dict(base_channels=4, stage_channels=(6, 8), codebook_dim=4, codebook_sizes=(8, 8),
                blocks_per_stage=1, kernel_size=3, block_size_train=16, block_size_compress=16, overlap=2)
    base.update(kw)
    return ModelConfig(**base)


def small_config(**kw) -> ModelConfig:
    base = dict(base_channels=8, stage_channels=(12, 16), codebook_dim=8, codebook_sizes=(32, 32),
                blocks_per_stage=1, kernel_size=3)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_model():
    return HierarchicalVQModel(tiny_config())


def pytest_configure(config):
    config.acceptance_lines = {}


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "acceptance_lines", {})
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for key in sorted(lines):
            terminalreporter.write_line(lines[key])

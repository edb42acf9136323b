import pytest
import torch

from nestdiff.config import build_config

torch.set_num_threads(1)

ACCEPTANCE_LINES: list[str] = []


def tiny_overrides(**extra) -> dict:
    """A configuration that trains in a few seconds."""
    base = {
        "data.n": 120,
        "data.image_size": 16,
        "model.K": 2,
        "model.shallow_hidden": [32, 16],
        "model.denoiser_width": 16,
        "model.encoder_hidden": [16, 16],
        "model.chain_hidden": [8],
        "diffusion.T": 10,
        "diffusion.alpha_first": 0.99,
        "diffusion.alpha_last": 0.5,
        "ensemble.M": 3,
        "train.epochs_backbone": 2,
        "train.epochs_shallow": 2,
        "train.epochs_diffusion": 2,
    }
    base.update(extra)
    return base


@pytest.fixture
def tiny_config():
    return build_config({}, tiny_overrides())


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

import sys
from pathlib import Path

import pytest
import torch

from clpscf.config import RunConfig, load_config
from clpscf.dataio import ToySpec, generate_toy_dataset
from clpscf.features import FeatureConfig
from clpscf.model import ModelConfig

TOY_CFG = Path(__file__).resolve().parents[1] / "configs" / "toy.cfg"


@pytest.fixture(autouse=True)
def _deterministic():
    torch.use_deterministic_algorithms(True)
    yield


@pytest.fixture(scope="session")
def toy_config() -> RunConfig:
    return load_config(TOY_CFG)


@pytest.fixture(scope="session")
def tiny_toy():
    """2 types x 2 IDs, 6 clips each, 0.25 s clips."""
    return generate_toy_dataset(ToySpec(num_types=2, ids_per_type=2, clips_per_id=6,
                                        clip_seconds=0.25, seed=3))


@pytest.fixture
def small_feature_cfg():
    return FeatureConfig(n_fft=256, hop=128, mel_bins=32, sample_rate=16000)


@pytest.fixture
def toy_model_cfg(small_feature_cfg):
    return ModelConfig(embed_dim=16, latent_dim=8, num_classes=4, backbone_variant="toy_cnn",
                       feature_cfg=small_feature_cfg)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.LINES:
        terminalreporter.section("acceptance criteria")
        for line in mod.LINES:
            terminalreporter.write_line(line)

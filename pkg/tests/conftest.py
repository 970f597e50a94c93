import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from partseg.config import PipelineConfig  # noqa: E402


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


@pytest.fixture
def default_cfg():
    return PipelineConfig()


@pytest.fixture
def tiny_cfg():
    """Small widths so model tests stay fast."""
    return PipelineConfig(channels=16, head_convs=2, batch_size=2, epochs=2,
                          lr_decay_epochs=(1,), image_size=64, n_instances_max=2,
                          max_train_rois=4)

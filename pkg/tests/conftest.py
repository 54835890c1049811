import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from stgcl.dataio import SynthConfig, synth_generate
from stgcl.graph import SkeletonTopology
from stgcl.model import EncoderConfig


@pytest.fixture(scope="session")
def chain3_topology():
    return SkeletonTopology(num_joints=3, edges=((0, 1), (1, 2)), center_joint=1)


@pytest.fixture(scope="session")
def tiny_encoder_config():
    return EncoderConfig(blocks=((3, 4, 1), (4, 5, 2)), temporal_kernel=3,
                         output_dim=5)


@pytest.fixture(scope="session")
def small_dataset():
    """12 samples, 3 classes, 2 views; fast enough for pipeline tests."""
    config = SynthConfig(num_classes=3, samples_per_class=4, num_subjects=4,
                         num_views=2, seed=123)
    return synth_generate(config)

# Shared fixtures: a tiny network grid and a tiny phantom corpus that exercise
# the same code paths as the desk-scale defaults in a few seconds.

import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from pxsg_core.networks import GeneratorNet, SegmentationNet, SiameseDiscriminator  # noqa: E402
from pxsg_core.phantom import synthesize_corpus  # noqa: E402
from pxsg_core.settings import NetworkConfig, PhantomSpec, TrainConfig  # noqa: E402
from pxsg_core.volume import Volume  # noqa: E402

TINY_DIMS = (16, 16, 16)
CORPUS_DIMS = (12, 14, 13)


@pytest.fixture(scope="session")
def net_config():
    return NetworkConfig(
        dims=TINY_DIMS,
        classes=3,
        key_dim=4,
        base_width=2,
        levels=2,
        key_width=2,
        embedding_dim=8,
        max_displacement=2.0,
    )


@pytest.fixture(scope="session")
def phantom_spec():
    return PhantomSpec(
        n_subjects=4,
        scans_per_subject=2,
        dims=CORPUS_DIMS,
        classes=3,
        shell_radii=(0.5, 1.0),
        seed=7,
    )


@pytest.fixture(scope="session")
def corpus(phantom_spec):
    return synthesize_corpus(phantom_spec)


@pytest.fixture
def generator(net_config):
    torch.manual_seed(0)
    return GeneratorNet(net_config)


@pytest.fixture
def segmenter(net_config):
    torch.manual_seed(1)
    return SegmentationNet(net_config)


@pytest.fixture
def discriminator(net_config):
    torch.manual_seed(2)
    return SiameseDiscriminator(net_config)


@pytest.fixture
def shifting_generator(generator):
    """A generator whose flows are a nonzero constant shift, so x_d differs from x."""
    with torch.no_grad():
        generator.forward_head.bias.copy_(torch.tensor([0.3, -0.2, 0.25]))
        generator.inverse_head.bias.copy_(torch.tensor([-0.3, 0.2, -0.25]))
    return generator


@pytest.fixture
def train_config(net_config):
    return TrainConfig(
        epochs=1,
        batch_size=1,
        pairs_per_step=2,
        steps_per_epoch=1,
        prefetch=1,
        network=net_config,
    )


@pytest.fixture
def random_volume():
    def make(dims=CORPUS_DIMS, seed=0):
        gen = torch.Generator().manual_seed(seed)
        return Volume(torch.rand(dims, generator=gen))
    return make

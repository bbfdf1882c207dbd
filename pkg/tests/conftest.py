"""Shared fixtures: seeded generators, a small camera and tiny synthetic scenes."""
import numpy as np
import pytest

from src.modules.depth_scene import SceneConfig, default_hand_geometry, make_dataset
from src.modules.geometry import default_camera
from src.modules.networks import TrainConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def camera():
    return default_camera(160, 120)


@pytest.fixture
def geometry():
    return default_hand_geometry()


@pytest.fixture
def hand_scene_config():
    return SceneConfig(width=160, height=120, object=None, noise_sigma=0.0)


@pytest.fixture
def object_scene_config():
    return SceneConfig(width=160, height=120, object="small-cuboid", noise_sigma=0.0)


@pytest.fixture
def hand_samples(hand_scene_config):
    samples, _ = make_dataset(6, hand_scene_config, 5, progress=False)
    return samples


@pytest.fixture
def object_samples(object_scene_config):
    samples, _ = make_dataset(6, object_scene_config, 5, progress=False)
    return samples


@pytest.fixture
def tiny_train_config():
    """Smallest configuration the architectures accept; a couple of epochs only."""
    return TrainConfig(epochs=2, batch_size=4, crop_size=16, channel_scale=0.125, noise_copies=1,
                       pose_cap=4, growth_every=1, growth_per_image=1, dtype="float64")

import pytest
import torch
from hypothesis import HealthCheck, settings

torch.set_num_threads(1)

settings.register_profile(
    "ci",
    deadline=None,
    max_examples=25,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("ci")


@pytest.fixture(scope="session")
def shapes_dataset():
    from selfdiff.data import make_shapes16

    return make_shapes16(n=256, seed=0)


@pytest.fixture(scope="session")
def toy_dit_spec():
    from selfdiff.backbones import BackboneSpec

    return BackboneSpec(family="dit", image_size=16, in_channels=3,
                        hidden_size=64, depth=6, heads=4, patch_size=4)


@pytest.fixture(scope="session")
def toy_uvit_spec():
    from selfdiff.backbones import BackboneSpec

    return BackboneSpec(family="uvit", image_size=16, in_channels=3,
                        hidden_size=64, depth=5, heads=4, patch_size=4)


@pytest.fixture(scope="session")
def toy_unet_spec():
    from selfdiff.backbones import BackboneSpec

    return BackboneSpec(family="unet_ddpm", image_size=16, in_channels=3,
                        base_channels=32, channel_multipliers=(1, 2),
                        blocks_per_resolution=2, attention_resolutions=(8,), heads=1)

import math

import pytest
import torch

from selfdiff.backbones import (
    BackboneSpec,
    adaptive_norm,
    build_backbone,
    count_parameters,
    param_count,
    sinusoidal_embedding,
)
from selfdiff.errors import ConfigError, ShapeError


class TestSinusoidalEmbedding:
    def test_zero_time_layout(self):
        emb = sinusoidal_embedding(torch.tensor([0.0]), 64)[0]
        assert torch.allclose(emb[:32], torch.zeros(32))
        assert torch.allclose(emb[32:], torch.ones(32))

    def test_requested_width(self):
        emb = sinusoidal_embedding(torch.tensor([3.7]), 512)
        assert emb.shape == (1, 512)

    def test_odd_dim_rejected(self):
        with pytest.raises(ConfigError):
            sinusoidal_embedding(torch.tensor([1.0]), 63)

    def test_no_collisions_on_grid(self):
        # exhaustive check over a 1e3-point grid
        ts = torch.linspace(0.0, 1000.0, 1000)
        emb = sinusoidal_embedding(ts, 64)
        dists = torch.cdist(emb, emb)
        dists.fill_diagonal_(float("inf"))
        assert float(dists.min()) > 1e-4


class TestAdaptiveNorm:
    def test_zero_modulation_is_plain_norm(self):
        x = torch.randn(3, 10)
        out = adaptive_norm(x, torch.zeros(10), torch.zeros(10), kind="layer")
        assert torch.allclose(out, torch.nn.functional.layer_norm(x, (10,)))

    def test_constant_input_layer_norm_returns_shift(self):
        x = torch.full((2, 8), 3.14)
        shift = torch.randn(8)
        out = adaptive_norm(x, torch.randn(8), shift, kind="layer")
        assert torch.allclose(out, shift.expand(2, 8), atol=1e-4)

    def test_group_norm_path(self):
        x = torch.randn(2, 8, 4, 4)
        out = adaptive_norm(x, torch.zeros(8), torch.zeros(8), kind="group", num_groups=4)
        assert torch.allclose(out, torch.nn.functional.group_norm(x, 4))

    def test_width_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            adaptive_norm(torch.randn(2, 8), torch.zeros(4), torch.zeros(4), kind="layer")

    def test_scale_gradient_matches_finite_differences(self):
        torch.manual_seed(0)
        x = torch.randn(4, 6, dtype=torch.float64)
        scale = torch.randn(6, dtype=torch.float64, requires_grad=True)
        shift = torch.randn(6, dtype=torch.float64)
        cot = torch.randn(4, 6, dtype=torch.float64)
        loss = (adaptive_norm(x, scale, shift, kind="layer") * cot).sum()
        (grad,) = torch.autograd.grad(loss, scale)
        eps = 1e-6
        for i in range(6):
            d = torch.zeros(6, dtype=torch.float64)
            d[i] = eps
            up = (adaptive_norm(x, scale.detach() + d, shift, kind="layer") * cot).sum()
            dn = (adaptive_norm(x, scale.detach() - d, shift, kind="layer") * cot).sum()
            fd = (up - dn) / (2 * eps)
            assert float(abs(grad[i] - fd)) <= 1e-4 * max(1.0, float(abs(fd)))


class TestForwardContracts:
    def test_dit_shapes_and_taps(self):
        spec = BackboneSpec(family="dit", image_size=8, in_channels=3, hidden_size=64,
                            depth=4, heads=4, patch_size=2)
        model = build_backbone(spec)
        x = torch.randn(2, 3, 8, 8)
        t = torch.full((2,), 100.0)
        out, taps = model(x, t, taps=(1, 2, 3, 4))
        assert out.shape == x.shape
        assert sorted(taps) == [1, 2, 3, 4]
        for tap in taps.values():
            assert tap.tensor.shape == (2, 16, 64)

    def test_taps_do_not_alter_prediction(self, toy_dit_spec, toy_uvit_spec, toy_unet_spec):
        for spec in (toy_dit_spec, toy_uvit_spec, toy_unet_spec):
            torch.manual_seed(0)
            model = build_backbone(spec)
            model.eval()
            x = torch.randn(2, 3, 16, 16)
            t = torch.full((2,), 40.0)
            with torch.no_grad():
                plain, _ = model(x, t)
                tapped, taps = model(x, t, taps=model.tap_indices)
            assert torch.equal(plain, tapped)
            assert len(taps) == len(model.tap_indices)

    def test_unknown_tap_rejected(self, toy_dit_spec):
        model = build_backbone(toy_dit_spec)
        with pytest.raises(ConfigError):
            model(torch.randn(1, 3, 16, 16), torch.ones(1), taps=(99,))

    def test_forward_deterministic_without_dropout(self, toy_uvit_spec):
        torch.manual_seed(1)
        model = build_backbone(toy_uvit_spec)
        model.eval()
        x = torch.randn(2, 3, 16, 16)
        t = torch.full((2,), 11.0)
        with torch.no_grad():
            a, _ = model(x, t)
            b, _ = model(x, t)
        assert torch.equal(a, b)

    def test_unet_decoder_tap_count(self, toy_unet_spec):
        model = build_backbone(toy_unet_spec)
        levels = len(toy_unet_spec.channel_multipliers)
        per_level = toy_unet_spec.blocks_per_resolution + 1
        assert len(model.tap_indices) == levels * per_level

    def test_token_count_property(self, toy_uvit_spec):
        model = build_backbone(toy_uvit_spec)
        layout = model.token_layout()
        n_patches = (toy_uvit_spec.image_size // toy_uvit_spec.patch_size) ** 2
        assert layout.n_tokens == n_patches + layout.n_special

    def test_class_conditional_null_row(self):
        spec = BackboneSpec(family="dit", image_size=8, in_channels=3, hidden_size=32,
                            depth=2, heads=4, patch_size=2, num_classes=5)
        model = build_backbone(spec)
        assert model.class_embed.num_embeddings == 6
        x = torch.randn(2, 3, 8, 8)
        t = torch.ones(2)
        with torch.no_grad():
            uncond, _ = model(x, t)  # falls back to the null row
            cond, _ = model(x, t, class_label=torch.tensor([1, 3]))
        assert uncond.shape == cond.shape


class TestParamCounts:
    def test_quadratic_scaling_with_hidden_size(self):
        small = BackboneSpec(family="dit", image_size=8, in_channels=3, hidden_size=64,
                             depth=4, heads=4, patch_size=2)
        big = BackboneSpec(family="dit", image_size=8, in_channels=3, hidden_size=128,
                           depth=4, heads=4, patch_size=2)
        ratio = param_count(big) / param_count(small)
        assert 3.2 <= ratio <= 4.3

    def test_meta_count_matches_real_instantiation(self, toy_uvit_spec):
        real = count_parameters(build_backbone(toy_uvit_spec))
        assert param_count(toy_uvit_spec) == real

    def test_uvit_depth_must_be_odd(self):
        with pytest.raises(ConfigError):
            build_backbone(BackboneSpec(family="uvit", image_size=8, hidden_size=32,
                                        depth=4, heads=4, patch_size=2))

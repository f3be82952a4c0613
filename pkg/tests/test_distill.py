import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from selfdiff.augment import AugmentConfig
from selfdiff.backbones import BackboneSpec, build_backbone
from selfdiff.distill import (
    ContrastiveConfig,
    ContrastiveLearner,
    PredictionHead,
    ProjectionHead,
    contrastive_step,
    ema_update,
    info_nce,
    make_teacher,
    project,
)
from selfdiff.errors import ConfigError, DomainError, StructureError
from selfdiff.formulations import DiffusionModel, Formulation
from selfdiff.rngutil import SeedStreams
from selfdiff.selfcond import SelfCondConfig


class _Scalar(nn.Module):
    def __init__(self, value: float):
        super().__init__()
        self.w = nn.Parameter(torch.tensor(value, dtype=torch.float64))


class TestEmaUpdate:
    def test_decay_zero_copies_student(self):
        t, s = _Scalar(5.0), _Scalar(-2.0)
        ema_update(t, s, 0.0)
        assert float(t.w.detach()) == -2.0

    def test_decay_one_freezes_teacher(self):
        t, s = _Scalar(5.0), _Scalar(-2.0)
        ema_update(t, s, 1.0)
        assert float(t.w.detach()) == 5.0

    @given(st.floats(min_value=0.5, max_value=0.9999), st.integers(min_value=1, max_value=200))
    def test_constant_student_geometric_closed_form(self, decay, k):
        # teacher_k = c * (1 - decay^k) for teacher starting at 0
        c = 3.7
        t, s = _Scalar(0.0), _Scalar(c)
        for _ in range(k):
            ema_update(t, s, decay)
        expected = c * (1.0 - decay**k)
        assert abs(float(t.w.detach()) - expected) < 1e-10

    def test_mismatched_structures_rejected(self):
        class Two(nn.Module):
            def __init__(self):
                super().__init__()
                self.a = nn.Parameter(torch.zeros(2))

        with pytest.raises(StructureError):
            ema_update(_Scalar(0.0), Two(), 0.9)

    def test_teacher_requires_no_grad(self):
        teacher = make_teacher(nn.Linear(3, 3))
        assert all(not p.requires_grad for p in teacher.parameters())


class TestProjectionHeads:
    def test_time_dependence_is_effective(self):
        torch.manual_seed(0)
        head = ProjectionHead(16, out_dim=8)
        head.eval()
        feat = torch.randn(4, 16)
        with torch.no_grad():
            a = head(feat, torch.full((4,), 10.0))
            b = head(feat, torch.full((4,), 500.0))
        assert float((a - b).abs().max()) > 1e-4

    def test_pure_function_of_inputs(self):
        torch.manual_seed(0)
        head = ProjectionHead(16, out_dim=8)
        head.eval()
        feat = torch.zeros(4, 16)
        t = torch.full((4,), 3.0)
        with torch.no_grad():
            assert torch.equal(head(feat, t), head(feat, t))

    def test_online_branch_applies_prediction_head(self):
        torch.manual_seed(0)
        head = ProjectionHead(8, out_dim=8)
        pred = PredictionHead(8)
        head.eval()
        pred.eval()
        feat = torch.randn(4, 8)
        t = torch.full((4,), 2.0)
        with torch.no_grad():
            plain = project(feat, t, head)
            online = project(feat, t, head, pred)
        assert plain.shape == online.shape
        assert not torch.allclose(plain, online)

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(1)
        head = ProjectionHead(6, out_dim=4, hidden_mult=2).double()
        feat = torch.randn(5, 6, dtype=torch.float64)
        t = torch.rand(5, dtype=torch.float64) * 100
        cot = torch.randn(5, 4, dtype=torch.float64)
        head.train()

        def value() -> float:
            return float((head(feat, t) * cot).sum())

        loss = (head(feat, t) * cot).sum()
        loss.backward()
        layer = head.net[0]
        grad = layer.weight.grad.clone()
        eps = 1e-6
        for idx in [(0, 0), (5, 3), (11, 5)]:
            with torch.no_grad():
                layer.weight[idx] += eps
                up = value()
                layer.weight[idx] -= 2 * eps
                dn = value()
                layer.weight[idx] += eps
            fd = (up - dn) / (2 * eps)
            assert abs(float(grad[idx]) - fd) <= 1e-4 * max(1.0, abs(fd))


class TestInfoNCE:
    def test_single_pair_is_zero(self):
        q = torch.randn(1, 8)
        assert float(info_nce(q, q.clone(), 0.2)) == pytest.approx(0.0, abs=1e-7)

    def test_orthonormal_closed_form(self):
        q = torch.eye(4)
        val = float(info_nce(q, q.clone(), 0.2))
        # -log(e^5 / (e^5 + 3)) = log(1 + 3 e^-5), frozen from the closed form
        assert val == pytest.approx(0.020012253359626926, rel=1e-5)

    @given(st.integers(min_value=2, max_value=12), st.integers(min_value=2, max_value=16),
           st.floats(min_value=0.05, max_value=1.0))
    @settings(max_examples=20)
    def test_matches_bruteforce_double_loop(self, b, d, tau):
        g = torch.Generator().manual_seed(b * 100 + d)
        q = torch.randn(b, d, generator=g, dtype=torch.float64)
        k = torch.randn(b, d, generator=g, dtype=torch.float64)
        fast = float(info_nce(q, k, tau))
        qn = q / q.norm(dim=1, keepdim=True)
        kn = k / k.norm(dim=1, keepdim=True)
        total = 0.0
        for i in range(b):
            logits = [float(qn[i] @ kn[j]) / tau for j in range(b)]
            z = sum(math.exp(l) for l in logits)
            total += -math.log(math.exp(logits[i]) / z)
        assert fast == pytest.approx(total / b, rel=1e-6)

    def test_nonnegative(self):
        g = torch.Generator().manual_seed(0)
        for _ in range(10):
            q = torch.randn(6, 5, generator=g)
            k = torch.randn(6, 5, generator=g)
            assert float(info_nce(q, k, 0.2)) >= 0.0

    def test_empty_batch_rejected(self):
        with pytest.raises(DomainError):
            info_nce(torch.zeros(0, 4), torch.zeros(0, 4), 0.2)


def _toy_pair(gamma: float, seed: int = 0):
    torch.manual_seed(seed)
    spec = BackboneSpec(family="planted_mlp", image_size=8, in_channels=1,
                        hidden_size=32, depth=3, planted_layer=2, tap_width=6)
    sc = SelfCondConfig(tap_layer=2, mode="adaptive")
    backbone = build_backbone(spec, selfcond=sc)
    f = Formulation("rf")
    model = DiffusionModel(backbone, f)
    ema = make_teacher(model)
    cfg = ContrastiveConfig(gamma=gamma, target_timestep=0.25)
    learner = ContrastiveLearner(6, cfg) if gamma > 0 else None
    return model, ema, cfg, f, learner


class TestContrastiveStep:
    def test_gamma_zero_degenerates_to_pure_diffusion(self):
        model, ema, cfg, f, _ = _toy_pair(0.0)
        batch = torch.randn(8, 1, 8, 8)
        rng = SeedStreams(0)
        losses = contrastive_step(model, ema, batch, cfg, f, rng)
        assert losses.total is losses.diff
        assert float(losses.moco) == 0.0

    def test_losses_finite_and_teacher_gets_no_gradient(self):
        model, ema, cfg, f, learner = _toy_pair(0.01)
        batch = torch.randn(8, 1, 8, 8)
        rng = SeedStreams(1)
        losses = contrastive_step(model, ema, batch, cfg, f, rng, learner=learner,
                                  aug_config=AugmentConfig(enabled=True, p=0.3))
        assert torch.isfinite(losses.total) and torch.isfinite(losses.moco)
        losses.total.backward()
        for p in ema.parameters():
            assert p.grad is None
        for p in learner.teacher_proj.parameters():
            assert p.grad is None
        grads = [p.grad for p in model.parameters() if p.grad is not None]
        assert grads, "online model must receive gradient"

    def test_symmetrized_loss_invariant_to_view_swap(self):
        # swapping the two views relabels (q1,k2) <-> (q2,k1), so the sum is unchanged
        torch.manual_seed(0)
        learner = ContrastiveLearner(6, ContrastiveConfig(gamma=0.01))
        learner.eval()
        learner.teacher_proj.eval()
        f1, f2 = torch.randn(5, 6), torch.randn(5, 6)
        t = torch.full((5,), 0.3)
        with torch.no_grad():
            q1, q2 = learner.online(f1, t), learner.online(f2, t)
            k1, k2 = learner.teacher(f1, t), learner.teacher(f2, t)
        a = info_nce(q1, k2, 0.2) + info_nce(q2, k1, 0.2)
        b = info_nce(q2, k1, 0.2) + info_nce(q1, k2, 0.2)
        assert float(a) == pytest.approx(float(b))

    def test_cls_source_requires_token_backbone(self):
        model, ema, _, f, _ = _toy_pair(0.01)
        cfg = ContrastiveConfig(gamma=0.01, target_source="cls")
        learner = ContrastiveLearner(6, cfg)
        with pytest.raises(ConfigError):
            contrastive_step(model, ema, torch.randn(4, 1, 8, 8), cfg, f,
                             SeedStreams(0), learner=learner)

    def test_moco_loss_decreases_over_toy_training(self):
        # joint objective with the default weight drives the contrastive term down
        from selfdiff.data import make_shapes16
        from selfdiff.training import DataConfig, RunConfig, train

        cfg = RunConfig(
            backbone=BackboneSpec(family="planted_mlp", image_size=16, in_channels=3,
                                  hidden_size=64, depth=3, planted_layer=2, tap_width=8),
            selfcond=SelfCondConfig(tap_layer=2, mode="adaptive"),
            contrastive=ContrastiveConfig(gamma=0.01, target_timestep=0.25),
            augment=AugmentConfig(enabled=True, p=0.3),
            data=DataConfig(n=128),
            steps=500, batch_size=16, seed=0, log_every=100,
        )
        result = train(cfg)
        first = sum(m["loss_moco"] for m in result.metrics[:50]) / 50
        last = sum(m["loss_moco"] for m in result.metrics[-50:]) / 50
        assert last < first

    def test_invalid_config_values_rejected(self):
        with pytest.raises(ConfigError):
            ContrastiveConfig(gamma=-0.1)
        with pytest.raises(ConfigError):
            ContrastiveConfig(temperature=0.0)
        with pytest.raises(ConfigError):
            ContrastiveConfig(target_source="tokens")

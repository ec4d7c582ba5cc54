"""Tổng loss, G^Final, khởi tạo network, suy luận và grad check."""

import math

import numpy as np
import pytest
import torch

from src.core.data_model import NUM_CLASSES, HazeParams
from src.core.exceptions import ConfigError, DataError, NumericalError, ShapeError
from src.core.grad_check import grad_check
from src.networks.pipeline import (
    FinalGenerator, LossReport, LossWeights, build_network, infer, total_loss,
)
from src.synthesis.corpus_builder import hazy_counterpart
from src.synthesis.scene_renderer import SceneRecipe, render_scene


class _DoubledGradient(torch.autograd.Function):
    """Σx nhưng backward cố ý trả 2 thay vì 1."""

    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x.sum()

    @staticmethod
    def backward(ctx, grad_output):
        (x,) = ctx.saved_tensors
        return 2.0 * grad_output * torch.ones_like(x)


@pytest.fixture(scope="module")
def hazy_pair():
    return hazy_counterpart(render_scene(SceneRecipe(seed=21)), HazeParams(0.85, 0.8), "scene_seed21_haze")


class TestLossWeights:
    def test_defaults(self):
        assert LossWeights().as_dict() == {
            "lambda_align": 1.0, "alpha_recon": 0.1, "beta_fusion": 0.01, "alpha1_final": 1.0, "beta1_final": 0.1,
        }

    def test_negative_rejected(self):
        with pytest.raises(ConfigError):
            LossWeights(beta_fusion=-0.5)


class TestTotalLoss:
    def test_all_ones(self):
        report = LossReport(1.0, 1.0, 1.0, 1.0, 1.0)
        assert float(total_loss(report, LossWeights())) == pytest.approx(2.21, abs=1e-12)

    def test_zero_report(self):
        assert float(total_loss(LossReport(), LossWeights())) == 0.0

    def test_single_term_weighting(self):
        assert float(total_loss(LossReport(fusion=3.0), LossWeights())) == pytest.approx(0.03, abs=1e-12)
        assert float(total_loss(LossReport(fusion=3.0), LossWeights(beta_fusion=0.0))) == 0.0

    def test_gradient_flows_to_tensor_terms(self):
        align = torch.tensor(2.0, dtype=torch.float64, requires_grad=True)
        total = total_loss(LossReport(align=align, final_fusion=1.0), LossWeights(lambda_align=0.5))
        total.backward()
        assert float(align.grad) == pytest.approx(0.5)
        assert total.dtype == torch.float64

    def test_non_finite_term(self):
        with pytest.raises(NumericalError):
            total_loss(LossReport(region_adv=math.nan), LossWeights())

    def test_report_to_dict(self):
        report = LossReport(align=torch.tensor(0.5), fusion=0.25)
        assert report.to_dict() == {
            "align": 0.5, "region_adv": 0.0, "fusion": 0.25, "final_region_adv": 0.0, "final_fusion": 0.0,
        }


class TestFinalGenerator:
    def test_starts_as_average(self):
        torch.manual_seed(0)
        final = FinalGenerator().double()
        g = torch.Generator().manual_seed(0)
        o_sr = torch.rand(2, 3, 16, 16, generator=g, dtype=torch.float64)
        o_vf = torch.rand(2, 3, 16, 16, generator=g, dtype=torch.float64)
        torch.testing.assert_close(final(o_sr, o_vf), 0.5 * (o_sr + o_vf))

    def test_output_clamped(self):
        final = FinalGenerator()
        with torch.no_grad():
            final.tail.bias.fill_(5.0)
        out = final(torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 8))
        assert float(out.max()) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            FinalGenerator()(torch.rand(1, 3, 8, 8), torch.rand(1, 3, 16, 16))


class TestBuildNetwork:
    def test_same_seed_same_parameters(self):
        a = build_network(seed=3)
        b = build_network(seed=3)
        for (name, p), (_, q) in zip(a.state_dict().items(), b.state_dict().items()):
            torch.testing.assert_close(p, q, msg=name)

    def test_unknown_flag(self):
        with pytest.raises(ConfigError):
            build_network({"dropout": 0.5})

    def test_flags_reach_submodules(self):
        network = build_network({"discriminator": "image", "cross_attention": False, "recon": False})
        assert network.disc_recon.mode == "image" and network.disc_final.mode == "image"
        assert not network.fusion.cross_attention
        assert not network.alignment.recon

    def test_forward_shapes(self):
        network = build_network(seed=0, dtype=torch.float64)
        g = torch.Generator().manual_seed(1)
        outputs = network(torch.rand(1, 3, 32, 32, generator=g, dtype=torch.float64),
                          torch.rand(1, 1, 32, 32, generator=g, dtype=torch.float64))
        for name in ("o_sr", "o_vf", "o_final"):
            assert tuple(outputs[name].shape) == (1, 3, 32, 32), name
        assert tuple(outputs["seg_probs"].shape) == (1, NUM_CLASSES, 32, 32)
        assert tuple(outputs["seg_labels"].shape) == (1, 32, 32)

    def test_generator_conditioned_on_visible_content(self):
        network = build_network(seed=0, dtype=torch.float64)
        g = torch.Generator().manual_seed(2)
        vis = torch.rand(1, 3, 32, 32, generator=g, dtype=torch.float64)
        nir = torch.rand(1, 1, 32, 32, generator=g, dtype=torch.float64)
        with torch.no_grad():
            semantic = network.semantic_inputs(vis, nir)
            torch.testing.assert_close(semantic["content"], network.alignment.encode_content(vis, "vis"))
            # NIR chỉ vào G_SR qua xác suất segmentation
            other = network.semantic_inputs(vis, torch.zeros_like(nir))
        torch.testing.assert_close(semantic["content"], other["content"])


class TestInfer:
    def test_deterministic_and_complete(self, hazy_pair):
        network = build_network(seed=0)
        network.train()
        first = infer(network, hazy_pair)
        second = infer(network, hazy_pair)
        assert network.training
        np.testing.assert_array_equal(first.final.pixels, second.final.pixels)
        for image in (first.final, first.sr, first.vf):
            assert image.size == (64, 64)
            assert image.channels == 3
        labels = first.segmentation.labels
        assert labels.shape == (64, 64)
        assert labels.min() >= 0 and labels.max() < NUM_CLASSES
        assert set(first.as_dict()) == {"O_Final", "O_SR", "O_VF", "S_pred"}

    def test_final_is_average_at_init(self, hazy_pair):
        result = infer(build_network(seed=0, dtype=torch.float64), hazy_pair)
        np.testing.assert_allclose(result.final.pixels, 0.5 * (result.sr.pixels + result.vf.pixels), atol=1e-12)


class TestGradCheck:
    def test_linear_loss_is_exact(self):
        x = torch.rand(3, 4, dtype=torch.float64)
        assert grad_check(lambda t: t.sum(), x) < 1e-8

    def test_wrong_backward_is_caught(self):
        x = torch.rand(5, dtype=torch.float64)
        assert grad_check(_DoubledGradient.apply, x) == pytest.approx(1.0, abs=1e-6)

    def test_inputs_untouched(self):
        x = torch.rand(2, 3, dtype=torch.float64)
        before = x.clone()
        grad_check(lambda t: (t ** 3).sum(), x)
        torch.testing.assert_close(x, before, rtol=0, atol=0)

    def test_several_inputs(self):
        a = torch.rand(4, dtype=torch.float64)
        b = torch.rand(4, dtype=torch.float64)
        assert grad_check(lambda p, q: (p * q).sum() + (p ** 2).sum(), [a, b]) < 1e-6

    def test_unused_input_has_zero_gradient(self):
        a = torch.rand(3, dtype=torch.float64)
        b = torch.rand(3, dtype=torch.float64)
        assert grad_check(lambda p, q: (p ** 2).sum(), [a, b]) < 1e-6

    def test_float32_rejected(self):
        with pytest.raises(DataError):
            grad_check(lambda t: t.sum(), torch.rand(3))

    def test_non_scalar_rejected(self):
        with pytest.raises(DataError):
            grad_check(lambda t: t * 2.0, torch.rand(3, dtype=torch.float64))

    def test_non_finite_loss(self):
        with pytest.raises(NumericalError):
            grad_check(lambda t: (t / 0.0).sum(), torch.rand(3, dtype=torch.float64))

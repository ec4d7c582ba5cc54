"""Joint attention theo cửa sổ, module fusion và ba loss fusion."""

import numpy as np
import pytest
import torch
import torch.nn as nn

from src.core.exceptions import ShapeError, ValidationError
from src.core.grad_check import grad_check
from src.networks.fusion import (
    AttentionTokens, QKVProjection, VisualFusionModule, fusion_loss, fusion_loss_components, intensity_loss,
    joint_attention, project_qkv, ssim_loss, texture_loss, tokens_to_map,
)

GRAD_TOL = 1e-4

_SOBEL_X = np.array([[1.0, 0.0, -1.0], [2.0, 0.0, -2.0], [1.0, 0.0, -1.0]])


def _tokens(q, k, v) -> AttentionTokens:
    as_t = lambda x: torch.tensor(x, dtype=torch.float64).view(1, 1, 1, -1, 1)
    return AttentionTokens(as_t(q), as_t(k), as_t(v), height=1, width=len(q), window_size=1)


def _numpy_gradient_magnitude(channel: np.ndarray) -> np.ndarray:
    """Sobel cross-correlation với reflect padding, tính tay từng pixel."""
    padded = np.pad(channel, 1, mode="reflect")
    height, width = channel.shape
    out = np.zeros_like(channel)
    for i in range(height):
        for j in range(width):
            patch = padded[i:i + 3, j:j + 3]
            out[i, j] = abs((patch * _SOBEL_X).sum()) + abs((patch * _SOBEL_X.T).sum())
    return out


class TestJointAttention:
    def test_single_token_hand_example(self):
        tv = _tokens([1.0], [1.0], [1.0])
        tn = _tokens([1.0], [1.0], [1.0])
        f_v, f_n = joint_attention(tv, tn)
        assert float(f_v) == pytest.approx(2.0)
        assert float(f_n) == pytest.approx(2.0)
        f_v, _ = joint_attention(tv, tn, use_cross=False)
        assert float(f_v) == pytest.approx(1.0)

    def test_zero_query_reads_mean_of_both_modalities(self):
        tv = _tokens([0.0, 0.0], [0.3, -1.2], [1.0, 3.0])
        tn = _tokens([0.0, 0.0], [2.0, 0.5], [5.0, 7.0])
        f_v, _ = joint_attention(tv, tn)
        # self đọc trung bình V_V = 2, cross đọc trung bình V_N = 6
        np.testing.assert_allclose(f_v.flatten().numpy(), [8.0, 8.0], atol=1e-12)

    def test_both_off_returns_values(self):
        tv = _tokens([0.1, 0.2], [0.3, 0.4], [0.5, 0.6])
        tn = _tokens([0.7, 0.8], [0.9, 1.0], [1.1, 1.2])
        (f_v, f_n), weights = joint_attention(tv, tn, use_self=False, use_cross=False, return_weights=True)
        assert f_v is tv.v and f_n is tn.v
        assert weights == {}

    def test_weights_are_row_stochastic(self):
        torch.manual_seed(0)
        projection = QKVProjection(8).double()
        features_v = torch.randn(1, 8, 8, 8, dtype=torch.float64)
        features_n = torch.randn(1, 8, 8, 8, dtype=torch.float64)
        tv = project_qkv(features_v, projection, window_size=4, num_heads=2)
        tn = project_qkv(features_n, projection, window_size=4, num_heads=2)
        _, weights = joint_attention(tv, tn, return_weights=True)
        assert set(weights) == {"self_v", "self_n", "cross_v", "cross_n"}
        for name, w in weights.items():
            assert tuple(w.shape) == (1, 4, 2, 16, 16), name
            assert float(w.min()) >= 0.0
            torch.testing.assert_close(w.sum(dim=-1), torch.ones(1, 4, 2, 16, dtype=torch.float64))

    def test_identical_modalities_give_identical_outputs(self):
        torch.manual_seed(1)
        projection = QKVProjection(8).double()
        features = torch.randn(2, 8, 8, 8, dtype=torch.float64)
        tokens = project_qkv(features, projection, window_size=4, num_heads=2)
        f_v, f_n = joint_attention(tokens, tokens)
        torch.testing.assert_close(f_v, f_n)

    def test_swapping_modalities_swaps_outputs(self):
        torch.manual_seed(2)
        projection = QKVProjection(4).double()
        tv = project_qkv(torch.randn(1, 4, 4, 4, dtype=torch.float64), projection, 2, 2)
        tn = project_qkv(torch.randn(1, 4, 4, 4, dtype=torch.float64), projection, 2, 2)
        f_v, f_n = joint_attention(tv, tn)
        g_v, g_n = joint_attention(tn, tv)
        torch.testing.assert_close(f_v, g_n)
        torch.testing.assert_close(f_n, g_v)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            joint_attention(_tokens([1.0], [1.0], [1.0]), _tokens([1.0, 1.0], [1.0, 1.0], [1.0, 1.0]))

    def test_gradient_through_projection(self):
        torch.manual_seed(3)
        projection = QKVProjection(4).double()
        g = torch.Generator().manual_seed(3)
        features_v = torch.randn(1, 4, 4, 4, generator=g, dtype=torch.float64)
        features_n = torch.randn(1, 4, 4, 4, generator=g, dtype=torch.float64)

        def loss_op(a, b):
            f_v, f_n = joint_attention(project_qkv(a, projection, 2, 2), project_qkv(b, projection, 2, 2))
            return (f_v ** 2).sum() + f_n.sum()

        assert grad_check(loss_op, [features_v, features_n]) < GRAD_TOL


class TestWindowing:
    def test_identity_projection_round_trip(self):
        projection = QKVProjection(8).double()
        for layer in (projection.q, projection.k, projection.v):
            nn.init.eye_(layer.weight)
        features = torch.randn(2, 8, 16, 8, dtype=torch.float64)
        tokens = project_qkv(features, projection, window_size=4, num_heads=2)
        torch.testing.assert_close(tokens_to_map(tokens.v, 16, 8, 4), features)

    @pytest.mark.parametrize("kwargs", [
        {"window_size": 3, "num_heads": 2},
        {"window_size": 4, "num_heads": 3},
    ])
    def test_invalid_layout(self, kwargs):
        with pytest.raises(ShapeError):
            project_qkv(torch.zeros(1, 8, 8, 8), QKVProjection(8), **kwargs)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            project_qkv(torch.zeros(1, 4, 8, 8), QKVProjection(8))


class TestVisualFusionModule:
    def test_output_shape_and_range(self):
        torch.manual_seed(4)
        module = VisualFusionModule()
        out = module(torch.rand(2, 3, 16, 16), torch.rand(2, 1, 16, 16))
        assert tuple(out.shape) == (2, 3, 16, 16)
        assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0

    @pytest.mark.parametrize("use_self,use_cross", [(True, False), (False, True), (False, False)])
    def test_ablated_branches_still_run(self, use_self, use_cross):
        module = VisualFusionModule(self_attention=use_self, cross_attention=use_cross)
        assert tuple(module(torch.rand(1, 3, 16, 16), torch.rand(1, 1, 16, 16)).shape) == (1, 3, 16, 16)

    def test_size_not_divisible_by_window(self):
        with pytest.raises(ShapeError):
            VisualFusionModule()(torch.rand(1, 3, 12, 12), torch.rand(1, 1, 12, 12))

    def test_modalities_must_share_size(self):
        with pytest.raises(ShapeError):
            VisualFusionModule()(torch.rand(1, 3, 16, 16), torch.rand(1, 1, 8, 8))

    def test_dim_must_split_over_heads(self):
        with pytest.raises(ValidationError):
            VisualFusionModule(dim=30, num_heads=4)


class TestFusionLosses:
    def test_ssim_loss_zero_when_all_equal(self):
        gray = torch.rand(1, 1, 16, 16, generator=torch.Generator().manual_seed(5), dtype=torch.float64)
        rgb = gray.expand(-1, 3, -1, -1)
        assert float(ssim_loss(rgb, rgb, gray)) == pytest.approx(0.0, abs=1e-12)

    def test_intensity_hand_example(self):
        output = torch.zeros(1, 3, 16, 16, dtype=torch.float64)
        vis = torch.full((1, 3, 16, 16), 0.2, dtype=torch.float64)
        nir = torch.full((1, 1, 16, 16), 0.6, dtype=torch.float64)
        assert float(intensity_loss(output, vis, nir)) == pytest.approx(0.6, abs=1e-12)

    def test_texture_matches_brute_force_sobel(self):
        rng = np.random.default_rng(6)
        output = rng.random((3, 4, 4))
        vis = rng.random((3, 4, 4))
        nir = rng.random((4, 4))
        grad_n = _numpy_gradient_magnitude(nir)
        expected = np.mean([
            np.abs(_numpy_gradient_magnitude(output[c])
                   - np.maximum(_numpy_gradient_magnitude(vis[c]), grad_n)).mean()
            for c in range(3)
        ])
        loss = texture_loss(torch.from_numpy(output)[None], torch.from_numpy(vis)[None],
                            torch.from_numpy(nir)[None, None])
        assert float(loss) == pytest.approx(expected, abs=1e-12)

    def test_texture_zero_on_constant_images(self):
        flat = torch.full((1, 3, 8, 8), 0.4, dtype=torch.float64)
        assert float(texture_loss(flat, flat, flat[:, :1])) == 0.0

    def test_luminance_variant(self):
        output = torch.zeros(1, 3, 8, 8, dtype=torch.float64)
        vis = torch.ones(1, 3, 8, 8, dtype=torch.float64)
        nir = torch.zeros(1, 1, 8, 8, dtype=torch.float64)
        # trọng số luma cộng lại bằng 1
        assert float(intensity_loss(output, vis, nir, luminance=True)) == pytest.approx(1.0, abs=1e-12)

    def test_weighted_sum(self):
        g = torch.Generator().manual_seed(7)
        output = torch.rand(1, 3, 16, 16, generator=g, dtype=torch.float64)
        vis = torch.rand(1, 3, 16, 16, generator=g, dtype=torch.float64)
        nir = torch.rand(1, 1, 16, 16, generator=g, dtype=torch.float64)
        parts = fusion_loss_components(output, vis, nir)
        assert float(fusion_loss(output, vis, nir)) == pytest.approx(float(sum(parts.values())), abs=1e-12)
        weighted = fusion_loss(output, vis, nir, weights=(2.0, 0.0, 0.5))
        assert float(weighted) == pytest.approx(2.0 * float(parts["ssim"]) + 0.5 * float(parts["intensity"]),
                                                abs=1e-12)

    @pytest.mark.parametrize("weights", [(1.0, 1.0), (1.0, -1.0, 1.0)])
    def test_invalid_weights(self, weights):
        x = torch.rand(1, 3, 16, 16)
        with pytest.raises(ValidationError):
            fusion_loss(x, x, x[:, :1], weights=weights)

    def test_size_mismatch(self):
        with pytest.raises(ShapeError):
            intensity_loss(torch.rand(1, 3, 16, 16), torch.rand(1, 3, 8, 8), torch.rand(1, 1, 16, 16))


class TestFusionGradients:
    @pytest.fixture
    def images(self):
        g = torch.Generator().manual_seed(8)
        output = torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64)
        vis = torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64)
        nir = torch.rand(1, 1, 8, 8, generator=g, dtype=torch.float64)
        return output, vis, nir

    def test_ssim(self, images):
        output, vis, nir = images
        assert grad_check(lambda o: ssim_loss(o, vis, nir, window_size=3), output) < GRAD_TOL

    def test_texture(self, images):
        output, vis, nir = images
        assert grad_check(lambda o: texture_loss(o, vis, nir), output) < GRAD_TOL

    def test_intensity(self, images):
        output, vis, nir = images
        assert grad_check(lambda o: intensity_loss(o, vis, nir), output) < GRAD_TOL

    def test_full_fusion_loss(self, images):
        output, vis, nir = images
        assert grad_check(lambda o: fusion_loss(o, vis, nir, window_size=3), output) < GRAD_TOL

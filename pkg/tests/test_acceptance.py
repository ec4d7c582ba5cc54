"""
Hướng kết quả sau lịch huấn luyện đầy đủ trên MiniVNHD 200 scene: fog giảm, chi tiết vùng xa tăng,
và thứ tự giữa các biến thể ablation. Chạy hàng giờ trên CPU; cần HSVF_RUN_SLOW=1 và HSVF_RUN_ACCEPTANCE=1.
"""

import numpy as np
import pytest

from src.synthesis.corpus_builder import synthesize_corpus
from src.training.ablation import run_ablation
from src.training.evaluation import evaluate, fit_metric_models
from src.training.stage_config import load_stage_config, write_default_config
from src.training.stage_runner import run_stage

pytestmark = [pytest.mark.slow, pytest.mark.acceptance]

SCENES = 200
SEEDS = (0, 1, 2)


def _share(flags) -> float:
    return float(np.mean(list(flags)))


@pytest.fixture(scope="module")
def minivnhd(tmp_path_factory):
    out_dir = tmp_path_factory.mktemp("minivnhd")
    synthesize_corpus(count=SCENES, seed=0, out_dir=out_dir, workers=4)
    return out_dir


@pytest.fixture(scope="module")
def models_dir(tmp_path_factory, minivnhd):
    out_dir = tmp_path_factory.mktemp("metric_models")
    fit_metric_models(minivnhd / "train.jsonl", out_dir)
    return out_dir


@pytest.fixture(scope="module")
def config_path(tmp_path_factory, minivnhd):
    root = tmp_path_factory.mktemp("run")
    return write_default_config(root / "hsvf.env", data_dir=minivnhd, ckpt_dir=root / "ckpt")


@pytest.fixture(scope="module")
def trained(config_path):
    for stage in ("align", "recon", "fusion", "finetune"):
        result = run_stage(load_stage_config(config_path, stage))
    return result.checkpoint.parent


@pytest.fixture(scope="module")
def hsvf_report(tmp_path_factory, trained, minivnhd, models_dir):
    out = tmp_path_factory.mktemp("reports") / "hsvf.json"
    return evaluate(trained, minivnhd / "val.jsonl", out, restorer="hsvf", streams=True, metric_dir=models_dir)


@pytest.fixture(scope="module")
def hazy_report(tmp_path_factory, minivnhd, models_dir):
    out = tmp_path_factory.mktemp("reports") / "identity.json"
    return evaluate(None, minivnhd / "val.jsonl", out, restorer="identity", metric_dir=models_dir)


class TestFullSchedule:
    def test_final_output_reduces_fog(self, hsvf_report):
        corpus = hsvf_report.corpus
        assert corpus["fog_improved_share"] >= 0.9
        assert corpus["fog_reduction_mean"] >= 0.3
        assert corpus["nss_delta_mean"] <= 0.0

    def test_reconstruction_reduces_fog(self, hsvf_report):
        share = _share(s["sr.fog_density"] < s["input_fog_density"] for s in hsvf_report.per_image.values())
        assert share >= 0.8

    def test_fusion_sharpens_far_region(self, hsvf_report, hazy_report):
        assert set(hsvf_report.per_image) == set(hazy_report.per_image)
        share = _share(
            hsvf_report.per_image[image_id]["vf.far_gradient"] > hazy_report.per_image[image_id]["far_gradient"]
            for image_id in hsvf_report.per_image
        )
        assert share >= 0.8


class TestAblationDirections:
    def test_joint_attention_is_best(self, tmp_path, config_path):
        summary = run_ablation("attention", config_path, tmp_path, seeds=SEEDS)
        means = {v: d["mean"] for v, d in summary["variants"].items()}
        for metric in ("mi", "q_abf"):
            for variant in ("self", "cross", "none"):
                assert means["joint"][metric] >= means[variant][metric], (metric, variant)

    def test_full_alignment_not_worse_than_visible_only(self, tmp_path, config_path):
        summary = run_ablation("alignment", config_path, tmp_path, seeds=SEEDS)
        means = {v: d["mean"]["val_mIoU"] for v, d in summary["variants"].items()}
        assert means["full"] >= means["vis"]
        assert list(summary["best_per_seed"]["val_mIoU"].values()).count("full") >= 2

    def test_region_discriminator_matches_class_texture(self, tmp_path, config_path, models_dir):
        summary = run_ablation("discriminator", config_path, tmp_path, seeds=SEEDS, metric_dir=models_dir)
        means = {v: d["mean"]["class_histogram_distance"] for v, d in summary["variants"].items()}
        assert means["region"] < means["image"]

    def test_final_loss_weights(self, tmp_path, config_path, models_dir):
        summary = run_ablation("weights", config_path, tmp_path, seeds=(0,), metric_dir=models_dir)
        means = {v: d["mean"] for v, d in summary["variants"].items()}
        # alpha1 = 0 bỏ loss đối kháng của output cuối: fog cao hơn
        assert means["a0_b0.1"]["fog_density"] > means["a1_b0.1"]["fog_density"]
        # beta1 = 0 bỏ loss fusion của output cuối: mất texture
        assert means["a1_b0"]["gradient_energy"] < means["a1_b0.1"]["gradient_energy"]

"""Config stage, checkpoint store và vòng training của từng stage."""

import json

import numpy as np
import pytest
import torch

from src.core.exceptions import CheckpointError, ConfigError, DataError, NumericalError, PrerequisiteError
from src.networks.pipeline import LOSS_TERMS, LossWeights, build_network
from src.storage.checkpoint_store import STAGE_MODULES, CheckpointStore
from src.storage.manifest import load_manifest_pairs
from src.training import stage_runner
from src.training.stage_config import DEFAULT_EPOCHS, load_stage_config, write_default_config
from src.training.stage_runner import iterate_batches, run_stage


def _read_log(path):
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def _assert_same_state(a, b):
    for (name, p), (_, q) in zip(a.state_dict().items(), b.state_dict().items()):
        torch.testing.assert_close(p, q, rtol=0, atol=0, msg=name)


class TestStageConfig:
    def test_values_from_file(self, stage_config_file, tiny_corpus, tmp_path):
        cfg = load_stage_config(stage_config_file(), "align")
        assert cfg.seed == 0
        assert cfg.batch_size == 2
        assert cfg.epochs == 1
        assert cfg.dtype == "float64" and cfg.torch_dtype == torch.float64
        assert cfg.train_manifest == tiny_corpus / "train.jsonl"
        assert cfg.ckpt_dir == tmp_path / "ckpt"
        assert cfg.weights == LossWeights()

    def test_stage_section_overrides_common(self, stage_config_file):
        path = stage_config_file(ALIGN__BATCH_SIZE=1, ALIGN__LEARNING_RATE=1e-3)
        assert load_stage_config(path, "align").batch_size == 1
        assert load_stage_config(path, "align").learning_rate == pytest.approx(1e-3)
        assert load_stage_config(path, "fusion").batch_size == 2

    def test_seed_env_override(self, stage_config_file, monkeypatch):
        monkeypatch.setenv("HSVF_SEED", "7")
        assert load_stage_config(stage_config_file(), "align").seed == 7

    def test_ablation_and_fusion_loss_sections(self, stage_config_file):
        path = stage_config_file(ABLATION__CROSS_ATTENTION="false", ABLATION__DISCRIMINATOR="image",
                                 FUSION_LOSS__LUMINANCE="true", FUSION_LOSS__W_TEXTURE=2)
        cfg = load_stage_config(path, "fusion")
        assert cfg.network_flags == {"cross_attention": False, "discriminator": "image"}
        assert cfg.fusion_loss.luminance
        assert cfg.fusion_loss.weights == (1.0, 2.0, 1.0)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_stage_config(tmp_path / "missing.env", "align")

    @pytest.mark.parametrize("extra", [
        {"COMMON__FOO": "1"},
        {"TRAINING__EPOCHS": "3"},
        {"DATA__TEST": "x.jsonl"},
        {"COMMON__DETERMINISTIC": "maybe"},
        {"COMMON__BATCH_SIZE": "two"},
        {"COMMON__DTYPE": "float16"},
        {"ALIGN__EPOCHS": "0"},
    ])
    def test_invalid_entries(self, stage_config_file, extra):
        with pytest.raises(ConfigError):
            load_stage_config(stage_config_file(**extra), "align")

    def test_single_modality_needs_branches_off(self, stage_config_file):
        with pytest.raises(ConfigError):
            load_stage_config(stage_config_file(ABLATION__ALIGN_MODALITIES="vis"), "align")
        cfg = load_stage_config(stage_config_file(ABLATION__ALIGN_MODALITIES="vis", ABLATION__CONTENT_ALIGN="false",
                                                  ABLATION__RECON="false"), "align")
        assert cfg.network_flags["align_modalities"] == "vis"

    def test_zero_weight_for_trained_stage(self, stage_config_file):
        with pytest.raises(ConfigError):
            load_stage_config(stage_config_file(WEIGHTS__BETA_FUSION=0), "fusion")
        with pytest.raises(ConfigError):
            load_stage_config(stage_config_file(WEIGHTS__ALPHA_RECON=0), "recon")
        # stage khác không bị ảnh hưởng
        assert load_stage_config(stage_config_file(WEIGHTS__BETA_FUSION=0), "align").weights.beta_fusion == 0

    def test_missing_manifest(self, tmp_path, stage_config_file):
        path = stage_config_file(DATA__TRAIN=(tmp_path / "nope.jsonl").as_posix())
        with pytest.raises(ConfigError):
            load_stage_config(path, "align")
        assert load_stage_config(path, "align", check_paths=False).epochs == 1

    def test_invalid_stage(self, stage_config_file):
        with pytest.raises(ConfigError):
            load_stage_config(stage_config_file(), "pretrain")

    def test_default_config_round_trip(self, tmp_path):
        path = write_default_config(tmp_path / "cfg" / "hsvf.env", data_dir=tmp_path / "data",
                                    ckpt_dir=tmp_path / "ckpt")
        for stage, epochs in DEFAULT_EPOCHS.items():
            cfg = load_stage_config(path, stage, check_paths=False)
            assert cfg.epochs == epochs
            assert cfg.weights == LossWeights()
            assert cfg.ckpt_dir == tmp_path / "ckpt"
        assert len(cfg.network_flags) == 7

    def test_with_overrides(self, stage_config_file):
        cfg = load_stage_config(stage_config_file(), "align")
        changed = cfg.with_overrides(seed=5)
        assert changed.seed == 5 and cfg.seed == 0


class TestCheckpointStore:
    def test_save_and_load_stage_modules(self, tmp_path):
        store = CheckpointStore(tmp_path)
        source = build_network(seed=0)
        store.save("align", source, epoch=3, seed=0)
        target = build_network(seed=1)
        fusion_before = {k: v.clone() for k, v in target.fusion.state_dict().items()}
        info = store.load("align", target)
        _assert_same_state(source.alignment, target.alignment)
        for key, value in target.fusion.state_dict().items():
            torch.testing.assert_close(value, fusion_before[key])
        assert info.stage == "align" and info.epoch == 3
        assert all(p.name.startswith("alignment.") for p in store.read_info("align").parameters)
        assert not list(tmp_path.glob("*.tmp"))

    def test_sidecar_records_flags(self, tmp_path):
        store = CheckpointStore(tmp_path)
        store.save("fusion", build_network({"cross_attention": False}), epoch=1, seed=4,
                   network_flags={"cross_attention": False})
        assert store.available_stages() == ["fusion"]
        assert store.network_flags() == {"cross_attention": False}
        assert store.read_info("fusion").seed == 4

    def test_prerequisites(self, tmp_path):
        store = CheckpointStore(tmp_path)
        store.require_prerequisites("align")
        store.require_prerequisites("fusion")
        with pytest.raises(PrerequisiteError):
            store.require_prerequisites("recon")
        store.save("align", build_network(seed=0), epoch=1, seed=0)
        store.require_prerequisites("recon")
        with pytest.raises(PrerequisiteError):
            store.require_prerequisites("finetune")

    def test_errors(self, tmp_path):
        store = CheckpointStore(tmp_path)
        with pytest.raises(CheckpointError):
            store.path_for("warmup")
        with pytest.raises(CheckpointError):
            store.load("align", build_network(seed=0))
        with pytest.raises(CheckpointError):
            store.network_flags()
        store.save("align", build_network(seed=0), epoch=1, seed=0)
        with pytest.raises(CheckpointError):
            store.load("align", build_network(seed=0), modules=("fusion",))

    def test_mismatched_architecture(self, tmp_path):
        store = CheckpointStore(tmp_path)
        store.save("recon", build_network(seed=0), epoch=1, seed=0)
        with pytest.raises(CheckpointError):
            store.load("recon", build_network({"discriminator": "image"}, seed=0), modules=("disc_recon",))

    def test_load_for_inference(self, tmp_path):
        store = CheckpointStore(tmp_path)
        with pytest.raises(PrerequisiteError):
            store.load_for_inference(build_network(seed=0))
        trained = build_network(seed=5)
        for stage in ("align", "recon", "fusion"):
            store.save(stage, trained, epoch=1, seed=5)
        network = build_network(seed=0)
        assert store.load_for_inference(network) == ["align", "recon", "fusion"]
        for name in ("alignment", "generator", "fusion"):
            _assert_same_state(getattr(trained, name), getattr(network, name))
        store.save("finetune", trained, epoch=1, seed=5)
        assert store.load_for_inference(build_network(seed=0)) == ["finetune"]

    def test_copy_stages(self, tmp_path):
        store = CheckpointStore(tmp_path / "a")
        store.save("align", build_network(seed=0), epoch=1, seed=0)
        copy = store.copy_stages(["align"], tmp_path / "b")
        assert copy.available_stages() == ["align"]
        with pytest.raises(PrerequisiteError):
            store.copy_stages(["fusion"], tmp_path / "c")

    def test_finetune_owns_every_module(self):
        network = build_network(seed=0)
        names = {name for name, _ in network.named_children()}
        assert set(STAGE_MODULES["finetune"]) == names


class TestIterateBatches:
    def test_order_and_last_batch(self, tiny_corpus):
        pairs = load_manifest_pairs(tiny_corpus / "train.jsonl")
        device = torch.device("cpu")
        first = list(iterate_batches(pairs, 3, np.random.default_rng(0), torch.float64, device))
        second = list(iterate_batches(pairs, 3, np.random.default_rng(0), torch.float64, device))
        assert [len(b["ids"]) for b in first] == [3, 3, 2]
        assert [b["ids"] for b in first] == [b["ids"] for b in second]
        assert sorted(i for b in first for i in b["ids"]) == sorted(p.id for p in pairs)
        assert first[0]["vis"].dtype == torch.float64


class TestRunStage:
    def test_align_is_reproducible(self, tmp_path, stage_config_file):
        results = []
        for name in ("run_a", "run_b"):
            path = stage_config_file(ckpt_dir=tmp_path / name)
            results.append(run_stage(load_stage_config(path, "align"), keep_network=True))
        assert len(results[0].step_totals) == 4
        assert results[0].step_totals == results[1].step_totals
        _assert_same_state(results[0].network.alignment, results[1].network.alignment)

    def test_align_log_records(self, stage_config_file):
        cfg = load_stage_config(stage_config_file(), "align")
        result = run_stage(cfg)
        assert result.checkpoint.exists()
        assert CheckpointStore(cfg.ckpt_dir).exists("align")
        records = _read_log(result.log_path)
        steps = [r for r in records if r["type"] == "step"]
        epochs = [r for r in records if r["type"] == "epoch"]
        assert len(steps) == 4 and len(epochs) == 1
        for record in steps:
            weighted = sum(getattr(cfg.weights, w) * record[name] for name, w in LOSS_TERMS.items())
            assert record["total"] == pytest.approx(weighted, abs=1e-6)
            assert record["region_adv"] == 0.0 and record["fusion"] == 0.0
            assert any(key.startswith("align_") for key in record)
        assert [r["total"] for r in steps] == result.step_totals
        assert set(result.val_metrics) == {"val_mIoU", "val_pixel_acc"}
        assert 0.0 <= epochs[0]["val_mIoU"] <= 1.0
        assert epochs[0]["mean_total"] == pytest.approx(np.mean(result.step_totals))

    def test_fusion_stage(self, stage_config_file):
        cfg = load_stage_config(stage_config_file(), "fusion")
        result = run_stage(cfg)
        steps = [r for r in _read_log(result.log_path) if r["type"] == "step"]
        assert len(steps) == 2
        assert all(r["fusion"] > 0 and r["align"] == 0.0 for r in steps)
        assert "val_fusion_loss" in result.val_metrics
        assert CheckpointStore(cfg.ckpt_dir).available_stages() == ["fusion"]

    def test_recon_requires_align(self, stage_config_file):
        with pytest.raises(PrerequisiteError):
            run_stage(load_stage_config(stage_config_file(), "recon"))

    def test_non_finite_loss_dumps_batch(self, stage_config_file, monkeypatch):
        def _broken(report, weights):
            raise NumericalError("loss không hữu hạn")

        monkeypatch.setattr(stage_runner, "total_loss", _broken)
        cfg = load_stage_config(stage_config_file(), "fusion")
        with pytest.raises(NumericalError):
            run_stage(cfg)
        dump = cfg.ckpt_dir / "nan_dump_fusion_step1.npz"
        assert dump.exists()
        with np.load(dump) as arrays:
            assert arrays["vis"].shape[0] == 2
        assert not CheckpointStore(cfg.ckpt_dir).exists("fusion")

    def test_unmasked_pairs_rejected_for_align(self, stage_config_file, tiny_corpus, tmp_path):
        manifest = tmp_path / "nomask.jsonl"
        lines = []
        for line in (tiny_corpus / "train.jsonl").read_text(encoding="utf-8").splitlines():
            entry = json.loads(line)
            entry.pop("mask", None)
            for key in ("vis", "nir", "depth"):
                if key in entry:
                    entry[key] = (tiny_corpus / entry[key]).as_posix()
            lines.append(json.dumps(entry))
        manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
        with pytest.raises(DataError):
            run_stage(load_stage_config(stage_config_file(DATA__TRAIN=manifest.as_posix()), "align"))

    @pytest.mark.slow
    def test_full_chain(self, stage_config_file):
        path = stage_config_file()
        for stage in ("align", "recon", "fusion", "finetune"):
            result = run_stage(load_stage_config(path, stage))
            assert all(np.isfinite(result.step_totals))
        records = [r for r in _read_log(result.log_path) if r["type"] == "step"]
        assert all(r["final_fusion"] > 0 for r in records)
        assert all("disc_final" in r for r in records)

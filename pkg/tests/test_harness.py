"""Evaluate, restorer, plot, CLI và các worker dùng chung."""

import json
import threading
import time

import numpy as np
import pytest

from main import main
from src import config
from src.core.async_workers import ordered_map, prefetch
from src.core.exceptions import ConfigError, DataError, InsufficientCorpusError, UnfittedModelError
from src.metrics.report import SCHEMA_SUFFIX, build_report, load_report
from src.networks.pipeline import build_network
from src.storage.checkpoint_store import CheckpointStore
from src.storage.manifest import load_pair, read_manifest
from src.training.evaluation import evaluate, fit_metric_models, load_metric_models
from src.training.plots import beta_curves, render_report_plots
from src.training.restorers import HSVFRestorer, IdentityRestorer, create_restorer
from src.training.stage_config import load_stage_config


@pytest.fixture
def untrained_ckpt(tmp_path):
    """align + recon + fusion lưu từ network vừa khởi tạo: đủ để dựng HSVFRestorer mà không train."""
    store = CheckpointStore(tmp_path / "untrained")
    network = build_network(seed=0)
    for stage in ("align", "recon", "fusion"):
        store.save(stage, network, epoch=0, seed=0)
    return store.base_dir


@pytest.fixture
def cli_log(tmp_path, monkeypatch):
    log_file = tmp_path / "logs" / "hsvf.log"
    monkeypatch.setattr(config, "LOG_FILE", str(log_file))
    return log_file


class TestEvaluate:
    def test_identity_baseline(self, tmp_path, tiny_corpus, metric_dir):
        out = tmp_path / "identity.json"
        report = evaluate(None, tiny_corpus / "test.jsonl", out, restorer="identity", metric_dir=metric_dir)
        assert report.restorer == "identity"
        assert len(report.per_image) == 1
        scores = next(iter(report.per_image.values()))
        assert scores["fog_density"] == pytest.approx(scores["input_fog_density"], abs=1e-9)
        assert scores["nss_score"] == pytest.approx(scores["input_nss_score"], abs=1e-9)
        for key in ("haze_beta", "ssim_clear", "mi", "q_abf", "grad_far"):
            assert key in scores, key
        assert "miou" not in scores
        assert report.corpus["fog_reduction_mean"] == pytest.approx(0.0, abs=1e-9)
        assert out.with_suffix(SCHEMA_SUFFIX).exists()
        assert load_report(out) == report

    def test_workers_do_not_change_report(self, tmp_path, tiny_corpus, metric_dir):
        manifest = tiny_corpus / "manifest.jsonl"
        serial = evaluate(None, manifest, tmp_path / "a.json", restorer="identity", metric_dir=metric_dir, workers=1)
        threaded = evaluate(None, manifest, tmp_path / "b.json", restorer="identity", metric_dir=metric_dir,
                            workers=3)
        assert len(serial.per_image) == 6
        assert list(serial.per_image) == list(threaded.per_image)
        assert serial.per_image == threaded.per_image

    def test_plots_written(self, tmp_path, tiny_corpus, metric_dir):
        evaluate(None, tiny_corpus / "manifest.jsonl", tmp_path / "r.json", restorer=IdentityRestorer(),
                 metric_dir=metric_dir, plots_dir=tmp_path / "plots")
        names = sorted(p.name for p in (tmp_path / "plots").glob("*.png"))
        assert names == ["beta_curves.png", "depth_bands.png", "metric_histograms.png"]

    def test_unfitted_models(self, tmp_path, tiny_corpus):
        with pytest.raises(UnfittedModelError):
            evaluate(None, tiny_corpus / "test.jsonl", tmp_path / "r.json", restorer="identity",
                     metric_dir=tmp_path / "empty")
        assert not (tmp_path / "r.json").exists()

    def test_hsvf_with_streams(self, tmp_path, tiny_corpus, metric_dir, untrained_ckpt):
        report = evaluate(untrained_ckpt, tiny_corpus / "test.jsonl", tmp_path / "hsvf.json", restorer="hsvf",
                          streams=True, metric_dir=metric_dir)
        scores = next(iter(report.per_image.values()))
        for key in ("fog_density", "miou", "pixel_acc", "sr.fog_density", "vf.mi", "vf.ssim_clear"):
            assert key in scores, key
        assert not any(key in scores for key in ("sr.miou", "vf.pixel_acc"))
        assert "corpus_mIoU" in report.corpus
        assert report.metadata["ckpt_dir"] == str(untrained_ckpt)


class TestMetricModels:
    def test_insufficient_clear_images(self, tmp_path, tiny_corpus):
        with pytest.raises(InsufficientCorpusError):
            fit_metric_models(tiny_corpus / "manifest.jsonl", tmp_path / "models")

    def test_load(self, metric_dir, tmp_path):
        models = load_metric_models(metric_dir)
        assert set(models.source) == {"fog", "nss"}
        with pytest.raises(UnfittedModelError):
            load_metric_models(tmp_path)


class TestRestorers:
    def test_factory(self):
        assert create_restorer("identity").name == "identity"
        with pytest.raises(ConfigError):
            create_restorer("dark_channel")

    def test_hsvf_needs_checkpoints(self, tmp_path):
        with pytest.raises(ConfigError):
            HSVFRestorer(tmp_path / "nothing")

    def test_hsvf_restorer(self, untrained_ckpt, tiny_corpus):
        restorer = HSVFRestorer(untrained_ckpt)
        assert restorer.loaded_stages == ["align", "recon", "fusion"]
        assert not restorer.network.training
        pair = load_pair(read_manifest(tiny_corpus / "test.jsonl")[1])
        restoration = restorer.restore(pair)
        assert restoration.final.size == pair.size
        assert set(restoration.streams()) == {"sr", "vf"}
        assert restoration.segmentation.labels.shape == pair.size


class TestPlots:
    def _report(self):
        per_image = {
            f"img{i}": {"haze_beta": beta, "input_fog_density": 1.0 + beta, "fog_density": 0.5 + beta,
                        "grad_near": 0.3, "grad_far": 0.1}
            for i, beta in enumerate([0.4, 0.4, 0.8, 1.2])
        }
        return build_report("hsvf", per_image)

    def test_beta_curves(self):
        curves = beta_curves(self._report())
        assert set(curves) == {"input_fog_density", "fog_density"}
        assert curves["fog_density"]["mean"][0] == pytest.approx(0.9)
        assert curves["fog_density"]["mean"][-1] == pytest.approx(1.7)
        assert curves["input_fog_density"]["beta"] == curves["fog_density"]["beta"]

    def test_no_beta(self):
        assert beta_curves(build_report("identity", {"a": {"mi": 1.0}})) == {}

    def test_render(self, tmp_path):
        paths = render_report_plots(self._report(), tmp_path / "plots")
        assert [p.name for p in paths] == ["metric_histograms.png", "beta_curves.png", "depth_bands.png"]
        assert all(p.stat().st_size > 0 for p in paths)
        only_hist = render_report_plots(build_report("identity", {"a": {"mi": 1.0}}), tmp_path / "other")
        assert [p.name for p in only_hist] == ["metric_histograms.png"]

    def test_unwritable_dir(self, tmp_path):
        blocker = tmp_path / "blocker"
        blocker.write_text("", encoding="utf-8")
        with pytest.raises(DataError):
            render_report_plots(self._report(), blocker / "plots")


class TestCli:
    def test_synth(self, tmp_path, cli_log):
        out = tmp_path / "corpus"
        assert main(["synth", "--count", "2", "--size", "64", "--out", str(out), "--workers", "1"]) == 0
        assert len(read_manifest(out / "manifest.jsonl")) == 4
        assert cli_log.exists()

    def test_synth_invalid_count(self, tmp_path, cli_log):
        assert main(["synth", "--count", "0", "--out", str(tmp_path / "corpus")]) == 3

    def test_train_missing_config(self, tmp_path, cli_log):
        assert main(["train", "--stage", "align", "--config", str(tmp_path / "missing.env")]) == 2

    def test_train_missing_prerequisite(self, stage_config_file, cli_log):
        assert main(["train", "--stage", "finetune", "--config", str(stage_config_file())]) == 2

    def test_fit_metrics_small_corpus(self, tmp_path, tiny_corpus, cli_log):
        assert main(["fit-metrics", "--data", str(tiny_corpus / "manifest.jsonl"),
                     "--out", str(tmp_path / "models")]) == 3

    def test_eval_identity(self, tmp_path, tiny_corpus, metric_dir, cli_log):
        out = tmp_path / "report.json"
        code = main(["eval", "--restorer", "identity", "--data", str(tiny_corpus / "test.jsonl"),
                     "--out", str(out), "--metric-dir", str(metric_dir), "--workers", "1"])
        assert code == 0
        assert load_report(out).restorer == "identity"

    def test_eval_unfitted_models(self, tmp_path, tiny_corpus, cli_log):
        code = main(["eval", "--restorer", "identity", "--data", str(tiny_corpus / "test.jsonl"),
                     "--out", str(tmp_path / "report.json"), "--metric-dir", str(tmp_path / "empty")])
        assert code == 3

    def test_eval_unwritable_report(self, tmp_path, tiny_corpus, metric_dir, cli_log):
        blocker = tmp_path / "blocker"
        blocker.write_text("", encoding="utf-8")
        code = main(["eval", "--restorer", "identity", "--data", str(tiny_corpus / "test.jsonl"),
                     "--out", str(blocker / "report.json"), "--metric-dir", str(metric_dir), "--workers", "1"])
        assert code == 3

    def test_report_command(self, tmp_path, tiny_corpus, metric_dir, cli_log):
        report_path = tmp_path / "report.json"
        evaluate(None, tiny_corpus / "manifest.jsonl", report_path, restorer="identity", metric_dir=metric_dir)
        assert main(["report", "--in", str(report_path), "--plots", str(tmp_path / "plots")]) == 0
        assert (tmp_path / "plots" / "metric_histograms.png").exists()

    def test_report_invalid_file(self, tmp_path, cli_log):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"restorer": "x"}), encoding="utf-8")
        assert main(["report", "--in", str(bad), "--plots", str(tmp_path / "plots")]) == 3

    def test_init_config(self, tmp_path, cli_log):
        path = tmp_path / "hsvf.env"
        code = main(["--debug", "init-config", "--out", str(path), "--data-dir", str(tmp_path / "data"),
                     "--ckpt-dir", str(tmp_path / "ckpt")])
        assert code == 0
        assert load_stage_config(path, "fusion", check_paths=False).epochs == 40
        assert "init-config" in cli_log.read_text(encoding="utf-8")

    def test_init_config_unwritable(self, tmp_path, cli_log):
        blocker = tmp_path / "blocker"
        blocker.write_text("", encoding="utf-8")
        assert main(["init-config", "--out", str(blocker / "hsvf.env")]) == 2

    def test_infer_without_checkpoints(self, tmp_path, tiny_corpus, cli_log):
        entry = read_manifest(tiny_corpus / "test.jsonl")[1]
        code = main(["infer", "--vis", str(entry.resolve(entry.vis)), "--nir", str(entry.resolve(entry.nir)),
                     "--out", str(tmp_path / "out.png"), "--ckpt-dir", str(tmp_path / "none")])
        assert code == 2

    def test_infer(self, tmp_path, tiny_corpus, metric_dir, untrained_ckpt, cli_log):
        entry = read_manifest(tiny_corpus / "test.jsonl")[1]
        out = tmp_path / "result" / "out.png"
        code = main(["infer", "--vis", str(entry.resolve(entry.vis)), "--nir", str(entry.resolve(entry.nir)),
                     "--out", str(out), "--ckpt-dir", str(untrained_ckpt), "--metric-dir", str(metric_dir),
                     "--intermediates"])
        assert code == 0
        for name in ("out.png", "out_sr.png", "out_vf.png", "out_seg.png", "out.json"):
            assert (out.parent / name).exists(), name
        diagnostic = json.loads(out.with_suffix(".json").read_text(encoding="utf-8"))
        assert diagnostic["stages"] == ["align", "recon", "fusion"]
        assert set(diagnostic["fog_density"]) == {"input", "output"}
        assert sum(diagnostic["class_histogram"].values()) == 64 * 64


class TestOrderedMap:
    @pytest.mark.parametrize("workers", [1, 4])
    def test_preserves_order(self, workers):
        def _slow_square(x):
            time.sleep(0.001 * ((7 * x) % 5))
            return x * x

        assert list(ordered_map(_slow_square, range(30), workers=workers)) == [x * x for x in range(30)]

    def test_uses_threads(self):
        names = set(ordered_map(lambda _: threading.current_thread().name, range(20), workers=3, name="Probe"))
        assert all(name.startswith("Probe-") for name in names)

    @pytest.mark.parametrize("workers", [1, 3])
    def test_first_failure_raised(self, workers):
        def _fail_on_five(x):
            if x == 5:
                raise ValueError("item 5")
            return x

        results = []
        with pytest.raises(ValueError, match="item 5"):
            for value in ordered_map(_fail_on_five, range(10), workers=workers):
                results.append(value)
        assert results == [0, 1, 2, 3, 4]


class TestPrefetch:
    def test_yields_everything(self):
        assert list(prefetch(iter(range(50)), maxsize=2)) == list(range(50))
        assert list(prefetch(range(3), maxsize=0)) == [0, 1, 2]

    def test_source_error_propagates(self):
        def _source():
            yield 1
            raise RuntimeError("hỏng")

        with pytest.raises(RuntimeError):
            list(prefetch(_source(), maxsize=2))

    def test_early_exit_stops_thread(self):
        before = threading.active_count()
        for value in prefetch(iter(np.arange(1000)), maxsize=2):
            if value == 3:
                break
        deadline = time.time() + 2
        while threading.active_count() > before and time.time() < deadline:
            time.sleep(0.01)
        assert threading.active_count() == before

import os
from pathlib import Path

import numpy as np
import pytest

from src.metrics.quality_models import fit_fog_model, fit_nss_model
from src.synthesis.corpus_builder import synthesize_corpus
from src.synthesis.scene_renderer import SceneRecipe, render_scene
from src.training.evaluation import metric_model_paths

SLOW_ENV = "HSVF_RUN_SLOW"
ACCEPTANCE_ENV = "HSVF_RUN_ACCEPTANCE"


def pytest_collection_modifyitems(config, items):
    for marker, env in (("slow", SLOW_ENV), ("acceptance", ACCEPTANCE_ENV)):
        if os.getenv(env) == "1":
            continue
        skip = pytest.mark.skip(reason=f"chạy lâu; đặt {env}=1 để chạy")
        for item in items:
            if marker in item.keywords:
                item.add_marker(skip)


@pytest.fixture(autouse=True)
def _no_seed_override(monkeypatch):
    monkeypatch.delenv("HSVF_SEED", raising=False)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory) -> Path:
    """6 scene 64x64 (4 train / 1 val / 1 test), mỗi scene một cặp clear và một cặp haze."""
    out_dir = tmp_path_factory.mktemp("corpus")
    synthesize_corpus(count=6, seed=0, out_dir=out_dir, size=64, workers=2)
    return out_dir


@pytest.fixture(scope="session")
def clear_scenes():
    return [render_scene(SceneRecipe(seed=1000 + i)) for i in range(50)]


@pytest.fixture(scope="session")
def metric_dir(tmp_path_factory, clear_scenes) -> Path:
    """FogModel / NssModel fit trên 50 cảnh clear, ghi vào thư mục tạm."""
    out_dir = tmp_path_factory.mktemp("metric_models")
    images = [p.visible for p in clear_scenes]
    fog_path, nss_path = metric_model_paths(out_dir)
    fit_fog_model(images).save(fog_path)
    fit_nss_model(images).save(nss_path)
    return out_dir


def write_stage_config(path: Path, corpus: Path, ckpt_dir: Path, epochs: int = 1, **extra) -> Path:
    """Config float64, CPU, tất định; extra là các cặp KEY=VALUE bổ sung (vd ABLATION__RECON='false')."""
    lines = [
        "COMMON__SEED=0",
        "COMMON__BATCH_SIZE=2",
        "COMMON__DTYPE=float64",
        "COMMON__DEVICE=cpu",
        "COMMON__DETERMINISTIC=true",
        "COMMON__LOG_EVERY=1",
        f"DATA__TRAIN={(corpus / 'train.jsonl').as_posix()}",
        f"DATA__VAL={(corpus / 'val.jsonl').as_posix()}",
        f"DATA__CKPT_DIR={Path(ckpt_dir).as_posix()}",
        f"ALIGN__EPOCHS={epochs}",
        f"RECON__EPOCHS={epochs}",
        f"FUSION__EPOCHS={epochs}",
        f"FINETUNE__EPOCHS={epochs}",
    ]
    lines += [f"{key}={value}" for key, value in extra.items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


@pytest.fixture
def stage_config_file(tmp_path, tiny_corpus):
    def _make(epochs: int = 1, ckpt_dir: Path = None, **extra) -> Path:
        return write_stage_config(tmp_path / "hsvf.env", tiny_corpus, ckpt_dir or tmp_path / "ckpt",
                                  epochs=epochs, **extra)
    return _make


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

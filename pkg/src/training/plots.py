# src/training/plots.py

"""
Plot tĩnh (PNG) dựng chỉ từ MetricReport: histogram metric, đường theo beta, texture theo dải độ sâu.
"""
import logging
from pathlib import Path
from typing import Dict, List, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ..core.exceptions import DataError  # noqa: E402
from ..metrics.fusion_metrics import DEPTH_BANDS  # noqa: E402
from ..metrics.report import MetricReport  # noqa: E402

logger = logging.getLogger(__name__)

HISTOGRAM_BINS = 20
BETA_BINS = 6
# Key mô tả input, không phải metric của output
_CONTEXT_KEYS = ("haze_beta",)


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, dpi=120, bbox_inches="tight")
    except OSError as e:
        raise DataError(f"Không thể ghi plot {path}: {e}") from e
    finally:
        plt.close(fig)
    logger.debug(f"Đã ghi plot {path}")
    return path


def plot_metric_histograms(report: MetricReport, out_path: Path) -> Path:
    names = [n for n in report.aggregate if n not in _CONTEXT_KEYS and "." not in n]
    cols = min(4, max(1, len(names)))
    rows = int(np.ceil(len(names) / cols)) or 1
    fig, axes = plt.subplots(rows, cols, figsize=(4 * cols, 3 * rows), squeeze=False)
    for ax, name in zip(axes.flat, names):
        values = report.values(name)
        ax.hist(values, bins=HISTOGRAM_BINS, color="tab:blue", alpha=0.8)
        agg = report.aggregate[name]
        ax.axvline(agg.mean, color="tab:red", linestyle="--", linewidth=1)
        ax.set_title(f"{name} (mean {agg.mean:.3f}, n={agg.count})", fontsize=9)
    for ax in list(axes.flat)[len(names):]:
        ax.axis("off")
    fig.suptitle(f"Metric histograms: {report.restorer}")
    return _save(fig, out_path)


def beta_curves(report: MetricReport, metrics=("input_fog_density", "fog_density")) -> Dict[str, Dict[str, List[float]]]:
    """Trung bình metric theo bin beta đều nhau; chỉ dùng ảnh có 'haze_beta'."""
    rows = [scores for scores in report.per_image.values() if "haze_beta" in scores]
    if not rows:
        return {}
    betas = np.array([r["haze_beta"] for r in rows])
    edges = np.linspace(betas.min(), betas.max() + 1e-9, BETA_BINS + 1)
    index = np.clip(np.digitize(betas, edges) - 1, 0, BETA_BINS - 1)
    curves = {}
    for metric in metrics:
        centers, means = [], []
        for b in range(BETA_BINS):
            selected = [rows[i][metric] for i in np.flatnonzero(index == b) if metric in rows[i]]
            if selected:
                centers.append(float(0.5 * (edges[b] + edges[b + 1])))
                means.append(float(np.mean(selected)))
        if centers:
            curves[metric] = {"beta": centers, "mean": means}
    return curves


def plot_beta_curves(report: MetricReport, out_path: Path) -> Path:
    curves = beta_curves(report)
    fig, ax = plt.subplots(figsize=(6, 4))
    for metric, curve in curves.items():
        ax.plot(curve["beta"], curve["mean"], marker="o", label=metric)
    ax.set_xlabel("haze beta (visible)")
    ax.set_ylabel("fog density")
    if curves:
        ax.legend()
    ax.set_title(f"Fog density vs beta: {report.restorer}")
    return _save(fig, out_path)


def plot_depth_bands(report: MetricReport, out_path: Path) -> Path:
    keys = [f"grad_{name}" for name, _, _ in DEPTH_BANDS if f"grad_{name}" in report.aggregate]
    fig, ax = plt.subplots(figsize=(5, 4))
    means = [report.aggregate[k].mean for k in keys]
    stds = [report.aggregate[k].std for k in keys]
    ax.bar([k.replace("grad_", "") for k in keys], means, yerr=stds, color="tab:green", alpha=0.8, capsize=4)
    ax.set_ylabel("mean gradient magnitude")
    ax.set_title(f"Texture by depth band: {report.restorer}")
    return _save(fig, out_path)


def render_report_plots(report: MetricReport, plots_dir: Union[str, Path]) -> List[Path]:
    plots_dir = Path(plots_dir)
    paths = [plot_metric_histograms(report, plots_dir / "metric_histograms.png")]
    if "haze_beta" in report.aggregate:
        paths.append(plot_beta_curves(report, plots_dir / "beta_curves.png"))
    if any(f"grad_{name}" in report.aggregate for name, _, _ in DEPTH_BANDS):
        paths.append(plot_depth_bands(report, plots_dir / "depth_bands.png"))
    logger.info(f"Đã ghi {len(paths)} plot vào {plots_dir}")
    return paths

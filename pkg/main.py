import argparse
import logging
import signal
import sys
from pathlib import Path

import torch

from src import config
from src.core.data_model import Image, ScenePair
from src.core.exceptions import HSVFError
from src.metrics.quality_models import fog_density
from src.metrics.report import load_report
from src.storage.checkpoint_store import STAGES
from src.storage.file_handlers import convert_numpy_to_native, create_file_handler
from src.synthesis.corpus_builder import synthesize_corpus
from src.training.ablation import ARMS, run_ablation
from src.training.evaluation import evaluate, fit_metric_models, load_metric_models
from src.training.plots import render_report_plots
from src.training.restorers import HSVFRestorer
from src.training.stage_config import load_stage_config, write_default_config
from src.training.stage_runner import run_stage
from src.utils.logger_setup import setup_logging

logger = logging.getLogger("main")


def signal_handler(signum, frame):
    """SIGTERM được chuyển thành KeyboardInterrupt để các context manager đóng file log đúng cách."""
    logger.info(f"Nhận tín hiệu dừng {signum}. Đang thoát ứng dụng...")
    raise KeyboardInterrupt


def resolve_device(name: str) -> torch.device:
    if name == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    return torch.device(name)


# ==============================================================================
# Subcommands
# ==============================================================================

def cmd_synth(args) -> int:
    entries = synthesize_corpus(
        count=args.count,
        seed=args.seed,
        beta_range=(args.beta_min, args.beta_max),
        nir_beta_ratio=args.nir_beta_ratio,
        out_dir=args.out,
        size=args.size,
        workers=args.workers,
    )
    logger.info(f"Corpus: {len(entries)} entry tại {args.out}")
    return 0


def cmd_fit_metrics(args) -> int:
    models = fit_metric_models(args.data, args.out)
    logger.info(f"Metric model đã ghi: {models.source}")
    return 0


def cmd_train(args) -> int:
    cfg = load_stage_config(args.config, args.stage)
    result = run_stage(cfg)
    logger.info(f"Stage '{result.stage}' xong: checkpoint {result.checkpoint}, log {result.log_path}, "
                f"val {result.val_metrics}")
    return 0


def cmd_eval(args) -> int:
    report = evaluate(
        ckpt_dir=args.ckpt_dir,
        manifest=args.data,
        out_report=args.out,
        restorer=args.restorer,
        streams=args.streams,
        metric_dir=args.metric_dir,
        plots_dir=args.plots,
        workers=args.workers,
        device=str(resolve_device(args.device)),
    )
    for name, agg in report.aggregate.items():
        logger.info(f"  {name:<24} mean={agg.mean:.4f} std={agg.std:.4f} n={agg.count}")
    return 0


def cmd_infer(args) -> int:
    vis_path, nir_path, out_path = Path(args.vis), Path(args.nir), Path(args.out)
    pair = ScenePair(
        id=vis_path.stem,
        visible=Image(create_file_handler(vis_path, "rgb").read()),
        nir=Image(create_file_handler(nir_path, "gray").read()),
        condition="haze",
        provenance="external",
    )
    restorer = HSVFRestorer(args.ckpt_dir, device=resolve_device(args.device))
    restoration = restorer.restore(pair)

    create_file_handler(out_path, "rgb").write(restoration.final.pixels)
    written = {"O_Final": str(out_path)}
    if args.intermediates:
        for stream, image in restoration.streams().items():
            stream_path = out_path.with_name(f"{out_path.stem}_{stream}{out_path.suffix}")
            create_file_handler(stream_path, "rgb").write(image.pixels)
            written[f"O_{stream.upper()}"] = str(stream_path)
        seg_path = out_path.with_name(f"{out_path.stem}_seg{out_path.suffix}")
        create_file_handler(seg_path, "mask").write(restoration.segmentation.labels)
        written["S_pred"] = str(seg_path)

    diagnostic = {
        "id": pair.id,
        "inputs": {"vis": str(vis_path), "nir": str(nir_path)},
        "outputs": written,
        "stages": restorer.loaded_stages,
        "size": list(pair.size),
        "output_mean": restoration.final.pixels.mean(axis=(0, 1)),
        "class_histogram": restoration.segmentation.class_histogram(),
    }
    try:
        models = load_metric_models(args.metric_dir)
        diagnostic["fog_density"] = {"input": fog_density(pair.visible, models.fog),
                                     "output": fog_density(restoration.final, models.fog)}
    except HSVFError as e:
        logger.warning(f"Bỏ qua fog density trong diagnostic: {e}")
    create_file_handler(out_path.with_suffix(".json"), "json").write(convert_numpy_to_native(diagnostic))
    logger.info(f"Đã ghi {written}")
    return 0


def cmd_ablate(args) -> int:
    summary = run_ablation(args.arm, args.config, args.out, seeds=args.seeds, metric_dir=args.metric_dir)
    for variant, data in summary["variants"].items():
        logger.info(f"  {variant:<14} {data['mean']}")
    return 0


def cmd_report(args) -> int:
    report = load_report(args.input)
    paths = render_report_plots(report, args.plots)
    logger.info(f"Report '{report.restorer}' ({len(report.per_image)} ảnh): {len(paths)} plot trong {args.plots}")
    return 0


def cmd_init_config(args) -> int:
    write_default_config(args.out, data_dir=args.data_dir, ckpt_dir=args.ckpt_dir)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="HSVF: khử sương tầm xa bằng fusion visible / NIR")
    parser.add_argument("--debug", action="store_true", help="Bật log DEBUG")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="Sinh corpus tổng hợp")
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--beta-min", type=float, default=0.4)
    p.add_argument("--beta-max", type=float, default=1.2)
    p.add_argument("--nir-beta-ratio", type=float, default=0.3)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", default=config.DATA_DIR)
    p.add_argument("--workers", type=int, default=config.WORKERS)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit-metrics", help="Fit FogModel / NssModel trên ảnh clear")
    p.add_argument("--data", default=str(Path(config.DATA_DIR) / "train.jsonl"))
    p.add_argument("--out", default=config.METRIC_MODEL_DIR)
    p.set_defaults(func=cmd_fit_metrics)

    p = sub.add_parser("train", help="Huấn luyện một stage")
    p.add_argument("--stage", required=True, choices=STAGES)
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Chấm điểm trên manifest và ghi report JSON")
    p.add_argument("--ckpt-dir", default=config.CKPT_DIR)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--restorer", default="hsvf", choices=("hsvf", "identity"))
    p.add_argument("--streams", action="store_true", help="Chấm thêm O_SR và O_VF")
    p.add_argument("--metric-dir", default=config.METRIC_MODEL_DIR)
    p.add_argument("--plots", default=None)
    p.add_argument("--workers", type=int, default=config.WORKERS)
    p.add_argument("--device", default="cpu")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="Khử sương một cặp ảnh")
    p.add_argument("--vis", required=True)
    p.add_argument("--nir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ckpt-dir", default=config.CKPT_DIR)
    p.add_argument("--intermediates", action="store_true", help="Ghi thêm O_SR, O_VF và segmentation")
    p.add_argument("--metric-dir", default=config.METRIC_MODEL_DIR)
    p.add_argument("--device", default="cpu")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ablate", help="Chạy một arm ablation")
    p.add_argument("--arm", required=True, choices=ARMS)
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="ablation")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--metric-dir", default=config.METRIC_MODEL_DIR)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="Dựng plot từ report JSON")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--plots", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("init-config", help="Ghi file config mặc định")
    p.add_argument("--out", default="hsvf.env")
    p.add_argument("--data-dir", default=config.DATA_DIR)
    p.add_argument("--ckpt-dir", default=config.CKPT_DIR)
    p.set_defaults(func=cmd_init_config)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    log_level = "DEBUG" if args.debug else config.LOG_LEVEL
    setup_logging(log_level=log_level, log_file=config.LOG_FILE)
    signal.signal(signal.SIGTERM, signal_handler)

    try:
        logger.info(f"Lệnh '{args.command}' đang chạy...")
        return args.func(args)
    except HSVFError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except KeyboardInterrupt:
        logger.info("Đã dừng theo yêu cầu người dùng.")
        return 130
    except Exception as e:
        logger.critical(f"Lỗi không mong muốn: {e}", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())

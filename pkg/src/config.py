import os
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

# Logging
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO").upper()
LOG_FILE = os.getenv("HSVF_LOG_FILE") or None

# Thư mục mặc định
DATA_DIR = os.getenv("HSVF_DATA_DIR", "data/minivnhd")
CKPT_DIR = os.getenv("HSVF_CKPT_DIR", "checkpoints")
METRIC_MODEL_DIR = os.getenv("HSVF_METRIC_MODEL_DIR", "metric_models")

# Thiết bị tính toán: "cpu", "cuda", "cuda:1", ... ("auto" chọn cuda nếu có)
DEVICE = os.getenv("HSVF_DEVICE", "auto")

# Số thread cho synthesis / evaluation song song. 1 = tuần tự
WORKERS = int(os.getenv("HSVF_WORKERS", 1))
# Kích thước hàng đợi prefetch batch khi training. 0 = tắt prefetch
PREFETCH_BATCHES = int(os.getenv("HSVF_PREFETCH_BATCHES", 2))

# Deterministic kernels (bắt buộc cho test, có thể tắt khi chạy lấy tốc độ)
DETERMINISTIC = os.getenv("HSVF_DETERMINISTIC", "true").lower() == "true"

# Chu kỳ log tiến độ training (số step)
LOG_EVERY_STEPS = int(os.getenv("HSVF_LOG_EVERY_STEPS", 10))

# Tên biến môi trường ghi đè seed của config file; đọc lúc load config, không phải lúc import
SEED_ENV_VAR = "HSVF_SEED"

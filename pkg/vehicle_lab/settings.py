import os

import dotenv

dotenv.load_dotenv()

LOG_LEVEL = os.getenv("VEHICLE_LAB_LOG_LEVEL", "INFO").upper()
LOG_DIR = os.getenv("VEHICLE_LAB_LOG_DIR", "logs")
OUTPUT_DIR = os.getenv("VEHICLE_LAB_OUTPUT_DIR", "runs")


def _int_from_env(key: str, default: int) -> int:
    raw_value = os.getenv(key)
    if raw_value in (None, ""):
        return default
    try:
        return int(raw_value)
    except ValueError as exc:
        raise ValueError(f"{key} must be an integer, got {raw_value!r}.") from exc


DEFAULT_SEED = _int_from_env("VEHICLE_LAB_SEED", 0)
DEFAULT_WORKERS = max(_int_from_env("VEHICLE_LAB_WORKERS", 1), 1)

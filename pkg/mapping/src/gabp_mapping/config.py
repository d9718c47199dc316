import logging
import math
import os
from pathlib import Path

import colorlog
from dotenv import load_dotenv

ROOT = Path(__file__).resolve().parents[2]
cwd_env = Path.cwd() / ".env"
root_env = ROOT / ".env"

# Project root first, then CWD, later loads override earlier ones
if root_env.exists():
    load_dotenv(dotenv_path=root_env, override=True)
else:
    load_dotenv(override=True)

if cwd_env.exists():
    load_dotenv(dotenv_path=cwd_env, override=True)


def _float_env(name: str, default: float) -> float:
    raw = os.getenv(name)
    if raw is None or not raw.strip():
        return default
    return float(raw)


LOG_LEVEL = os.getenv("GABP_LOG_LEVEL", "INFO")
OUT_DIR = Path(os.getenv("GABP_OUT_DIR", "out"))

# Model defaults (2D/3D simulation study values)
SIGMA_S_SQ = _float_env("GABP_SIGMA_S_SQ", 0.1)
SIGMA_R_SQ = _float_env("GABP_SIGMA_R_SQ", 2.0)
SIGMA_D_SQ = _float_env("GABP_SIGMA_D_SQ", 1e4)
SIGMA_ZETA_SQ = _float_env("GABP_SIGMA_ZETA_SQ", math.inf)
SIGMA_P_SQ = _float_env("GABP_SIGMA_P_SQ", math.nan)  # nan -> derived far-field value
EPSILON = _float_env("GABP_EPSILON", 0.01)
Z0 = _float_env("GABP_Z0", 0.0)

# Solver
CONVERGENCE_FLOOR = _float_env("GABP_CONVERGENCE_FLOOR", 1e-9)
DENSE_CAP = int(_float_env("GABP_DENSE_CAP", 2000))

# Benchmark cost model
MESSAGE_COST_S = _float_env("GABP_MESSAGE_COST_S", 2e-5)
DENSE_COST_S = _float_env("GABP_DENSE_COST_S", 1e-9)
RESIDUAL_RATE = _float_env("GABP_RESIDUAL_RATE", 2000.0)
Z_THRESH_PPB = _float_env("GABP_Z_THRESH_PPB", 100.0)

# Map service
API_HOST = os.getenv("GABP_API_HOST", "0.0.0.0")
API_PORT = int(_float_env("GABP_API_PORT", 8000))
SCENARIO_FILE = os.getenv("GABP_SCENARIO", "")

LOG_FORMAT = "%(log_color)s%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def setup_logging(level: str | int | None = None) -> None:
    """Install a colored stream handler on the root logger (once)."""
    root = logging.getLogger()
    root.setLevel(level or LOG_LEVEL)
    if any(getattr(h, "_gabp_handler", False) for h in root.handlers):
        return
    handler = colorlog.StreamHandler()
    handler.setFormatter(colorlog.ColoredFormatter(LOG_FORMAT))
    handler._gabp_handler = True
    root.addHandler(handler)

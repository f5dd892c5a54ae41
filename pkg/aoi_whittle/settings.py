"""Environment configuration loaded from .env files."""

import os
from dotenv import load_dotenv

load_dotenv(override=True)

LOG_LEVEL = os.environ.get("AOI_LOG_LEVEL", "INFO")
WORKERS = int(os.environ.get("AOI_WORKERS", "1"))
OUT_DIR = os.environ.get("AOI_OUT_DIR", "results")

# Fluid bins lighter than this are dropped from the tail
TRUNCATION_EPS = float(os.environ.get("AOI_TRUNCATION_EPS", "1e-15"))

# Fraction of the simulation horizon discarded before the burned average
BURN_IN = float(os.environ.get("AOI_BURN_IN", "0.1"))

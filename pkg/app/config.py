"""
    Configuration for Philautia-Eval.
    Values come from the environment (optionally a local .env file).
"""

import os
from dotenv import load_dotenv

load_dotenv()

BASE_DIR = os.path.dirname(os.path.abspath(__file__))
PROJECT_DIR = os.path.abspath(os.path.join(BASE_DIR, ".."))

LOG_DIR = os.getenv("LOG_DIR", os.path.join(PROJECT_DIR, "logs"))
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO").upper()

# OpenAI-compatible chat completion endpoint used when endpoints.json omits base_url
DEFAULT_BASE_URL = os.getenv("DEFAULT_BASE_URL", "https://openrouter.ai/api/v1")
DEFAULT_REQUEST_TIMEOUT = float(os.getenv("DEFAULT_REQUEST_TIMEOUT", "60"))
RETRY_WAIT_SECONDS = float(os.getenv("RETRY_WAIT_SECONDS", "1.0"))

DEFAULT_MIN_COVERAGE = float(os.getenv("DEFAULT_MIN_COVERAGE", "0.95"))

# population std at or below this is treated as zero variance
ZERO_VARIANCE_TOL = 1e-9

# guard for submatrix enumeration
MAX_SUBSETS = 1_000_000

VERSION_FILE = os.path.join(PROJECT_DIR, "application_version.txt")


def application_version() -> str:
    """Read the release string shipped with the repo.

    Returns:
        str: version string, "unknown" if the file is missing
    """
    try:
        with open(VERSION_FILE, encoding="utf-8") as version_file:
            return version_file.read().strip()
    except OSError:
        return "unknown"

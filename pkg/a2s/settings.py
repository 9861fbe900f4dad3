import os
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()

DATABASE_URL = os.getenv(
    "DATABASE_URL",
    "sqlite:///./a2s_runs.db"  # Local ledger file next to the working directory
)

LOG_LEVEL = os.getenv("A2S_LOG_LEVEL", "INFO").upper()


def cache_dir() -> Path:
    """Dataset cache root: A2S_CACHE_DIR, else $XDG_CACHE_HOME/a2s, else ~/.cache/a2s."""
    override = os.getenv("A2S_CACHE_DIR")
    if override:
        return Path(override)
    xdg = os.getenv("XDG_CACHE_HOME")
    base = Path(xdg) if xdg else Path.home() / ".cache"
    return base / "a2s"

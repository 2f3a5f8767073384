# settings.py
"""
Environment-driven configuration for the compiler, backend and runtime.
Values are read once from the process environment (and a local .env file).
"""

import os
from functools import lru_cache

from dotenv import load_dotenv
from pydantic import BaseModel, Field

load_dotenv()


def _env_flag(name: str, default: bool) -> bool:
    raw = os.getenv(name)
    if raw is None:
        return default
    return raw.strip().lower() in ("1", "true", "yes", "on")


class Settings(BaseModel):
    log_dir: str = Field("logs", description="Directory for the daily log file")
    log_level: str = Field("INFO", description="Console log level")
    seed: int = Field(0, description="Seed for every RNG used by the CLI and runtime")
    debug_fill: bool = Field(True, description="Fill skipped predicated outputs with a sentinel byte")
    guard_constants: bool = Field(False, description="Check the constant region after each run")
    fuse: bool = Field(True, description="Stack consecutive data-parallel instructions")

    @classmethod
    def from_env(cls) -> "Settings":
        return cls(
            log_dir=os.getenv("GRAPHLOWER_LOG_DIR", "logs"),
            log_level=os.getenv("GRAPHLOWER_LOG_LEVEL", "INFO"),
            seed=int(os.getenv("GRAPHLOWER_SEED", "0")),
            debug_fill=_env_flag("GRAPHLOWER_DEBUG_FILL", True),
            guard_constants=_env_flag("GRAPHLOWER_GUARD_CONSTANTS", False),
            fuse=_env_flag("GRAPHLOWER_FUSE", True),
        )


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    return Settings.from_env()

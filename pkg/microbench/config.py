"""
Runtime settings and shared configuration helpers
"""
import logging
from functools import lru_cache

import numpy as np
from dotenv import load_dotenv
from pydantic import ValidationError as PydanticValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from microbench.errors import ConfigError

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    """Process-wide defaults, overridable with MICRO_* variables or a .env file"""

    model_config = SettingsConfigDict(env_prefix="MICRO_", extra="ignore")

    seed: int = 0
    out_dir: str = "output"
    jobs: int = 1
    log_level: str = "INFO"
    bundled_frames: int = 100
    bundled_points: int = 6700


@lru_cache(maxsize=1)
def get_settings():
    return Settings()


def build(model_cls, **values):
    """
    Construct a pydantic config model, converting validation failures

    Args:
        model_cls: pydantic model class
        **values: field values

    Returns:
        The validated model instance
    """
    try:
        return model_cls(**values)
    except PydanticValidationError as e:
        raise ConfigError(f"invalid {model_cls.__name__}: {e}") from e


def make_rng(seed):
    """Seeded PCG64 generator used by every stochastic operation"""
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rngs(seed, n):
    """Independent child generators, stable for a given (seed, n)"""
    children = np.random.SeedSequence(seed).spawn(n)
    return [np.random.Generator(np.random.PCG64(c)) for c in children]

"""
Tunable constants and the single environment switch.

Values come from a flat ``key=value`` file (UTF-8, ``#`` comments) and are
validated by pydantic. The only environment variable read is
``COLLAR_LOG_LEVEL``.
"""

import logging
import math
import os
from pathlib import Path
from typing import Dict, Optional, Union

from pydantic import BaseModel, ConfigDict, Field

try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    pass

EPS1 = 8.0 / math.sqrt(5.0)
LOG_LEVEL_ENV = "COLLAR_LOG_LEVEL"


class Settings(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    eps2: float = Field(default=EPS1 / 36.0, gt=0.0, description="Thick-part injectivity constant")
    eps5: float = Field(default=0.25, gt=0.0, le=0.5, description="Injectivity radius comparison constant")
    eps3: float = Field(default=0.01, gt=0.0, description="Lower edge of the band-constant window")
    eps4: float = Field(default=500.0, gt=0.0, description="Upper edge of the band-constant window")
    k_max: int = Field(default=64, ge=0, description="Default Fourier truncation order")
    m0: int = Field(default=16, ge=2, description="Default generator power for peak sections")
    panels: int = Field(default=16, ge=8, description="Initial Simpson panels")
    rel_tol: float = Field(default=1e-10, gt=0.0, lt=1.0, description="Quadrature relative tolerance")
    max_refine: int = Field(default=20, ge=1, description="Simpson refinement depth")
    denominator_floor: float = Field(default=1e-10, gt=0.0, description="Floor for the generator norm sum")
    gram_condition_max: float = Field(default=1e12, gt=1.0, description="Largest accepted Gram condition number")
    hormander_tolerance: float = Field(default=2.0, ge=1.0, description="Tolerance factor on 1/(m-1)")
    sup_ceiling: float = Field(default=50.0, gt=0.0, description="Ceiling for sup of the weight")
    lower_gap_ceiling: float = Field(default=20.0, gt=0.0, description="Ceiling for the lower-bound gap")
    curvature_ceiling: float = Field(default=500.0, gt=0.0, description="Ceiling for the curvature floor")
    dbar_tolerance: float = Field(default=1e-2, gt=0.0, description="Weighted relative d-bar residual accepted for peak sections")
    peak_bergman_fraction: float = Field(default=1e-3, gt=0.0, le=1.0, description="Smallest accepted peak ratio as a fraction of the Bergman bound")
    corona_tolerance: float = Field(default=1e-6, gt=0.0, description="Relative residual accepted by the corona decomposition")
    log_level: str = Field(default="WARNING", description="Logging level name")


def parse_key_values(text: str) -> Dict[str, str]:
    """Parse flat key=value lines; '#' starts a comment."""
    values: Dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"Line {number}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip().replace("-", "_")
        if not key:
            raise ValueError(f"Line {number}: empty key")
        values[key] = value.strip()
    return values


def load_settings(path: Optional[Union[str, Path]] = None, overrides: Optional[Dict[str, object]] = None) -> Settings:
    values: Dict[str, object] = {}
    if path is not None:
        values.update(parse_key_values(Path(path).read_text(encoding="utf-8")))
    env_level = os.getenv(LOG_LEVEL_ENV)
    if env_level:
        values["log_level"] = env_level.upper()
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    return Settings(**values)


def configure_logging(settings: Settings) -> None:
    level = getattr(logging, settings.log_level.upper(), logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


DEFAULT_SETTINGS = Settings()

from pathlib import Path
from typing import Literal

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    app_name: str = "Bottlenecked Transformer Lab"
    app_version: str = "0.1.0"
    checkpoint_every: int = 1
    debug: bool = False
    default_dtype: Literal["float32", "float64"] = "float32"
    invocation_stats_filename: str = "invocation_stats.csv"
    log_every: int = 25
    log_level: str = "INFO"
    max_trace_len: int = 512
    metrics_filename: str = "metrics.csv"
    output_dir: Path = Path("runs")
    seed: int = 0

    model_config = SettingsConfigDict(
        env_file=".env", env_prefix="BOTTLENECK_", extra="ignore"
    )


settings = Settings()

"""
Configuration management for the nested operator engine.
Loads environment variables and provides type-safe settings.

Experiment parameters live in JSON run configs (see ``src.models.RunConfig``);
these settings only cover the process environment.
"""

from typing import Optional

from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    """Application settings loaded from environment variables."""

    # Application
    environment: str = "development"
    log_level: str = "INFO"

    # Execution
    threads: int = 1
    default_seed: int = 0
    output_dir: str = "runs"
    checkpoint_suffix: str = ".fdon"

    # Langfuse (remote traces are skipped unless both keys are set)
    langfuse_public_key: Optional[str] = None
    langfuse_secret_key: Optional[str] = None
    langfuse_host: str = "https://cloud.langfuse.com"

    class Config:
        env_file = ".env"
        case_sensitive = False


# Global settings instance
settings = Settings()

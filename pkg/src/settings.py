"""
Centralized process settings for FedCPC.

Environment-driven knobs read through python-decouple with typed defaults.
Run-level experiment configuration lives in run_config.py; these settings
cover what varies per machine or process (logging, network, timeouts).
"""

from decouple import config  # type: ignore


def _optional_int(value: str) -> int | None:
    return int(value) if str(value).strip() else None


class Settings:
    """Centralized application settings."""

    # Logging Configuration
    LOG_LEVEL: str = config("LOG_LEVEL", default="INFO")
    LOG_JSON: bool = config("LOG_JSON", default=False, cast=bool)

    # Environment Detection
    IS_TEST_ENV: bool = config("IS_TEST_ENV", default=False, cast=bool)

    # Reproducibility
    FEDCPC_SEED: int | None = config("FEDCPC_SEED", default="", cast=_optional_int)

    # Federation transport
    FEDCPC_HOST: str = config("FEDCPC_HOST", default="127.0.0.1")
    FEDCPC_PORT: int = config("FEDCPC_PORT", default=7641, cast=int)
    FEDCPC_MAX_FRAME_BYTES: int = config(
        "FEDCPC_MAX_FRAME_BYTES", default=256 * 1024 * 1024, cast=int
    )  # 256 MiB
    FEDCPC_ROUND_TIMEOUT_S: float = config(
        "FEDCPC_ROUND_TIMEOUT_S", default=3600.0, cast=float
    )
    FEDCPC_CONNECT_TIMEOUT_S: float = config(
        "FEDCPC_CONNECT_TIMEOUT_S", default=30.0, cast=float
    )

    # Parallelism for corpus generation and in-process clients
    FEDCPC_WORKERS: int = config("FEDCPC_WORKERS", default=4, cast=int)

    def validate(self) -> None:
        """Validate configuration settings and raise errors for invalid values."""
        errors = []

        if not 0 < self.FEDCPC_PORT < 65536:
            errors.append("FEDCPC_PORT must be between 1 and 65535")

        if self.FEDCPC_MAX_FRAME_BYTES < 64:
            errors.append("FEDCPC_MAX_FRAME_BYTES must be at least 64")

        if self.FEDCPC_ROUND_TIMEOUT_S <= 0:
            errors.append("FEDCPC_ROUND_TIMEOUT_S must be positive")

        if self.FEDCPC_CONNECT_TIMEOUT_S <= 0:
            errors.append("FEDCPC_CONNECT_TIMEOUT_S must be positive")

        if self.FEDCPC_WORKERS < 1:
            errors.append("FEDCPC_WORKERS must be at least 1")

        if self.FEDCPC_SEED is not None and self.FEDCPC_SEED < 0:
            errors.append("FEDCPC_SEED must be non-negative")

        if errors:
            raise ValueError(f"Configuration validation failed: {'; '.join(errors)}")

    def __repr__(self) -> str:
        safe_attrs = [
            "LOG_LEVEL",
            "IS_TEST_ENV",
            "FEDCPC_SEED",
            "FEDCPC_HOST",
            "FEDCPC_PORT",
            "FEDCPC_WORKERS",
        ]
        attrs = {attr: getattr(self, attr) for attr in safe_attrs}
        return f"Settings({attrs})"


# Global settings instance
settings = Settings()


def get_seed_override() -> int | None:
    """Seed from FEDCPC_SEED, if set. Read at call time so late exports count."""
    return config("FEDCPC_SEED", default="", cast=_optional_int)

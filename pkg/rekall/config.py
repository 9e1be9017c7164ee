"""
Configuration management using environment variables.
"""

import logging
import os
from pathlib import Path

from dotenv import load_dotenv

logger = logging.getLogger(__name__)

# Load environment variables from .env file only if not in test mode
if "PYTEST_CURRENT_TEST" not in os.environ:
    load_dotenv()


class Config:
    """Process-wide configuration from environment variables."""

    # Data locations
    DATA_ROOT: Path = Path(os.getenv("REKALL_DATA_ROOT", "./data"))
    CACHE_DIR: Path = Path(os.getenv("REKALL_CACHE_DIR", "./data/cache"))
    RUNS_DIR: Path = Path(os.getenv("REKALL_RUNS_DIR", "./runs"))

    # MedMNIST-style archives (pathmnist, octmnist)
    MEDMNIST_URL: str = os.getenv(
        "REKALL_MEDMNIST_URL",
        "https://zenodo.org/records/10519652/files/{name}.npz?download=1",
    )
    DOWNLOAD_RETRIES: int = int(os.getenv("REKALL_DOWNLOAD_RETRIES", "3"))
    DOWNLOAD_TIMEOUT: int = int(os.getenv("REKALL_DOWNLOAD_TIMEOUT", "120"))

    # Compute
    DEVICE: str = os.getenv("REKALL_DEVICE", "cpu")

    # Logging
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")
    LOG_JSON: bool = os.getenv("LOG_JSON", "false").lower() == "true"

    @classmethod
    def validate(cls) -> bool:
        """
        Validate the environment settings, logging each problem.

        :return: True when every setting is usable
        :rtype: bool
        """
        errors = []

        if cls.DEVICE not in ("cpu", "cuda", "auto"):
            errors.append(f"REKALL_DEVICE must be cpu, cuda or auto, got {cls.DEVICE}")

        if "{name}" not in cls.MEDMNIST_URL:
            errors.append("REKALL_MEDMNIST_URL must contain a {name} placeholder")

        if cls.DOWNLOAD_RETRIES < 1:
            errors.append("REKALL_DOWNLOAD_RETRIES must be at least 1")

        if errors:
            for error in errors:
                logger.error(f"Configuration error: {error}")
            return False

        return True

    @classmethod
    def resolve_data_root(cls, override: Path | str | None = None) -> Path:
        """
        Resolve the dataset root, preferring an explicit run-configuration value.

        :param override: ``data_root`` from the run configuration, if any
        :type override: Optional[Union[Path, str]]

        :return: Dataset root directory
        :rtype: Path
        """
        return Path(override) if override else cls.DATA_ROOT

    @classmethod
    def resolve_device(cls, requested: str | None = None) -> str:
        """
        Resolve ``auto`` into a concrete torch device string.

        :param requested: Device from the run configuration, if any
        :type requested: Optional[str]

        :return: ``cpu`` or ``cuda``
        :rtype: str
        """
        device = requested or cls.DEVICE
        if device == "auto":
            import torch

            return "cuda" if torch.cuda.is_available() else "cpu"
        return device


import os
from pathlib import Path
from typing import Any, Optional

import yaml
from dotenv import load_dotenv
from pycti import get_config_variable


def _as_bool(raw: Any) -> bool:
    # Handle both string values and boolean values
    if isinstance(raw, bool):
        return raw
    return str(raw).lower() in ("true", "1", "yes", "on")


class Config:
    def __init__(self, config_path: Optional[Path] = None):
        """
        Initialize the environment configuration
        :param config_path: Optional explicit config.yml location
        """

        self.load = self._load_config(config_path)
        self._initialize_configurations()

    @staticmethod
    def _load_config(config_path: Optional[Path] = None) -> dict:
        """
        Load the configuration from the YAML file
        :return: Configuration dictionary
        """
        parent_dir = Path(__file__).parents[2]
        config_file_path = config_path or parent_dir.joinpath("config.yml")
        load_dotenv(parent_dir.joinpath(".env"))
        if not os.path.isfile(config_file_path):
            return {}
        with open(config_file_path, encoding="utf-8") as handle:
            return yaml.safe_load(handle) or {}

    def _initialize_configurations(self) -> None:
        """
        AudioFuse configuration variables
        :return: None
        """
        # Logging
        self.log_level = get_config_variable(
            "AUDIOFUSE_LOG_LEVEL",
            ["audiofuse", "log_level"],
            self.load,
            default="info",
        )
        self.json_logging = _as_bool(
            get_config_variable(
                "AUDIOFUSE_JSON_LOGGING",
                ["audiofuse", "json_logging"],
                self.load,
                default="true",
            )
        )

        # Execution
        self.workers = get_config_variable(
            "AUDIOFUSE_WORKERS",
            ["audiofuse", "workers"],
            self.load,
            isNumber=True,
            default=1,
        )
        self.seed = get_config_variable(
            "AUDIOFUSE_SEED",
            ["audiofuse", "seed"],
            self.load,
            isNumber=True,
            default=0,
        )

        # PhysioNet download
        self.physionet_base_url = get_config_variable(
            "PHYSIONET_BASE_URL",
            ["physionet", "base_url"],
            self.load,
            default="https://physionet.org/files/challenge-2016/1.0.0/",
        )
        self.physionet_cooldown = float(
            get_config_variable(
                "PHYSIONET_COOLDOWN",
                ["physionet", "cooldown_seconds"],
                self.load,
                default=0.5,
            )
        )

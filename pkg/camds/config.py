"""Configuration management for camds."""

import copy
import logging
import os
from pathlib import Path
from typing import Any, Optional, Union

import yaml

from camds.errors import ConfigurationError
from camds.model import ModelConfig
from camds.synthetic import SyntheticSpec
from camds.training import TrainConfig

logger = logging.getLogger(__name__)

DEFAULTS: dict[str, Any] = {
    "model": ModelConfig().to_dict(),
    "training": TrainConfig().to_dict(),
    "synthetic": SyntheticSpec().to_dict(),
    "evaluation": {
        "threshold": 0.5,
        "operating_sensitivities": [0.95, 0.99],
        "batch_size": 64,
    },
    "system": {
        "log_level": "INFO",
        "log_max_size": 10,
        "log_backup_count": 3,
        "threads": 1,
    },
}

CONFIG_ENV = "CAMDS_CONFIG"
THREADS_ENV = "CAMDS_THREADS"


def _deep_merge(base: dict, override: dict) -> dict:
    """Recursively merge override dict into base dict."""
    result = base.copy()
    for key, value in override.items():
        if key in result and isinstance(result[key], dict) and isinstance(value, dict):
            result[key] = _deep_merge(result[key], value)
        else:
            result[key] = value
    return result


def _sectioned(user: dict[str, Any]) -> dict[str, dict[str, Any]]:
    """Place top-level keys: section mappings stay, bare keys go to every section defining them."""
    placed: dict[str, dict[str, Any]] = {}
    for key, value in user.items():
        if key in DEFAULTS:
            if not isinstance(value, dict):
                raise ConfigurationError(f"section {key!r} must be a mapping")
            unknown = sorted(set(value) - set(DEFAULTS[key]))
            if unknown:
                raise ConfigurationError(f"unknown {key} setting(s): {', '.join(unknown)}")
            placed.setdefault(key, {}).update(value)
            continue
        sections = [name for name, keys in DEFAULTS.items() if key in keys]
        if not sections:
            raise ConfigurationError(f"unknown setting {key!r}")
        for name in sections:
            placed.setdefault(name, {})[key] = value
    return placed


def threads_from_env() -> Optional[int]:
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw == "":
        return None
    try:
        value = int(raw)
    except ValueError:
        value = 0
    if value < 1:
        raise ConfigurationError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return value


class ConfigManager:
    """Loads, validates, and provides access to configuration."""

    def __init__(self, config_path: Optional[Union[str, Path]] = None) -> None:
        env_path = os.environ.get(CONFIG_ENV)
        if config_path:
            self.config_path: Optional[Path] = Path(config_path)
        elif env_path:
            self.config_path = Path(env_path)
        else:
            self.config_path = None

        self.config = self._load()

    def _read(self, path: Path) -> dict[str, Any]:
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        try:
            with open(path, encoding="utf-8") as f:
                loaded = yaml.safe_load(f)
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"malformed config {path}: {exc}") from exc
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigurationError(f"config {path} must be a key: value mapping")
        logger.info("Loaded config from %s", path)
        return _sectioned(loaded or {})

    def _load(self) -> dict[str, Any]:
        user_config: dict[str, Any] = {}
        if self.config_path is not None:
            user_config = self._read(self.config_path)

        threads = threads_from_env()
        if threads is not None:
            user_config.setdefault("system", {})["threads"] = threads

        return _deep_merge(copy.deepcopy(DEFAULTS), user_config)

    def reload(self) -> None:
        """Reload configuration from disk."""
        self.config = self._load()

    def merge_file(self, path: Union[str, Path]) -> None:
        """Overlay a second YAML file; only the keys it names change."""
        self.config = _deep_merge(self.config, self._read(Path(path)))

    def override(self, section: str, **values: Any) -> None:
        """Apply command-line values; ``None`` means the flag was not given."""
        if section not in self.config:
            raise ConfigurationError(f"unknown config section {section!r}")
        for key, value in values.items():
            if value is None:
                continue
            if key not in self.config[section]:
                raise ConfigurationError(f"unknown {section} setting {key!r}")
            self.config[section][key] = value

    # -- convenience accessors --------------------------------------------------

    def get(self, section: str, key: str, fallback: Any = None) -> Any:
        return self.config.get(section, {}).get(key, fallback)

    @property
    def model(self) -> dict:
        return self.config["model"]

    @property
    def training(self) -> dict:
        return self.config["training"]

    @property
    def synthetic(self) -> dict:
        return self.config["synthetic"]

    @property
    def evaluation(self) -> dict:
        return self.config["evaluation"]

    @property
    def system(self) -> dict:
        return self.config["system"]

    @property
    def log_level(self) -> str:
        return self.config["system"]["log_level"]

    @property
    def threads(self) -> int:
        value = self.config["system"]["threads"]
        if not isinstance(value, int) or value < 1:
            raise ConfigurationError(f"system.threads must be a positive integer, got {value!r}")
        return value

    # -- typed views -------------------------------------------------------------

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.model)

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.training)

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec.from_dict(self.synthetic)

    def log_effective(self) -> None:
        source = self.config_path or "built-in defaults"
        logger.info("Effective configuration (%s): %s", source, self.config)

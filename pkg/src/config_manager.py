"""
Configuration Manager for loading and managing application configuration.
Supports YAML files, optional profile overlays and command-line overrides.

The only environment coupling is ``EAV_LOG_LEVEL``, which selects logging
verbosity.
"""
import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional

import yaml
from pydantic import ValidationError

from src.config_schema import Config
from src.errors import ConfigError

logger = logging.getLogger(__name__)

LOG_LEVEL_ENV = 'EAV_LOG_LEVEL'
DEFAULT_CONFIG_PATH = Path(__file__).parent.parent / "config" / "config.yaml"


class ConfigManager:
    """
    Singleton configuration manager that loads and manages application configuration.

    Supports:
    - YAML configuration files
    - Profile overlays (``config.<profile>.yaml`` next to the main file)
    - Dotted-key overrides from the command line
    """

    _instance: Optional['ConfigManager'] = None

    def __new__(cls):
        """Singleton pattern to ensure only one config instance."""
        if cls._instance is None:
            cls._instance = super(ConfigManager, cls).__new__(cls)
        return cls._instance

    def load_config(
        self,
        config_path: Optional[str] = None,
        profile: Optional[str] = None,
        overrides: Optional[Dict[str, Any]] = None,
    ) -> Config:
        """
        Load configuration from a YAML file, a profile overlay and overrides.

        Args:
            config_path: Path to main config file (default: config/config.yaml)
            profile: Overlay name; merges config.<profile>.yaml if it exists
            overrides: Mapping of dotted keys (``enhance.tau``) to values

        Returns:
            Config object with all settings

        Raises:
            ConfigError: If a file is missing or malformed, or validation fails
        """
        config_path = Path(config_path) if config_path is not None else DEFAULT_CONFIG_PATH

        base_config = self._load_yaml_file(config_path)

        if profile:
            profile_path = config_path.parent / f"config.{profile}.yaml"
            if not profile_path.exists():
                raise ConfigError(f"Profile config not found: {profile_path}")
            base_config = self._deep_merge(base_config, self._load_yaml_file(profile_path))
            logger.info(f"Merged profile config from {profile_path}")

        if overrides:
            base_config = self._deep_merge(base_config, self._expand_overrides(overrides))

        config = self.validate(base_config, source=str(config_path))
        logger.debug(f"Configuration loaded from {config_path}")
        return config

    @staticmethod
    def validate(data: Dict[str, Any], source: str = "<config>") -> Config:
        """Validate a raw mapping, converting pydantic errors to field diagnostics."""
        try:
            return Config(**data)
        except ValidationError as e:
            diagnostics = []
            for error in e.errors():
                location = ".".join(str(part) for part in error['loc']) or "<root>"
                diagnostics.append(f"{location}: {error['msg']}")
            raise ConfigError(f"Invalid configuration in {source}", diagnostics)
        except TypeError as e:
            raise ConfigError(f"Invalid configuration in {source}", [str(e)])

    def _load_yaml_file(self, file_path: Path) -> Dict[str, Any]:
        """
        Load YAML file and return as dictionary.

        Raises:
            ConfigError: If the file doesn't exist, is malformed or is not a mapping
        """
        if not file_path.exists():
            raise ConfigError(f"Configuration file not found: {file_path}")

        try:
            with open(file_path, 'r', encoding='utf-8') as f:
                data = yaml.safe_load(f)
        except yaml.YAMLError as e:
            mark = getattr(e, 'problem_mark', None)
            where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
            raise ConfigError(f"Invalid YAML in {file_path}{where}", [str(getattr(e, 'problem', e))])
        except OSError as e:
            raise ConfigError(f"Error reading {file_path}: {e}")

        if data is None:
            return {}
        if not isinstance(data, dict):
            raise ConfigError(f"Top level of {file_path} must be a mapping, got {type(data).__name__}")
        return data

    def _deep_merge(self, base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
        """Deep merge two dictionaries, with override taking precedence."""
        result = base.copy()

        for key, value in override.items():
            if key in result and isinstance(result[key], dict) and isinstance(value, dict):
                result[key] = self._deep_merge(result[key], value)
            else:
                result[key] = value

        return result

    @staticmethod
    def _expand_overrides(overrides: Dict[str, Any]) -> Dict[str, Any]:
        """``{'enhance.tau': 4.0}`` -> ``{'enhance': {'tau': 4.0}}``."""
        nested: Dict[str, Any] = {}
        for dotted, value in overrides.items():
            current = nested
            parts = dotted.split('.')
            for part in parts[:-1]:
                current = current.setdefault(part, {})
            current[parts[-1]] = value
        return nested

    @classmethod
    def reset(cls):
        """Reset the singleton instance (useful for testing)."""
        cls._instance = None


def config_document(config: Config) -> Dict[str, Any]:
    """Plain-data form of a config, suitable for YAML or JSON."""
    return config.model_dump(mode='json')


def dump_config(config: Config, path: Path) -> Path:
    from src.artifacts import atomic_write_text
    return atomic_write_text(Path(path), yaml.safe_dump(config_document(config), sort_keys=False))


def config_hash(config: Config) -> str:
    """sha256 of the canonical JSON of everything except output paths."""
    document = config_document(config)
    document.pop('output', None)
    canonical = json.dumps(document, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def configure_logging(config: Optional[Config] = None) -> str:
    """Set the root log level from EAV_LOG_LEVEL, else the config, else INFO."""
    level = os.getenv(LOG_LEVEL_ENV) or (config.environment.log_level if config else 'INFO')
    level = level.upper()
    if level not in logging._nameToLevel:
        level = 'INFO'
    logging.basicConfig(level=level, format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    logging.getLogger().setLevel(level)
    return level


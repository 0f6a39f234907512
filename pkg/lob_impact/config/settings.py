#!/usr/bin/env python3
"""
Configuration management for lob-impact.

Handles defaults, YAML config files, .env files and environment variables.
"""

import os
import json
import hashlib
import yaml
from pathlib import Path
from typing import Dict, Any, Optional, List
from dataclasses import dataclass, asdict
import logging

from dotenv import dotenv_values

logger = logging.getLogger(__name__)

ENV_PREFIX = "LOB_IMPACT_"


@dataclass
class BookConfig:
    """Order-book discretisation settings."""
    depth: int = 2
    buckets: int = 3
    tick_size: int = 100
    tick_multiple: int = 1


@dataclass
class CalibrationConfig:
    """Maximum-likelihood optimiser settings."""
    method: str = "gradient-ascent"
    max_iterations: int = 5000
    gradient_tolerance: float = 1e-6
    armijo_c: float = 1e-4
    initial_alpha: float = 0.1
    initial_beta: float = 2.0
    beta_max: float = 20.0
    restarts: int = 4
    seed: int = 0
    kernel_tail_tolerance: Optional[float] = None
    workers: int = 1
    dirichlet_tolerance: float = 1e-8
    dirichlet_max_iterations: int = 10000
    dirichlet_floor: float = 1e-9
    ks_min_events: int = 10


@dataclass
class SimulationConfig:
    """Thinning simulation and Monte Carlo settings."""
    rejection_budget: int = 10000
    kernel_tail_tolerance: Optional[float] = None
    workers: int = 1
    transient_window_factor: float = 2.0
    grid_size: int = 200
    paths: int = 1


@dataclass
class AppConfig:
    """Complete application configuration."""
    book: BookConfig
    calibration: CalibrationConfig
    simulation: SimulationConfig
    log_level: str = "INFO"

    def to_dict(self) -> Dict[str, Any]:
        """Convert config to dictionary."""
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'AppConfig':
        """Create config from dictionary."""
        return cls(
            book=BookConfig(**data.get('book', {})),
            calibration=CalibrationConfig(**data.get('calibration', {})),
            simulation=SimulationConfig(**data.get('simulation', {})),
            log_level=data.get('log_level', 'INFO')
        )

    @classmethod
    def defaults(cls) -> 'AppConfig':
        return cls(book=BookConfig(), calibration=CalibrationConfig(), simulation=SimulationConfig())

    def config_hash(self) -> str:
        """Stable digest of the configuration, written into output headers."""
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()[:16]


def _optional_float(value: str) -> Optional[float]:
    if value.strip().lower() in ('', 'none', 'off'):
        return None
    return float(value)


class ConfigManager:
    """Manages configuration loading and saving."""

    def __init__(self, config_file: Optional[Path] = None, env_file: Optional[Path] = None):
        """
        Initialize configuration manager.

        Args:
            config_file: YAML config file (optional)
            env_file: .env file (default: .env next to the config file, if any)
        """
        self.config_file = Path(config_file) if config_file else None
        if env_file is None and self.config_file is not None:
            env_file = self.config_file.parent / '.env'
        self.env_file = Path(env_file) if env_file else None

        self.config = self._load_config()

    def _load_config(self) -> AppConfig:
        """Load configuration from all sources."""
        config_data: Dict[str, Any] = {}

        if self.config_file is not None and self.config_file.exists():
            try:
                with open(self.config_file, 'r') as f:
                    file_config = yaml.safe_load(f) or {}
                config_data.update(file_config)
                logger.info(f"📄 Loaded config from {self.config_file}")
            except Exception as e:
                logger.warning(f"Failed to load config file: {e}")

        if self.env_file is not None and self.env_file.exists():
            try:
                env_config = {k: v for k, v in dotenv_values(self.env_file).items() if v is not None}
                config_data = self._merge_env_config(config_data, env_config)
                logger.info(f"📄 Loaded .env from {self.env_file}")
            except Exception as e:
                logger.warning(f"Failed to load .env file: {e}")

        env_config = self._load_env_vars()
        config_data = self._merge_env_config(config_data, env_config)

        return AppConfig.from_dict(config_data)

    def _env_mapping(self) -> Dict[str, tuple]:
        return {
            # Book config
            'DEPTH': ('book', 'depth', int),
            'BUCKETS': ('book', 'buckets', int),
            'TICK_SIZE': ('book', 'tick_size', int),
            'TICK_MULTIPLE': ('book', 'tick_multiple', int),

            # Calibration config
            'FIT_METHOD': ('calibration', 'method'),
            'MAX_ITERATIONS': ('calibration', 'max_iterations', int),
            'GRADIENT_TOLERANCE': ('calibration', 'gradient_tolerance', float),
            'RESTARTS': ('calibration', 'restarts', int),
            'FIT_SEED': ('calibration', 'seed', int),
            'FIT_WORKERS': ('calibration', 'workers', int),
            'FIT_TAIL_TOLERANCE': ('calibration', 'kernel_tail_tolerance', _optional_float),

            # Simulation config
            'REJECTION_BUDGET': ('simulation', 'rejection_budget', int),
            'SIM_TAIL_TOLERANCE': ('simulation', 'kernel_tail_tolerance', _optional_float),
            'SIM_WORKERS': ('simulation', 'workers', int),
            'GRID_SIZE': ('simulation', 'grid_size', int),

            # General config
            'LOG_LEVEL': ('log_level',),
        }

    def _load_env_vars(self) -> Dict[str, str]:
        """Load relevant environment variables."""
        env_vars = {}
        for name in self._env_mapping():
            value = os.getenv(ENV_PREFIX + name)
            if value is not None:
                env_vars[ENV_PREFIX + name] = value
        return env_vars

    def _merge_env_config(self, config_data: Dict[str, Any], env_vars: Dict[str, str]) -> Dict[str, Any]:
        """Merge environment variables into config data."""
        for section in ('book', 'calibration', 'simulation'):
            config_data.setdefault(section, {})

        for name, mapping in self._env_mapping().items():
            env_var = ENV_PREFIX + name
            if env_var not in env_vars:
                continue
            value: Any = env_vars[env_var]

            if len(mapping) > 2:
                converter = mapping[2]
                try:
                    value = converter(value)
                except (ValueError, TypeError) as e:
                    logger.warning(f"Failed to convert {env_var}={value}: {e}")
                    continue

            if len(mapping) == 1:
                config_data[mapping[0]] = value
            else:
                section, key = mapping[0], mapping[1]
                config_data[section][key] = value

        return config_data

    def save_config(self, path: Optional[Path] = None, config: Optional[AppConfig] = None) -> Path:
        """Save configuration to a YAML file."""
        config = config or self.config
        target = Path(path) if path else self.config_file
        if target is None:
            raise ValueError("No config file path given")

        try:
            target.parent.mkdir(parents=True, exist_ok=True)
            with open(target, 'w') as f:
                yaml.dump(config.to_dict(), f, default_flow_style=False, indent=2)
            logger.info(f"✅ Configuration saved to {target}")
        except Exception as e:
            logger.error(f"❌ Failed to save config: {e}")
            raise
        return target

    def validate_config(self) -> List[str]:
        """Validate configuration and return list of issues."""
        issues = []
        book = self.config.book
        calib = self.config.calibration
        sim = self.config.simulation

        if book.buckets < 1 or book.buckets % 2 == 0:
            issues.append("Number of imbalance buckets K must be odd and >= 1")
        if book.depth < 1:
            issues.append("Book depth n must be >= 1")
        if book.tick_size < 1:
            issues.append("Tick size must be a positive integer")
        if book.tick_multiple < 1:
            issues.append("Tick multiple m must be >= 1")

        if calib.method not in ('gradient-ascent', 'lbfgs'):
            issues.append("Calibration method must be one of: ['gradient-ascent', 'lbfgs']")
        if calib.gradient_tolerance <= 0 or calib.dirichlet_tolerance <= 0:
            issues.append("Tolerances must be positive")
        if not 0 < calib.armijo_c < 1:
            issues.append("Armijo constant must be in (0, 1)")
        if calib.beta_max <= 1:
            issues.append("Beta cap must exceed 1")
        if calib.initial_beta <= 1 or calib.initial_beta > calib.beta_max:
            issues.append("Initial beta must lie in (1, beta_max]")
        if calib.restarts < 1:
            issues.append("At least one optimiser start is required")

        if sim.rejection_budget < 1:
            issues.append("Rejection budget must be >= 1")
        if sim.transient_window_factor < 0:
            issues.append("Transient window factor must be non-negative")
        if sim.grid_size < 2:
            issues.append("Profile grid needs at least 2 points")

        return issues

    def get_config(self) -> AppConfig:
        """Get current configuration."""
        return self.config

    def update_config(self, **kwargs) -> None:
        """Update configuration with new values (dotted keys address sections)."""
        config_dict = self.config.to_dict()

        for key, value in kwargs.items():
            if value is None:
                continue
            if '.' in key:
                section, field_name = key.split('.', 1)
                if section in config_dict:
                    config_dict[section][field_name] = value
            else:
                config_dict[key] = value

        self.config = AppConfig.from_dict(config_dict)


# Global config manager instance
_config_manager = None


def get_config_manager() -> ConfigManager:
    """Get global configuration manager instance."""
    global _config_manager
    if _config_manager is None:
        _config_manager = ConfigManager()
    return _config_manager


def get_config() -> AppConfig:
    """Get current application configuration."""
    return get_config_manager().get_config()

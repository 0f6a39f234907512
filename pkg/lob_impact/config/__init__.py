"""
Configuration package for lob-impact.
"""

from .settings import (
    BookConfig,
    CalibrationConfig,
    SimulationConfig,
    AppConfig,
    ConfigManager,
    get_config_manager,
    get_config
)

__all__ = [
    'BookConfig',
    'CalibrationConfig',
    'SimulationConfig',
    'AppConfig',
    'ConfigManager',
    'get_config_manager',
    'get_config'
]

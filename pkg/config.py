"""
Configuration management for the patchcp toolkit.
"""

import json
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np

from utils import ConfigError


class Config:
    """Central configuration for patchcp."""

    # Toolkit info
    TOOLKIT_NAME = "patchcp"
    VERSION = "1.0.0"
    FORMAT_VERSION = "1"  # bump on any CSV schema change

    # Output paths
    BASE_DIR = Path(__file__).parent
    OUTPUT_DIR = BASE_DIR / "output"
    RUNS_DIR = OUTPUT_DIR / "runs"
    DB_PATH = OUTPUT_DIR / "patchcp_runs.db"

    # Monte Carlo defaults
    DEFAULT_SEED = 20240101
    DEFAULT_REPLICAS = 1000
    DEFAULT_THREADS = 1

    # Dual process
    DUAL_CAP = 10 ** 6

    # Mean-field integration
    ODE_METHOD = "RK45"
    ODE_RTOL = 1e-9
    ODE_ATOL = 1e-9
    CROSSING_TOL = 1e-10
    FRONT_TOL = 1e-9
    DETECTOR_LEVELS = 33
    THETA_GRID = np.linspace(0.01, 10.0, 1000)  # theta * M; divided by M before use

    # Floating comparison for the a = 4 branch
    BRANCH_TOL = 1e-12

    # Sections accepted in an experiment file, with their defaults
    SECTION_DEFAULTS: Dict[str, Dict[str, Any]] = {
        "params": {"a": 2.0, "b": 1.0, "N": 10, "M": 1},
        "sim": {
            "K": 10,
            "boundary": "lower",
            "horizon": 10.0,
            "initial": "single",
            "block_L": 0,
            "dt": 1.0,
            "event_log": False,
        },
        "meanfield": {
            "K": 40,
            "boundary": "upper",
            "u0": 0.9,
            "t_end": 10.0,
            "L": 5,
            "horizon": 20.0,
        },
        "dual": {"t": 1.0, "N": 100, "check_N": 2, "patches": 2, "checks": 100, "eps": 0.1, "x": 0},
        "isolated": {"M": 1000},
        "percolation": {"gamma": 0.1, "k": 0, "depth": 50, "width": 0},
        "portrait": {
            "a_min": 0.5, "a_max": 8.0, "a_step": 0.25,
            "b_min": 0.25, "b_max": 6.0, "b_step": 0.25,
            "horizon": 20.0,
        },
        "range": {"M_values": [100, 1000, 10000], "horizon": 20.0, "max_K": 2000000},
    }

    @classmethod
    def initialize_directories(cls):
        """Create necessary directories."""
        for directory in [cls.OUTPUT_DIR, cls.RUNS_DIR]:
            directory.mkdir(parents=True, exist_ok=True)

    @classmethod
    def load_experiment(cls, path: Optional[str]) -> Dict[str, Dict[str, Any]]:
        """Read an experiment file (JSON with one object per section)."""
        if path is None:
            return {}
        try:
            with open(path, 'r') as f:
                values = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read experiment file {path}: {e}", field="--config")

        if not isinstance(values, dict):
            raise ConfigError("experiment file must hold an object of sections", field="--config")
        for section, body in values.items():
            if not isinstance(body, dict):
                raise ConfigError(f"section must be an object", field=section)
        return values

    @classmethod
    def merge(
        cls,
        file_values: Optional[Dict[str, Dict[str, Any]]] = None,
        overrides: Optional[Dict[str, Any]] = None
    ) -> Dict[str, Dict[str, Any]]:
        """
        Build the effective configuration.

        Args:
            file_values: Sections read by load_experiment
            overrides: Flat 'section.key' -> value map from the command line

        Returns:
            Deep copy of the defaults with file values, then overrides, applied
        """
        effective = {name: dict(body) for name, body in cls.SECTION_DEFAULTS.items()}

        for section, body in (file_values or {}).items():
            cls._apply(effective, section, body)

        for path, value in (overrides or {}).items():
            if '.' not in path:
                raise ConfigError("override must look like section.key", field=path)
            section, key = path.split('.', 1)
            cls._apply(effective, section, {key: value})

        return effective

    @classmethod
    def _apply(cls, effective: Dict[str, Dict[str, Any]], section: str, body: Dict[str, Any]):
        if section not in effective:
            raise ConfigError("unknown section", field=section)
        for key, value in body.items():
            if key not in effective[section]:
                raise ConfigError("unknown key", field=f"{section}.{key}")
            default = effective[section][key]
            effective[section][key] = cls._coerce(value, default, f"{section}.{key}")

    @staticmethod
    def _coerce(value: Any, default: Any, field: str) -> Any:
        """Coerce command-line strings to the type of the default."""
        if not isinstance(value, str) or isinstance(default, str):
            return value
        try:
            if isinstance(default, bool):
                if value.lower() in ('1', 'true', 'yes'):
                    return True
                if value.lower() in ('0', 'false', 'no'):
                    return False
                raise ValueError(value)
            if isinstance(default, int):
                return int(value)
            if isinstance(default, float):
                return float(value)
            if isinstance(default, list):
                return [type(default[0])(v) if default else float(v) for v in value.split(',')]
        except ValueError:
            raise ConfigError(f"cannot parse {value!r}", field=field)
        return value

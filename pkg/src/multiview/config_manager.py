"""
Multiview Configuration Manager - solver, recovery and experiment settings
Loads config/config.yaml and builds the typed parameter objects used by the CLI.
"""

import copy
import yaml
import logging
from typing import Any, Dict, Optional
from pathlib import Path

from transport import IpotParams
from recovery import RecoveryConfig
from baselines import BaselineConfig
from synthdata import PerturbSpec, SceneSpec
from bench import SweepConfig
from core import Grid


def _deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


class ConfigManager:
    """Manages defaults for the recovery library and its experiment harness."""

    def __init__(self, config_path: Optional[Path] = None):
        self.logger = logging.getLogger(__name__)

        # Use default config path if none provided
        if config_path is None:
            config_path = Path(__file__).parent.parent.parent / "config" / "config.yaml"

        self.config_path = Path(config_path)
        self.config_data: Dict[str, Any] = {}
        self.load_config()

    def load_config(self) -> None:
        """Load configuration from YAML file, layered over the built-in defaults."""
        defaults = self._get_default_config()
        try:
            if self.config_path.exists():
                with open(self.config_path, 'r') as f:
                    loaded = yaml.safe_load(f) or {}
                self.config_data = _deep_merge(defaults, loaded)
                self.logger.info(f"Loaded configuration from {self.config_path}")
            else:
                self.logger.warning(f"Config file not found: {self.config_path}, using defaults")
                self.config_data = defaults
        except yaml.YAMLError as e:
            self.logger.error(f"Failed to parse config {self.config_path}: {e}")
            self.config_data = defaults

    def save_config(self, path: Optional[Path] = None) -> Path:
        """Write the current configuration as YAML."""
        target = Path(path) if path is not None else self.config_path
        target.parent.mkdir(parents=True, exist_ok=True)
        with open(target, 'w') as f:
            yaml.safe_dump(self.config_data, f, default_flow_style=False, indent=2, sort_keys=False)
        self.logger.info(f"Saved configuration to {target}")
        return target

    def get(self, key: str, default: Any = None) -> Any:
        """Get a configuration value using dot notation (e.g., 'recovery.beta')."""
        keys = key.split('.')
        value = self.config_data

        try:
            for k in keys:
                value = value[k]
            return value
        except (KeyError, TypeError):
            return default

    def set(self, key: str, value: Any) -> None:
        """Set a configuration value using dot notation."""
        keys = key.split('.')
        config = self.config_data

        for k in keys[:-1]:
            if k not in config or not isinstance(config[k], dict):
                config[k] = {}
            config = config[k]

        config[keys[-1]] = value
        self.logger.debug(f"Set config {key} = {value}")

    def _get_default_config(self) -> Dict[str, Any]:
        """Get default configuration values."""
        return {
            'solver': {
                'name': 'exact'
            },
            'ipot': {
                'prox_weight': 1.0,
                'outer_iters': 200,
                'inner_sinkhorn_iters': 1,
                'convergence_tol': 1e-6
            },
            'recovery': {
                'beta': 2.0,
                'lambda': 40.0,
                'step_size': None,
                'step_decay': 0.01,
                'inner_tmax': 30,
                'outer_tmax': 30,
                'project_support': True
            },
            'baseline': {
                'beta': 0.05,
                'mu': None,
                'plan_step_size': None,
                'step_size': 1.0,
                'step_decay': 0.01,
                'inner_tmax': 30,
                'outer_tmax': 30,
                'box_projection': True,
                'use_normal_equations': True
            },
            'scene': {
                'letter': 'E',
                'grid_rows': 16,
                'grid_cols': 32,
                'level': 1.0
            },
            'perturb': {
                'displacement_radius': 2,
                'shift_rows': 1,
                'shift_cols': 2,
                'swap_prob': 0.5,
                'max_attempts': 100
            },
            'logging': {
                'level': 'INFO',
                'output': {
                    'console': True,
                    'file': False,
                    'directory': 'build/logs'
                }
            }
        }

    def ipot_params(self) -> IpotParams:
        return IpotParams.model_validate(self.get('ipot', {}))

    def recovery_payload(self) -> Dict[str, Any]:
        """Recovery section with the solver choice and IPOT settings folded in."""
        payload = dict(self.get('recovery', {}))
        payload.setdefault('solver', self.get('solver.name', 'exact'))
        payload.setdefault('ipot', dict(self.get('ipot', {})))
        return payload

    def recovery_config(self) -> RecoveryConfig:
        return RecoveryConfig.model_validate(self.recovery_payload())

    def baseline_config(self) -> BaselineConfig:
        return BaselineConfig.model_validate(self.get('baseline', {}))

    def perturb_spec(self) -> PerturbSpec:
        return PerturbSpec.model_validate(self.get('perturb', {}))

    def scene_spec(self) -> SceneSpec:
        """Letter scene on the configured grid."""
        grid = Grid(int(self.get('scene.grid_rows', 16)), int(self.get('scene.grid_cols', 32)))
        return SceneSpec.for_letter(self.get('scene.letter', 'E'), grid, float(self.get('scene.level', 1.0)))

    def get_log_level(self) -> str:
        return str(self.get('logging.level', 'INFO')).upper()

    def log_to_file(self) -> bool:
        return bool(self.get('logging.output.file', False))

    def get_log_directory(self) -> Path:
        return Path(self.get('logging.output.directory', 'build/logs'))

    def load_sweep_config(self, path: Path) -> SweepConfig:
        """
        Read a sweep YAML file; its recovery, baseline and perturb sections
        override the defaults held by this manager.
        """
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Sweep config not found: {path}")
        with open(path, 'r') as f:
            data = yaml.safe_load(f) or {}
        if not isinstance(data, dict):
            raise ValueError(f"Sweep config {path} must be a mapping, got {type(data).__name__}")

        scene = self.get('scene', {})
        for key in ('letter', 'grid_rows', 'grid_cols', 'level'):
            data.setdefault(key, scene.get(key))
        data['recovery'] = _deep_merge(self.recovery_payload(), data.get('recovery') or {})
        data['baseline'] = _deep_merge(self.get('baseline', {}), data.get('baseline') or {})
        data['perturb'] = _deep_merge(self.get('perturb', {}), data.get('perturb') or {})
        data.setdefault('name', path.stem)
        self.logger.info(f"Loaded sweep config '{data['name']}' from {path}")
        return SweepConfig.model_validate(data)

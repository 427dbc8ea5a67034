"""Configuration management for the splat uncertainty toolkit.

Reads and writes config.ini for renderer thresholds, representation
settings, regression hyperparameters and logging. Command-line flags
override whatever is loaded here.
"""

import configparser
import logging
import os
from typing import Optional

logger = logging.getLogger(__name__)

DEFAULT_CONFIG = {
    "render": {
        "tile_size": "16",
        "normalized_depth": "false",
    },
    "representations": {
        "margin": "0.1",
        "kappa": "8.0",
        "sh_degree": "4",
        "n_directions": "256",
        "direction_mode": "gaussian",
        "error_mean": "all",
        "error_source": "render",
    },
    "fisher": {
        "eps": "1e-6",
        "fd_step": "1e-4",
        "fd_floor": "1e-6",
        "geometric": "true",
    },
    "gbdt": {
        "n_trees": "200",
        "max_depth": "3",
        "learning_rate": "0.1",
        "min_leaf": "20",
    },
    "regression": {
        "stride": "1",
        "selection_mode": "per_view",
    },
    "metrics": {
        "steps": "100",
    },
    "app": {
        "version": "1.0.0",
        "log_level": "INFO",
        "log_file": "",
        "threads": "1",
    },
}

DIRECTION_MODES = ("gaussian", "forward")
ERROR_MEANS = ("all", "visible")
ERROR_SOURCES = ("render", "depth")
SELECTION_MODES = ("per_view", "pooled")


class ConfigError(Exception):
    """Raised when a config value cannot be parsed."""


class Config:
    """Toolkit configuration backed by config.ini."""

    def __init__(self, config_path: str = "config.ini"):
        self.config_path = config_path
        self._config = configparser.ConfigParser()
        self._load_defaults()

    def _load_defaults(self) -> None:
        """Populate config with default values."""
        for section, values in DEFAULT_CONFIG.items():
            if not self._config.has_section(section):
                self._config.add_section(section)
            for key, value in values.items():
                self._config.set(section, key, value)

    def load(self) -> None:
        """Load config from file, merging with defaults."""
        if os.path.exists(self.config_path):
            try:
                self._config.read(self.config_path)
            except configparser.Error as e:
                raise ConfigError(f"Cannot parse {self.config_path}: {e}") from e
            logger.info("Config loaded from %s", self.config_path)
        else:
            logger.info("No config file found, using defaults")

    def save(self) -> None:
        """Write current config to file (atomic via tmp + rename)."""
        tmp_path = self.config_path + ".tmp"
        with open(tmp_path, "w") as f:
            self._config.write(f)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_path, self.config_path)
        logger.info("Config saved to %s", self.config_path)

    def get(self, section: str, key: str, fallback: Optional[str] = None) -> str:
        """Get a config value."""
        return self._config.get(section, key, fallback=fallback)

    def get_int(self, section: str, key: str, fallback: int = 0) -> int:
        """Get a config value as integer."""
        try:
            return self._config.getint(section, key, fallback=fallback)
        except ValueError as e:
            raise ConfigError(f"[{section}] {key} is not an integer: {e}") from e

    def get_float(self, section: str, key: str, fallback: float = 0.0) -> float:
        """Get a config value as float."""
        try:
            return self._config.getfloat(section, key, fallback=fallback)
        except ValueError as e:
            raise ConfigError(f"[{section}] {key} is not a number: {e}") from e

    def get_bool(self, section: str, key: str, fallback: bool = False) -> bool:
        """Get a config value as boolean (true/false, on/off, yes/no, 1/0)."""
        try:
            return self._config.getboolean(section, key, fallback=fallback)
        except ValueError as e:
            raise ConfigError(f"[{section}] {key} is not a boolean: {e}") from e

    def set(self, section: str, key: str, value: str) -> None:
        """Set a config value."""
        if not self._config.has_section(section):
            self._config.add_section(section)
        self._config.set(section, key, value)

    # Convenience properties

    @property
    def tile_size(self) -> int:
        return self.get_int("render", "tile_size", fallback=16)

    @property
    def normalized_depth(self) -> bool:
        return self.get_bool("render", "normalized_depth")

    @property
    def margin(self) -> float:
        return self.get_float("representations", "margin", fallback=0.1)

    @property
    def kappa(self) -> float:
        return self.get_float("representations", "kappa", fallback=8.0)

    @kappa.setter
    def kappa(self, value: float) -> None:
        self.set("representations", "kappa", repr(float(value)))

    @property
    def sh_degree(self) -> int:
        return self.get_int("representations", "sh_degree", fallback=4)

    @sh_degree.setter
    def sh_degree(self, value: int) -> None:
        self.set("representations", "sh_degree", str(int(value)))

    @property
    def n_directions(self) -> int:
        return self.get_int("representations", "n_directions", fallback=256)

    @property
    def direction_mode(self) -> str:
        return self.get("representations", "direction_mode", fallback="gaussian")

    @property
    def error_mean(self) -> str:
        return self.get("representations", "error_mean", fallback="all")

    @property
    def error_source(self) -> str:
        return self.get("representations", "error_source", fallback="render")

    @property
    def fisher_eps(self) -> float:
        return self.get_float("fisher", "eps", fallback=1e-6)

    @property
    def fd_step(self) -> float:
        return self.get_float("fisher", "fd_step", fallback=1e-4)

    @property
    def fd_floor(self) -> float:
        return self.get_float("fisher", "fd_floor", fallback=1e-6)

    @property
    def fisher_geometric(self) -> bool:
        return self.get_bool("fisher", "geometric", fallback=True)

    @property
    def gbdt_params(self) -> dict:
        """Boosting hyperparameters as keyword arguments for GBDTParams."""
        return {
            "n_trees": self.get_int("gbdt", "n_trees", fallback=200),
            "max_depth": self.get_int("gbdt", "max_depth", fallback=3),
            "learning_rate": self.get_float("gbdt", "learning_rate", fallback=0.1),
            "min_leaf": self.get_int("gbdt", "min_leaf", fallback=20),
        }

    @property
    def stride(self) -> int:
        return self.get_int("regression", "stride", fallback=1)

    @property
    def selection_mode(self) -> str:
        return self.get("regression", "selection_mode", fallback="per_view")

    @property
    def sparsification_steps(self) -> int:
        return self.get_int("metrics", "steps", fallback=100)

    @property
    def version(self) -> str:
        return self.get("app", "version")

    @property
    def log_level(self) -> str:
        return self.get("app", "log_level")

    @property
    def log_file(self) -> str:
        return self.get("app", "log_file", fallback="")

    @property
    def threads(self) -> int:
        return self.get_int("app", "threads", fallback=1)

    @threads.setter
    def threads(self, value: int) -> None:
        self.set("app", "threads", str(int(value)))

    def validate(self) -> list[str]:
        """Check configuration for common problems.

        Returns a list of human-readable warning strings. An empty list
        means no issues detected. The CLI logs each one at startup.
        """
        warnings: list[str] = []

        if self.kappa <= 0:
            warnings.append(f"kappa {self.kappa} must be positive; directional representations will fail.")

        if not 0 <= self.sh_degree <= 4:
            warnings.append(f"sh_degree {self.sh_degree} is outside 0..4.")
        elif self.n_directions < (self.sh_degree + 1) ** 2:
            warnings.append(
                f"n_directions {self.n_directions} is too few to fit SH degree {self.sh_degree}."
            )

        if self.margin < 0:
            warnings.append(f"Frustum margin {self.margin} is negative.")

        if self.direction_mode not in DIRECTION_MODES:
            warnings.append(f"direction_mode \"{self.direction_mode}\" is not one of {DIRECTION_MODES}.")

        if self.error_mean not in ERROR_MEANS:
            warnings.append(f"error_mean \"{self.error_mean}\" is not one of {ERROR_MEANS}.")

        if self.error_source not in ERROR_SOURCES:
            warnings.append(f"error_source \"{self.error_source}\" is not one of {ERROR_SOURCES}.")

        if self.selection_mode not in SELECTION_MODES:
            warnings.append(f"selection_mode \"{self.selection_mode}\" is not one of {SELECTION_MODES}.")

        if self.fisher_eps <= 0:
            warnings.append("Fisher eps should be positive; invisible Gaussians get infinite variance.")

        params = self.gbdt_params
        if params["n_trees"] < 0 or params["max_depth"] < 1 or params["min_leaf"] < 1:
            warnings.append(f"Boosting parameters look invalid: {params}.")
        if not 0 < params["learning_rate"] <= 1:
            warnings.append(f"learning_rate {params['learning_rate']} is outside (0, 1].")

        if self.threads < 1:
            warnings.append(f"threads {self.threads} must be at least 1.")

        return warnings

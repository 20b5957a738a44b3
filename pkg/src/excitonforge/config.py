import os
import json
import hashlib
import logging
from dataclasses import dataclass, asdict, fields
from pathlib import Path
from typing import Dict, Any, Optional, Tuple, Mapping

from .exceptions import ConfigError
from .open_system import NOISE_MODEL_MAP

logger = logging.getLogger(__name__)

# --- Configuration Paths ---
# Allow overriding the global config directory via an environment variable
_config_dir_override = os.environ.get("EXCITON_FORGE_CONFIG_DIR")

# Global config: ~/.exciton-forge/config.json
GLOBAL_CONFIG_DIR = Path(_config_dir_override) if _config_dir_override else Path.home() / ".exciton-forge"
GLOBAL_CONFIG_FILE = GLOBAL_CONFIG_DIR / "config.json"

# Local config: ./exciton-forge/config.json
LOCAL_CONFIG_DIR = Path.cwd() / "exciton-forge"
LOCAL_CONFIG_FILE = LOCAL_CONFIG_DIR / "config.json"

# Fields that change where or how fast a run executes, never what it computes.
_UNHASHED_FIELDS = ("workers", "output_dir")


@dataclass(frozen=True)
class RunConfig:
    """All parameters of a census-to-analysis run."""

    n_sites: int = 6
    n_samples: int = 100000
    efficiency_threshold: float = 0.9
    similarity_cutoff: float = 0.0125
    inflation: float = 1.4
    window_multiplier: float = 1.0
    noise_model: str = "haken_strobl"
    noise_rate: float = 1.32
    coupling_cm: float = 100.0
    master_seed: int = 0
    workers: int = 1
    batch_size: int = 10000
    output_dir: str = "exciton-forge-run"
    displacement_trials: int = 1000
    displacement_side: float = 0.05
    displace_terminals: bool = True
    activity_threshold: float = 0.075
    noise_floor: float = 0.005
    mcl_max_iter: int = 200
    mcl_tol: float = 1e-9
    self_loops: bool = False
    layout_iterations: int = 50

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        """Raises ConfigError when any field is out of its valid range."""
        checks = [
            (2 <= self.n_sites <= 255, "n_sites must lie in [2, 255]"),
            (self.n_samples >= 0, "n_samples must be non-negative"),
            (0.0 <= self.efficiency_threshold < 1.0, "efficiency_threshold must lie in [0, 1)"),
            (self.similarity_cutoff > 0.0, "similarity_cutoff must be positive"),
            (self.inflation > 1.0, "inflation must be greater than 1"),
            (self.window_multiplier > 0.0, "window_multiplier must be positive"),
            (self.noise_model in NOISE_MODEL_MAP, f"noise_model must be one of {sorted(NOISE_MODEL_MAP)}"),
            (self.noise_rate >= 0.0, "noise_rate must be non-negative"),
            (self.coupling_cm > 0.0, "coupling_cm must be positive"),
            (0 <= self.master_seed < 2**64, "master_seed must be an unsigned 64-bit integer"),
            (self.workers >= 1 or self.workers == -1, "workers must be >= 1, or -1 for all cores"),
            (self.batch_size >= 1, "batch_size must be positive"),
            (bool(self.output_dir), "output_dir must not be empty"),
            (self.displacement_trials >= 1, "displacement_trials must be positive"),
            (self.displacement_side >= 0.0, "displacement_side must be non-negative"),
            (0.0 < self.activity_threshold < 1.0, "activity_threshold must lie in (0, 1)"),
            (0.0 <= self.noise_floor < 1.0, "noise_floor must lie in [0, 1)"),
            (self.mcl_max_iter >= 1, "mcl_max_iter must be positive"),
            (self.mcl_tol > 0.0, "mcl_tol must be positive"),
            (self.layout_iterations >= 1, "layout_iterations must be positive"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        """
        Builds a RunConfig from a mapping, coercing string values.

        Args:
            data: Field names to values. Strings are converted to the field's type,
                  so values coming straight from the command line are accepted.

        Returns:
            A validated RunConfig.
        """
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError(f"Unknown run configuration keys: {', '.join(unknown)}")
        values = {key: _coerce(key, type(getattr(cls, key)), value) for key, value in data.items()}
        return cls(**values)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def with_overrides(self, overrides: Mapping[str, Any]) -> "RunConfig":
        merged = self.to_dict()
        merged.update(overrides)
        return RunConfig.from_dict(merged)

    def config_hash(self) -> str:
        """SHA-256 over the result-determining fields, in canonical JSON."""
        payload = {k: v for k, v in self.to_dict().items() if k not in _UNHASHED_FIELDS}
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    @property
    def output_path(self) -> Path:
        return Path(self.output_dir)


def _coerce(key: str, kind: type, value: Any) -> Any:
    if not isinstance(value, str) or kind is str:
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            return float(value)
        return value
    try:
        if kind is bool:
            lowered = value.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind is int:
            return int(value, 0)
        return kind(value)
    except ValueError:
        raise ConfigError(f"Invalid value '{value}' for '{key}' (expected {kind.__name__})") from None


def get_config_path(local: bool = False) -> Path:
    """
    File holding the stored run parameters.

    The project file wins over the per-user one as soon as it exists;
    `local` always selects the project file, e.g. before the first
    `config set --local` creates it.
    """
    if local:
        return LOCAL_CONFIG_FILE

    if LOCAL_CONFIG_FILE.exists():
        return LOCAL_CONFIG_FILE

    return GLOBAL_CONFIG_FILE


def get_config() -> Tuple[Dict[str, Any], Path]:
    """
    Stored run parameters from the active file (see `get_config_path`).

    Returns:
        (contents, path); the contents are empty when no file exists yet.
    """
    config_path = get_config_path()
    if not config_path.exists():
        return {}, config_path
    return get_config_from_path(config_path)


def get_config_from_path(path: Path) -> Tuple[Dict[str, Any], Path]:
    """Raw contents of one run-parameter file; missing or unreadable files read as empty."""
    if not path.exists():
        return {}, path

    try:
        with open(path, "r") as f:
            return json.load(f), path
    except (json.JSONDecodeError, IOError):
        logger.warning("Could not read or parse config file at %s. Using empty config.", path)
        return {}, path


def save_config(config_data: Dict[str, Any], local: bool = False):
    """
    Writes the whole file, `run` section included, to the project file
    (`local`) or the per-user file. Values are written as given; callers
    validate them through RunConfig first.
    """
    config_path = LOCAL_CONFIG_FILE if local else GLOBAL_CONFIG_FILE

    try:
        config_path.parent.mkdir(parents=True, exist_ok=True)
        with open(config_path, "w") as f:
            json.dump(config_data, f, indent=4, sort_keys=True)
    except IOError as e:
        raise ConfigError(f"Could not save config file to {config_path}. Details: {e}") from e


def set_run_value(key: str, value: Any, local: bool = False) -> RunConfig:
    """
    Validates and persists a single run parameter.

    Args:
        key: A RunConfig field name.
        value: The new value; strings are coerced to the field's type.
        local: If True, modifies the local configuration.

    Returns:
        The RunConfig as stored in the target file after the update.
    """
    # Read the specific target file, not the merged view.
    config_data, _ = get_config_from_path(get_config_path(local=local))
    run_section = dict(config_data.get("run", {}))
    run_section[key] = value
    updated = RunConfig.from_dict(run_section)

    config_data["run"] = {k: getattr(updated, k) for k in run_section}
    save_config(config_data, local=local)
    logger.info("Set run parameter %s=%r in the %s config.", key, getattr(updated, key), "local" if local else "global")
    return updated


def unset_run_value(key: str, local: bool = False) -> bool:
    """Removes a stored run parameter so the default applies again."""
    config_data, _ = get_config_from_path(get_config_path(local=local))
    run_section = config_data.get("run", {})
    if key not in run_section:
        return False
    del run_section[key]
    save_config(config_data, local=local)
    return True


def get_run_config(overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """
    Resolves the effective RunConfig: defaults < config file < overrides.

    Args:
        overrides: Values that win over the config file, typically CLI flags.

    Returns:
        A validated RunConfig.
    """
    config_data, _ = get_config()
    merged: Dict[str, Any] = dict(config_data.get("run", {}))
    if overrides:
        merged.update(overrides)
    return RunConfig.from_dict(merged)


def parse_overrides(pairs) -> Dict[str, str]:
    """Turns ``key=value`` strings into a dict, rejecting malformed entries."""
    overrides = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"Override '{pair}' is not of the form key=value")
        overrides[key.strip()] = value.strip()
    return overrides


__all__ = [
    "RunConfig",
    "get_config_path",
    "get_config",
    "get_config_from_path",
    "save_config",
    "set_run_value",
    "unset_run_value",
    "get_run_config",
    "parse_overrides",
]

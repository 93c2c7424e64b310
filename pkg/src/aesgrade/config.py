"""Experiment configuration files (YAML or JSON)."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .llm_client import BackendConfig, ConfigError

ARCHITECTURES = ("single", "multi")
SHOT_MODES = ("zero", "few")
_PATH_KEYS = ("test_set", "calibration", "rubric", "templates", "run_file")


@dataclass
class ExperimentConfig:
    architecture: str
    shot_mode: str
    test_set: str
    run_file: str
    backend: BackendConfig = field(default_factory=BackendConfig)
    calibration: str | None = None
    rubric: str | None = None
    templates: str | None = None
    seed: int = 0
    concurrency: int = 4
    max_retries: int = 2
    parallel_specialists: bool = True
    retry_failed: bool = False

    @property
    def condition(self) -> tuple[str, str]:
        return self.architecture, self.shot_mode

    def validate(self) -> None:
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"config.architecture: must be one of {ARCHITECTURES}, got {self.architecture!r}")
        if self.shot_mode not in SHOT_MODES:
            raise ConfigError(f"config.shot_mode: must be one of {SHOT_MODES}, got {self.shot_mode!r}")
        if self.shot_mode == "few" and not self.calibration:
            raise ConfigError("config.calibration: required when shot_mode is 'few'")
        if not self.test_set:
            raise ConfigError("config.test_set: required")
        if not self.run_file:
            raise ConfigError("config.run_file: required")
        if not isinstance(self.concurrency, int) or self.concurrency < 1:
            raise ConfigError(f"config.concurrency: must be an integer >= 1, got {self.concurrency!r}")
        if not isinstance(self.max_retries, int) or self.max_retries < 0:
            raise ConfigError(f"config.max_retries: must be an integer >= 0, got {self.max_retries!r}")
        if not isinstance(self.seed, int):
            raise ConfigError(f"config.seed: must be an integer, got {self.seed!r}")
        self.backend.validate()

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], base_dir: Path | None = None) -> "ExperimentConfig":
        data = dict(data)
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"config: unknown key(s) {', '.join(sorted(unknown))}")
        for required in ("architecture", "shot_mode", "test_set", "run_file"):
            if data.get(required) in (None, ""):
                raise ConfigError(f"config.{required}: required")
        backend = data.pop("backend", None) or {}
        if not isinstance(backend, Mapping):
            raise ConfigError("config.backend: must be a mapping")
        if base_dir is not None:
            for key in _PATH_KEYS:
                val = data.get(key)
                if val and not Path(val).is_absolute():
                    data[key] = str((base_dir / val).resolve())
        cfg = cls(backend=BackendConfig.from_dict(backend, base_dir), **data)
        cfg.validate()
        return cfg


def load_config(path: str | Path, overrides: Mapping[str, Any] | None = None) -> ExperimentConfig:
    """Read a config file; ``overrides`` (e.g. from CLI flags) win over file keys.

    Relative paths inside the file resolve against the file's directory.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML/JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key.startswith("backend."):
            data.setdefault("backend", {})[key.split(".", 1)[1]] = value
        else:
            data[key] = value
    return ExperimentConfig.from_dict(data, base_dir=path.parent.resolve())

"""Layered TOML configuration with typed, validated run settings.

Resolution order (later layers win):

1. ``config/global.toml`` at the repository root (``[logging]`` table)
2. the run file, flat ``key = value`` pairs plus an optional ``[logging]`` table
3. environment variables prefixed ``DIFFKG_`` (``DIFFKG_EPOCHS=3``,
   ``DIFFKG_LOGGING__LEVEL=DEBUG``)
4. ``--set key=value`` command-line overrides

Short aliases (``T``, ``T_prime``, ``s``, ``tau``, ``k``, ``d``, ``L``, ``N``)
are accepted on every layer.
"""

from __future__ import annotations

import json
import os
import sys
from collections.abc import Iterable, Mapping
from pathlib import Path
from typing import Any, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - Python 3.10 fallback with the same API
    import tomli as tomllib

ENV_PREFIX = "DIFFKG_"

ALIASES: dict[str, str] = {
    "T": "steps",
    "T_prime": "inference_steps",
    "s": "noise_scale",
    "tau": "temperature",
    "k": "topk",
    "d": "dim",
    "L": "n_layers",
    "N": "cutoff",
}
_ALIASES_FOLDED = {alias.lower(): target for alias, target in ALIASES.items()}


class ConfigError(ValueError):
    """Raised when configuration cannot be parsed or fails validation."""


# ---------------------------------------------------------------------------
# Typed config objects
# ---------------------------------------------------------------------------


class LoggingConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    level: str = "INFO"
    format: str = "json"

    @field_validator("level")
    @classmethod
    def level_valid(cls, v: str) -> str:
        valid = {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}
        upper = v.upper()
        if upper not in valid:
            raise ValueError(f"level must be one of {sorted(valid)}, got {v!r}")
        return upper

    @field_validator("format")
    @classmethod
    def format_valid(cls, v: str) -> str:
        valid = {"json", "text"}
        lower = v.lower()
        if lower not in valid:
            raise ValueError(f"format must be one of {sorted(valid)}, got {v!r}")
        return lower


class GlobalConfig(BaseModel):
    logging: LoggingConfig = LoggingConfig()


class HyperParams(BaseModel):
    """Model and optimisation settings.

    Defaults for the loss weights, learning rates, batch sizes and epoch count
    are repository choices, not published values.
    """

    model_config = ConfigDict(extra="forbid")

    # loss weights
    lambda0: float = 0.5
    lambda1: float = 1.0
    lambda2: float = 1e-4
    temperature: float = 1.0

    # architecture
    dim: int = 64
    n_layers: int = 2
    kg_depth: int = 1
    kg_dropout: float = 0.5
    out_dropout: float = 0.1
    leaky_slope: float = 0.2
    denoiser_hidden: int = 1024
    step_embedding_dim: int = 10

    # diffusion
    steps: int = 5
    inference_steps: int = 0
    noise_scale: float = 0.1
    noise_min: float = 1e-4
    noise_max: float = 1e-2
    topk: int = 10

    # optimisation
    rec_lr: float = 1e-3
    diffusion_lr: float = 1e-3
    batch_size: int = 1024
    diffusion_batch_size: int = 256
    epochs: int = 50
    cutoff: int = 20
    seed: int = 2024

    # ablations
    disable_cl: bool = False
    disable_dm: bool = False
    disable_ckgc: bool = False

    @field_validator("lambda0")
    @classmethod
    def lambda0_in_unit_interval(cls, v: float) -> float:
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"lambda0 must be in [0, 1], got {v}")
        return v

    @field_validator("lambda1", "lambda2", "leaky_slope")
    @classmethod
    def non_negative(cls, v: float) -> float:
        if v < 0:
            raise ValueError(f"must be >= 0, got {v}")
        return v

    @field_validator("temperature", "rec_lr", "diffusion_lr")
    @classmethod
    def positive_float(cls, v: float) -> float:
        if v <= 0:
            raise ValueError(f"must be > 0, got {v}")
        return v

    @field_validator(
        "dim",
        "denoiser_hidden",
        "step_embedding_dim",
        "steps",
        "topk",
        "batch_size",
        "diffusion_batch_size",
        "cutoff",
    )
    @classmethod
    def positive_int(cls, v: int) -> int:
        if v < 1:
            raise ValueError(f"must be >= 1, got {v}")
        return v

    @field_validator("n_layers", "kg_depth", "inference_steps", "epochs")
    @classmethod
    def non_negative_int(cls, v: int) -> int:
        if v < 0:
            raise ValueError(f"must be >= 0, got {v}")
        return v

    @field_validator("kg_dropout", "out_dropout")
    @classmethod
    def dropout_rate(cls, v: float) -> float:
        if not 0.0 <= v < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {v}")
        return v

    @field_validator("noise_scale")
    @classmethod
    def scale_in_range(cls, v: float) -> float:
        if not 0.0 < v <= 1.0:
            raise ValueError(f"noise_scale must be in (0, 1], got {v}")
        return v

    @field_validator("noise_min", "noise_max")
    @classmethod
    def bound_in_range(cls, v: float) -> float:
        if not 0.0 < v < 1.0:
            raise ValueError(f"noise bound must be in (0, 1), got {v}")
        return v

    @model_validator(mode="after")
    def cross_field_bounds(self) -> HyperParams:
        if self.inference_steps > self.steps:
            raise ValueError(
                f"inference_steps must be <= steps ({self.steps}), got {self.inference_steps}"
            )
        if self.noise_min >= self.noise_max:
            raise ValueError(
                f"noise_min must be < noise_max, got {self.noise_min} >= {self.noise_max}"
            )
        return self


class RunConfig(HyperParams):
    """Everything one command needs: hyperparameters, paths and data knobs."""

    precision: int = 32
    data_dir: Path = Path("data")
    output_dir: Path = Path("runs/default")
    interactions_path: Path | None = None
    triplets_path: Path | None = None
    checkpoint_path: Path | None = None

    kcore: int = 10
    test_ratio: float = 0.2
    noise_ratio: float = 0.0
    eval_every: int = 1
    n_groups: int = 5
    synth_kind: Literal["communities", "planted"] = "communities"

    logging: LoggingConfig = LoggingConfig()

    @field_validator("precision")
    @classmethod
    def precision_valid(cls, v: int) -> int:
        if v not in (32, 64):
            raise ValueError(f"precision must be 32 or 64, got {v}")
        return v

    @field_validator("kcore", "eval_every", "n_groups")
    @classmethod
    def positive_count(cls, v: int) -> int:
        if v < 1:
            raise ValueError(f"must be >= 1, got {v}")
        return v

    @field_validator("test_ratio")
    @classmethod
    def ratio_in_range(cls, v: float) -> float:
        if not 0.0 < v < 1.0:
            raise ValueError(f"test_ratio must be in (0, 1), got {v}")
        return v

    @field_validator("noise_ratio")
    @classmethod
    def noise_ratio_non_negative(cls, v: float) -> float:
        if v < 0:
            raise ValueError(f"noise_ratio must be >= 0, got {v}")
        return v

    @property
    def dtype(self) -> type[np.floating]:
        return np.float64 if self.precision == 64 else np.float32

    @property
    def resolved_checkpoint(self) -> Path:
        return self.checkpoint_path or self.output_dir / "model.ckpt"


# ---------------------------------------------------------------------------
# Loader
# ---------------------------------------------------------------------------


def _load_toml(path: Path) -> dict[str, Any]:
    """Load a TOML file and return its contents as a dict."""
    try:
        with path.open("rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _deep_merge(base: dict[str, Any], override: dict[str, Any]) -> dict[str, Any]:
    """Recursively merge *override* into *base*, returning a new dict."""
    result: dict[str, Any] = dict(base)
    for key, value in override.items():
        if key in result and isinstance(result[key], dict) and isinstance(value, dict):
            result[key] = _deep_merge(result[key], value)
        else:
            result[key] = value
    return result


def _canonical(key: str) -> str:
    if key in ALIASES:
        return ALIASES[key]
    return _ALIASES_FOLDED.get(key.lower(), key)


def _resolve_aliases(raw: Mapping[str, Any]) -> dict[str, Any]:
    return {_canonical(key): value for key, value in raw.items()}


def _parse_value(text: str) -> Any:
    """Read a TOML scalar, falling back to the raw text for bare strings."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def _nest(key: str, value: Any) -> dict[str, Any]:
    head, _, rest = key.partition(".")
    if rest:
        return {head: _nest(rest, value)}
    return {_canonical(head): value}


def parse_overrides(pairs: Iterable[str]) -> dict[str, Any]:
    """Turn ``key=value`` strings into a nested dict; dotted keys nest."""
    result: dict[str, Any] = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"override must look like key=value, got {pair!r}")
        result = _deep_merge(result, _nest(key, _parse_value(value.strip())))
    return result


def _env_overrides(environ: Mapping[str, str]) -> dict[str, Any]:
    result: dict[str, Any] = {}
    for name, value in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):].replace("__", ".")
        if not key:
            continue
        # Names are case-insensitive; field names are lower case.
        if key not in ALIASES:
            key = key.lower()
        result = _deep_merge(result, _nest(key, _parse_value(value)))
    return result


def _format_validation_error(exc: ValidationError) -> str:
    messages = []
    for error in exc.errors():
        key = ".".join(str(part) for part in error["loc"]) or "config"
        if error["type"] == "extra_forbidden":
            messages.append(f"unknown key {key!r}")
        else:
            messages.append(f"{key}: {error['msg']}")
    return "; ".join(messages)


def _default_global_path() -> Path:
    repo_root = Path(__file__).resolve().parent.parent
    return repo_root / "config" / "global.toml"


def load_global_config(global_path: Path | str | None = None) -> GlobalConfig:
    """Load and validate the global configuration file.

    A missing file is treated as an empty config (all defaults apply).
    """
    global_path = Path(global_path) if global_path is not None else _default_global_path()
    raw: dict[str, Any] = _load_toml(global_path) if global_path.exists() else {}
    try:
        return GlobalConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"{global_path}: {_format_validation_error(exc)}") from exc


def load_run_config(
    path: Path | str | None = None,
    overrides: Iterable[str] = (),
    environ: Mapping[str, str] | None = None,
    global_path: Path | str | None = None,
) -> RunConfig:
    """Resolve a :class:`RunConfig` from every configuration layer.

    Raises:
        FileNotFoundError: if *path* is given and does not exist.
        ConfigError: on TOML syntax errors, unknown keys, type mismatches or
            out-of-range values; the message names the offending key.
    """
    merged: dict[str, Any] = load_global_config(global_path).model_dump()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Run config not found: {path}")
        merged = _deep_merge(merged, _resolve_aliases(_load_toml(path)))
    merged = _deep_merge(merged, _env_overrides(os.environ if environ is None else environ))
    merged = _deep_merge(merged, parse_overrides(overrides))
    try:
        return RunConfig.model_validate(merged)
    except ValidationError as exc:
        raise ConfigError(_format_validation_error(exc)) from exc


def _toml_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    return json.dumps(str(value))


def write_resolved_config(cfg: RunConfig, path: Path | str) -> Path:
    """Write *cfg* as a run file that :func:`load_run_config` reads back unchanged."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for key, value in cfg.model_dump(exclude={"logging"}).items():
        if value is None:
            continue
        lines.append(f"{key} = {_toml_value(value)}")
    lines.append("")
    lines.append("[logging]")
    for key, value in cfg.logging.model_dump().items():
        lines.append(f"{key} = {_toml_value(value)}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path

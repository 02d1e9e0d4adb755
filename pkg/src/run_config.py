"""
Run configuration: an INI file of ``[section]`` headers and ``key = value``
lines, one pydantic model per section.

    [run]          seed, output and corpus directories, fine-tuning switch
    [corpus]       synthetic corpus shape
    [mfcc]         MFCC front-end
    [cpc]          encoder geometry and pre-training
    [classifier]   downstream geometry and training
    [federation]   clients, rounds, local epochs
    [transport]    inprocess or tcp, address and timeouts

List values are comma-separated. Unknown sections or keys are errors.
The resolved configuration is written back next to every run's outputs.
"""

from __future__ import annotations

import configparser
import typing
from collections.abc import Mapping
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError
from returns.result import Failure, Result, Success

from .classifiers import ClassifierConfig
from .cpc import CpcConfig
from .dsp_features import MfccConfig
from .error_handler import ArtifactIOError, ConfigError, FedCPCError
from .federation import FederationPlan
from .logging_config import get_logger
from .settings import get_seed_override, settings
from .synth_corpus import CorpusSpec

logger = get_logger(__name__)

RESOLVED_NAME = "config.resolved.ini"


class RunSection(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    seed: int = Field(default=0, ge=0)
    output_dir: str = "runs/fedcpc"
    corpus_dir: str = "corpus"
    finetune: bool = True


class TransportConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["inprocess", "tcp"] = "inprocess"
    host: str = Field(default_factory=lambda: settings.FEDCPC_HOST)
    port: int = Field(default_factory=lambda: settings.FEDCPC_PORT, ge=0, le=65535)
    round_timeout_s: float = Field(default_factory=lambda: settings.FEDCPC_ROUND_TIMEOUT_S, gt=0)
    connect_timeout_s: float = Field(default_factory=lambda: settings.FEDCPC_CONNECT_TIMEOUT_S, gt=0)


class RunConfig(BaseModel):
    """Everything a run needs; defaults follow the published experimental settings."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    run: RunSection = Field(default_factory=RunSection)
    corpus: CorpusSpec = Field(default_factory=CorpusSpec)
    mfcc: MfccConfig = Field(default_factory=MfccConfig)
    cpc: CpcConfig = Field(default_factory=CpcConfig)
    classifier: ClassifierConfig = Field(default_factory=ClassifierConfig)
    federation: FederationPlan = Field(default_factory=FederationPlan)
    transport: TransportConfig = Field(default_factory=TransportConfig)

    @property
    def seed(self) -> int:
        return self.run.seed

    @property
    def output_dir(self) -> Path:
        return Path(self.run.output_dir)

    @property
    def corpus_dir(self) -> Path:
        return Path(self.run.corpus_dir)

    def with_overrides(self, overrides: Mapping[str, Mapping[str, Any]]) -> RunConfig:
        """Apply ``{section: {key: value}}`` (CLI flags); ``None`` values are skipped."""
        data = self.model_dump()
        for section, values in overrides.items():
            if section not in data:
                raise ConfigError(f"unknown config section [{section}]", section=section)
            for key, value in values.items():
                if value is None:
                    continue
                if key not in data[section]:
                    raise ConfigError(f"unknown key {key!r} in [{section}]", section=section, key=key)
                data[section][key] = value
        return _validate(data)


SECTIONS: dict[str, type[BaseModel]] = {
    name: typing.cast(type[BaseModel], field.annotation)
    for name, field in RunConfig.model_fields.items()
}


def _is_sequence_field(model: type[BaseModel], key: str) -> bool:
    origin = typing.get_origin(model.model_fields[key].annotation)
    return origin in (list, tuple)


def _parse_value(model: type[BaseModel], key: str, raw: str) -> Any:
    raw = raw.strip()
    if _is_sequence_field(model, key):
        return [item.strip() for item in raw.split(",") if item.strip()]
    if raw.lower() in ("none", ""):
        return None
    return raw


def _validate(data: Mapping[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(part) for part in first["loc"])
        raise ConfigError(f"invalid config value {where}: {first['msg']}", errors=e.error_count()) from e


def parse_run_config(text: str, source: str = "<string>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # type: ignore[assignment,method-assign]
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"cannot parse {source}: {e}") from e

    data: dict[str, dict[str, Any]] = {}
    for section in parser.sections():
        model = SECTIONS.get(section)
        if model is None:
            raise ConfigError(f"unknown config section [{section}] in {source}", section=section)
        values: dict[str, Any] = {}
        for key, raw in parser.items(section):
            if key not in model.model_fields:
                raise ConfigError(
                    f"unknown key {key!r} in [{section}] of {source}", section=section, key=key
                )
            values[key] = _parse_value(model, key, raw)
        data[section] = {k: v for k, v in values.items() if v is not None}
    return _validate(data)


def apply_seed_override(config: RunConfig) -> RunConfig:
    """FEDCPC_SEED, when set, replaces ``[run] seed``."""
    seed = get_seed_override()
    if seed is None or seed == config.run.seed:
        return config
    logger.info("seed_overridden", config_seed=config.run.seed, seed=seed)
    return config.with_overrides({"run": {"seed": seed}})


def load_run_config(path: Path | None) -> Result[RunConfig, FedCPCError]:
    """Read and validate a run config; no path means all defaults."""
    try:
        if path is None:
            return Success(apply_seed_override(RunConfig()))
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise ArtifactIOError(f"cannot read config {path}: {e}", str(path)) from e
        return Success(apply_seed_override(parse_run_config(text, str(path))))
    except FedCPCError as e:
        return Failure(e)


def _format_value(value: Any) -> str:
    if isinstance(value, (list, tuple)):
        return ", ".join(_format_value(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if hasattr(value, "value"):
        return str(value.value)
    return str(value)


def render_run_config(config: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # type: ignore[assignment,method-assign]
    for section, values in config.model_dump().items():
        parser[section] = {key: _format_value(value) for key, value in values.items()}
    lines: list[str] = []
    for section in parser.sections():
        lines.append(f"[{section}]")
        lines.extend(f"{key} = {value}" for key, value in parser[section].items())
        lines.append("")
    return "\n".join(lines)


def write_resolved_config(config: RunConfig, directory: Path) -> Path:
    path = directory / RESOLVED_NAME
    try:
        directory.mkdir(parents=True, exist_ok=True)
        path.write_text(render_run_config(config), encoding="utf-8")
    except OSError as e:
        raise ArtifactIOError(f"cannot write {path}: {e}", str(path)) from e
    return path

import json
import logging
import os
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt, ValidationError, model_validator

from exceptions import ConfigParseError, ConfigValidationError
from forward import BUILTIN_TOOLS, ToolRegistry
from models import (
    DEFAULT_BATCH_SIZE,
    DEFAULT_EVAL_TIME,
    DEFAULT_MAX_CONCURRENCY,
    DEFAULT_MODEL,
    DEFAULT_SEED,
    DEFAULT_STEPS,
    DEFAULT_TAU,
    DEFAULT_TEST_REPEATS,
    DEFAULT_UPDATE_FREQ,
    OPTIMIZER_MAX_TOKENS,
    OPTIMIZER_TEMPERATURE,
    PROJECTOR_TEMPERATURE,
    RETRIEVAL_TOP_K,
    BackendKind,
    RoutingMode,
    SchedulerStrategy,
    TruncationPolicy,
)
from trainer import TrainConfig

logger = logging.getLogger(__name__)

LOG_LEVEL_ENV = "RESGRAD_LOG_LEVEL"
SCHEMA_VERSION = 1

# Sandboxed execution limits (recorded only; no executor ships with resgrad)
SANDBOX_LIMITS = {
    "max_as_limit_kb": 300,
    "max_data_limit_kb": 300,
    "max_stack_limit_kb": 300,
    "min_time_limit_s": 2,
    "gt_time_limit_s": 5,
}


def configure_logging(level=None):
    level = (level or os.environ.get(LOG_LEVEL_ENV, "INFO")).upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TrainSettings(_Section):
    steps: PositiveInt = DEFAULT_STEPS
    batch_size: PositiveInt = DEFAULT_BATCH_SIZE
    update_freq: PositiveInt = DEFAULT_UPDATE_FREQ
    eval_time: PositiveInt = DEFAULT_EVAL_TIME
    test_repeats: PositiveInt = DEFAULT_TEST_REPEATS
    max_concurrency: PositiveInt = DEFAULT_MAX_CONCURRENCY
    seed: int = DEFAULT_SEED


class TruncationSettings(_Section):
    caps: dict[str, PositiveInt] = Field(default_factory=dict)
    top_k: PositiveInt = RETRIEVAL_TOP_K


class BackendSettings(_Section):
    kind: BackendKind = BackendKind.SCRIPTED
    base_url: Optional[str] = None
    model: str = DEFAULT_MODEL
    script_path: Optional[Path] = None
    timeout: PositiveFloat = 60.0
    max_attempts: PositiveInt = 3
    base_backoff: float = Field(1.0, ge=0)

    @model_validator(mode="after")
    def _script_for_scripted(self):
        if self.kind is BackendKind.SCRIPTED and self.script_path is None:
            raise ValueError("scripted backends need a script_path")
        return self


class BackendsSettings(_Section):
    forward: BackendSettings
    projector: BackendSettings
    optimizer: BackendSettings


class SchedulerSettings(_Section):
    strategy: SchedulerStrategy = SchedulerStrategy.DENSITY_BOLTZMANN
    tau: PositiveFloat = DEFAULT_TAU


class ProjectorSettings(_Section):
    temperature: float = Field(PROJECTOR_TEMPERATURE, ge=0, le=2)
    routing: RoutingMode = RoutingMode.ROUTED


class OptimizerSettings(_Section):
    temperature: float = Field(OPTIMIZER_TEMPERATURE, ge=0, le=2)
    max_new_tokens: PositiveInt = OPTIMIZER_MAX_TOKENS


class RunConfig(_Section):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    schema_version: Literal[1] = Field(SCHEMA_VERSION, alias="schema")
    graph: Path
    train: Path
    dev: Optional[Path] = None
    test: Optional[Path] = None
    training: TrainSettings = Field(default_factory=TrainSettings)
    truncation: TruncationSettings = Field(default_factory=TruncationSettings)
    backends: BackendsSettings
    scheduler: SchedulerSettings = Field(default_factory=SchedulerSettings)
    projector: ProjectorSettings = Field(default_factory=ProjectorSettings)
    optimizer: OptimizerSettings = Field(default_factory=OptimizerSettings)
    tools: dict[str, str] = Field(default_factory=dict)
    output_dir: Path = Path("runs/latest")

    def train_config(self):
        return TrainConfig(
            steps=self.training.steps,
            batch_size=self.training.batch_size,
            update_freq=self.training.update_freq,
            eval_time=self.training.eval_time,
            test_repeats=self.training.test_repeats,
            max_concurrency=self.training.max_concurrency,
            seed=self.training.seed,
            strategy=self.scheduler.strategy,
            tau=self.scheduler.tau,
            projector_model=self.backends.projector.model,
            projector_temperature=self.projector.temperature,
            routing=self.projector.routing,
            optimizer_model=self.backends.optimizer.model,
            optimizer_temperature=self.optimizer.temperature,
            optimizer_max_tokens=self.optimizer.max_new_tokens,
        )

    def truncation_policy(self):
        return TruncationPolicy(caps=dict(self.truncation.caps), top_k=self.truncation.top_k)

    def tool_registry(self):
        registry = ToolRegistry()
        for component_id, name in self.tools.items():
            registry.register_builtin(component_id, name)
        return registry

    def backend_settings(self):
        return self.backends.forward, self.backends.projector, self.backends.optimizer


def _resolve(base, path):
    if path is None:
        return None
    path = Path(path)
    return path if path.is_absolute() else (base / path).resolve()


def _resolve_paths(config, base):
    updates = {
        "graph": _resolve(base, config.graph),
        "train": _resolve(base, config.train),
        "dev": _resolve(base, config.dev),
        "test": _resolve(base, config.test),
        "output_dir": _resolve(base, config.output_dir),
    }
    backends = {}
    for role in ("forward", "projector", "optimizer"):
        settings = getattr(config.backends, role)
        backends[role] = settings.model_copy(update={"script_path": _resolve(base, settings.script_path)})
    updates["backends"] = config.backends.model_copy(update=backends)
    return config.model_copy(update=updates)


def _missing_files(config):
    violations = []
    for name in ("graph", "train", "dev", "test"):
        path = getattr(config, name)
        if path is not None and not path.is_file():
            violations.append(f"{name}: file not found: {path}")
    for role, settings in zip(("forward", "projector", "optimizer"), config.backend_settings()):
        if settings.script_path is not None and not settings.script_path.is_file():
            violations.append(f"backends.{role}.script_path: file not found: {settings.script_path}")
    for component_id, name in config.tools.items():
        if name not in BUILTIN_TOOLS:
            violations.append(f"tools.{component_id}: unknown builtin tool '{name}'")
    return violations


def load_config(path):
    """Parse, validate and resolve a run configuration; defaults come from the shipped tables"""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigParseError(path, f"cannot read config: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigParseError(path, e.msg, e.lineno, e.colno) from e

    try:
        config = RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigValidationError(
            f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}" for err in e.errors()
        ) from e

    config = _resolve_paths(config, path.resolve().parent)
    violations = _missing_files(config)
    if violations:
        raise ConfigValidationError(violations)
    logger.info(f"Loaded config {path} (strategy={config.scheduler.strategy.value}, "
                f"steps={config.training.steps})")
    return config


def config_to_dict(config):
    return config.model_dump(mode="json", by_alias=True)


def save_config(config, path):
    Path(path).write_text(json.dumps(config_to_dict(config), indent=2) + "\n", encoding="utf-8")

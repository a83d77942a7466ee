from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterator, Optional

from exceptions import UnknownComponent

INPUT_NODE_ID = "__input__"
DEFAULT_MODEL = "gpt-4o-mini"

# Shipped defaults for the optimization loop and decoding
DEFAULT_STEPS = 100
DEFAULT_BATCH_SIZE = 8
DEFAULT_UPDATE_FREQ = 1
DEFAULT_EVAL_TIME = 3
DEFAULT_TEST_REPEATS = 3
DEFAULT_MAX_CONCURRENCY = 20
DEFAULT_SEED = 42
DEFAULT_TAU = 1.0
PROJECTOR_TEMPERATURE = 0.4
OPTIMIZER_TEMPERATURE = 0.7
OPTIMIZER_MAX_TOKENS = 512
RETRIEVAL_TOP_K = 20


class Metric(Enum):
    EXACT_MATCH = "exact_match"
    F1 = "f1"


class UpstreamKind(Enum):
    STOP = "stop"
    FEEDBACK = "feedback"


class FaultClass(Enum):
    PURE_LOCAL = "pure_local"
    PURE_UPSTREAM = "pure_upstream"
    MIXED = "mixed"
    # LOCAL empty together with STOP_GRADIENT: nothing actionable anywhere
    NONE = "none"


class RoutingMode(Enum):
    ROUTED = "routed"
    # every projector output travels upstream; STOP_GRADIENT is ignored
    UNROUTED = "unrouted"


class SchedulerStrategy(Enum):
    DENSITY_BOLTZMANN = "density_boltzmann"
    RANDOM = "random"
    ROUND_ROBIN = "round_robin"
    GREEDY = "greedy"


class BackendKind(Enum):
    SCRIPTED = "scripted"
    HTTP = "http"


class StepAction(Enum):
    UPDATE = "update"
    NO_OP = "no_op"
    EMPTY_BUFFER = "empty_buffer"
    TAGS_NOT_FOUND = "tags_not_found"
    OPTIMIZER_FAILED = "optimizer_failed"
    SKIPPED = "skipped"


class Context(Mapping):
    """Immutable ordered record of named text fields (the semantic state h)"""

    __slots__ = ("_entries",)

    def __init__(self, entries=None, **fields):
        data = {}
        if entries is not None:
            items = entries.items() if isinstance(entries, Mapping) else entries
            for key, value in items:
                data[str(key)] = str(value)
        for key, value in fields.items():
            data[key] = str(value)
        self._entries = data

    def __getitem__(self, key):
        return self._entries[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def __eq__(self, other):
        if isinstance(other, Context):
            return list(self._entries.items()) == list(other._entries.items())
        if isinstance(other, Mapping):
            return list(self._entries.items()) == list(other.items())
        return NotImplemented

    def __hash__(self):
        return hash(tuple(self._entries.items()))

    def __repr__(self):
        return f"Context({self._entries!r})"

    def restrict(self, keys) -> "Context":
        """Sub-record of the given keys, kept in this context's order"""
        wanted = set(keys)
        return Context((k, v) for k, v in self._entries.items() if k in wanted)

    def to_dict(self) -> dict:
        return dict(self._entries)


@dataclass(frozen=True)
class DecodingConfig:
    temperature: float = 0.0
    max_new_tokens: int = 1024


@dataclass(frozen=True)
class ComponentSpec:
    id: str
    role_description: str
    prompt_text: str
    input_fields: tuple[str, ...]
    output_fields: tuple[str, ...]
    optimizable: bool = True
    is_tool: bool = False
    decoding: DecodingConfig = field(default_factory=DecodingConfig)
    model: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "input_fields", tuple(self.input_fields))
        object.__setattr__(self, "output_fields", tuple(self.output_fields))

    def with_prompt(self, prompt_text: str) -> "ComponentSpec":
        return replace(self, prompt_text=prompt_text)


@dataclass(frozen=True)
class Graph:
    """Components in execution order; edges follow from field production and consumption"""

    task_fields: tuple[str, ...]
    components: tuple[ComponentSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "task_fields", tuple(self.task_fields))
        object.__setattr__(self, "components", tuple(self.components))

    @property
    def ids(self) -> list[str]:
        return [c.id for c in self.components]

    def component(self, component_id: str) -> ComponentSpec:
        for comp in self.components:
            if comp.id == component_id:
                return comp
        raise UnknownComponent(component_id)

    def optimizable_ids(self) -> list[str]:
        return [c.id for c in self.components if c.optimizable and not c.is_tool]

    def prompts(self) -> dict[str, str]:
        return {c.id: c.prompt_text for c in self.components if c.optimizable and not c.is_tool}

    def with_prompt(self, component_id: str, prompt_text: str) -> "Graph":
        self.component(component_id)
        comps = tuple(
            c.with_prompt(prompt_text) if c.id == component_id else c for c in self.components
        )
        return replace(self, components=comps)

    def with_prompts(self, prompts: Mapping[str, str]) -> "Graph":
        graph = self
        for component_id, text in prompts.items():
            graph = graph.with_prompt(component_id, text)
        return graph


@dataclass(frozen=True)
class Violation:
    kind: str
    message: str
    component_id: Optional[str] = None
    field_name: Optional[str] = None


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def kinds(self) -> list[str]:
        return [v.kind for v in self.violations]

    def __bool__(self):
        return self.ok


@dataclass(frozen=True)
class TokenUsage:
    prompt_tokens: int = 0
    completion_tokens: int = 0

    @property
    def total(self) -> int:
        return self.prompt_tokens + self.completion_tokens

    def __add__(self, other: "TokenUsage") -> "TokenUsage":
        return TokenUsage(
            self.prompt_tokens + other.prompt_tokens,
            self.completion_tokens + other.completion_tokens,
        )


@dataclass(frozen=True)
class ChatRequest:
    system: str
    user: str
    temperature: float = 0.0
    max_new_tokens: int = 1024
    model: str = ""


@dataclass(frozen=True)
class ChatResponse:
    text: str
    usage: TokenUsage = field(default_factory=TokenUsage)


@dataclass(frozen=True)
class TruncationPolicy:
    caps: Mapping[str, int] = field(default_factory=dict)
    top_k: int = RETRIEVAL_TOP_K

    def cap_for(self, field_name: str) -> Optional[int]:
        return self.caps.get(field_name)


@dataclass(frozen=True)
class TrajectoryEntry:
    component_id: str
    input_slice: Context
    output: Context
    token_usage: TokenUsage = field(default_factory=TokenUsage)
    request: Optional[ChatRequest] = None


@dataclass(frozen=True)
class Trajectory:
    task_input: Context
    entries: tuple[TrajectoryEntry, ...]
    final_context: Context

    def entry(self, component_id: str) -> Optional[TrajectoryEntry]:
        for item in self.entries:
            if item.component_id == component_id:
                return item
        return None

    def component_ids(self) -> list[str]:
        return [e.component_id for e in self.entries]


@dataclass(frozen=True)
class GoldSpec:
    field_name: str
    answer: str
    metric: Metric = Metric.EXACT_MATCH
    labels: Optional[tuple[str, ...]] = None


@dataclass(frozen=True)
class Example:
    input: Context
    gold: Optional[GoldSpec] = None


@dataclass(frozen=True)
class ForwardResult:
    final_context: Context
    trajectory: Trajectory
    total_tokens: TokenUsage
    reward: Optional[float] = None


@dataclass(frozen=True)
class ObjectiveFeedback:
    text: str
    source: str = "objective"


@dataclass(frozen=True)
class RoutedFeedback:
    local: Optional[str]
    upstream: UpstreamKind
    upstream_text: Optional[str] = None

    @classmethod
    def pure_local(cls, text: str) -> "RoutedFeedback":
        return cls(local=text, upstream=UpstreamKind.STOP)

    @classmethod
    def pure_upstream(cls, text: str) -> "RoutedFeedback":
        return cls(local=None, upstream=UpstreamKind.FEEDBACK, upstream_text=text)

    @classmethod
    def mixed(cls, local: str, upstream: str) -> "RoutedFeedback":
        return cls(local=local, upstream=UpstreamKind.FEEDBACK, upstream_text=upstream)

    @property
    def stops(self) -> bool:
        return self.upstream is UpstreamKind.STOP

    @property
    def fault_class(self) -> FaultClass:
        if self.local is not None and self.stops:
            return FaultClass.PURE_LOCAL
        if self.local is None and not self.stops:
            return FaultClass.PURE_UPSTREAM
        if self.local is not None:
            return FaultClass.MIXED
        return FaultClass.NONE


@dataclass(frozen=True)
class RoutingRecord:
    step: int
    example: int
    component: str
    local_present: bool
    upstream: UpstreamKind
    feedback_tokens: int = 0
    called_projector: bool = True

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "example": self.example,
            "component": self.component,
            "local_present": self.local_present,
            "upstream": self.upstream.value,
            "feedback_tokens": self.feedback_tokens,
        }


@dataclass(frozen=True)
class LocalCritique:
    component_id: str
    step: int
    example: int
    local_text: str
    context_snippet: str = ""

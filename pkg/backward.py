import logging
import re
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

from exceptions import BackwardError, MissingField, NodeNotFound, UnknownComponent
from graph import consumers, predecessors, producers, topological_order
from models import (
    DEFAULT_MODEL,
    INPUT_NODE_ID,
    PROJECTOR_TEMPERATURE,
    ChatRequest,
    LocalCritique,
    ObjectiveFeedback,
    RoutedFeedback,
    RoutingMode,
    RoutingRecord,
    UpstreamKind,
)
from utils import render_fields, snippet

logger = logging.getLogger(__name__)

PROMPTS_DIR = Path(__file__).resolve().parent / "assets" / "prompts"

PROJECTOR_MAX_TOKENS = 1024
VARIABLE_SHORT_LIMIT = 512
STOP_TOKEN = "STOP_GRADIENT"

_HEADER_RE = re.compile(r"^[\s>#*_`]*(LOCAL|UPSTREAM)[\s*_`]*:[\s*_`]*(.*)$", re.IGNORECASE)
_EDGE_PUNCT = " \t\r\n.,;:!?*_`'\"()[]{}<>"


@lru_cache(maxsize=None)
def load_prompt(name):
    return (PROMPTS_DIR / f"{name}.txt").read_text(encoding="utf-8").rstrip("\n")


def backward_system_prompt():
    return f"{load_prompt('backward_system')}\n\n{load_prompt('backward_routing')}"


def build_backward_prompt(component, entry, incoming, consumer_ids=None, model=DEFAULT_MODEL,
                          temperature=PROJECTOR_TEMPERATURE):
    if entry.component_id != component.id:
        raise ValueError(f"Trajectory entry for '{entry.component_id}' does not belong to '{component.id}'")

    if consumer_ids:
        response_desc = f"input to {', '.join(consumer_ids)}"
    else:
        response_desc = "input to downstream components"

    user = load_prompt("backward_context").format(
        variable_desc=component.role_description,
        system_prompt=component.prompt_text,
        lm_input=render_fields(entry.input_slice),
        lm_output=render_fields(entry.output),
        response_desc=response_desc,
        objective_feedback=incoming.text,
        variable_short=component.prompt_text[:VARIABLE_SHORT_LIMIT],
    )
    return ChatRequest(
        system=backward_system_prompt(),
        user=user,
        temperature=temperature,
        max_new_tokens=PROJECTOR_MAX_TOKENS,
        model=model,
    )


def is_stop_token(text):
    return text.strip(_EDGE_PUNCT).upper() == STOP_TOKEN


def parse_routed(completion):
    """Split a projector completion into LOCAL / UPSTREAM.

    Total over any input: a completion missing either header is treated as
    LOCAL feedback with STOP_GRADIENT upstream.
    """
    if isinstance(completion, (bytes, bytearray)):
        completion = completion.decode("utf-8", errors="replace")

    lines = completion.splitlines()
    headers = {}
    for index, line in enumerate(lines):
        match = _HEADER_RE.match(line)
        if match:
            headers.setdefault(match.group(1).upper(), index)
        if len(headers) == 2:
            break

    if len(headers) < 2:
        text = completion.strip()
        logger.warning("Projector output has no LOCAL/UPSTREAM sections, keeping it local")
        return RoutedFeedback(local=text or None, upstream=UpstreamKind.STOP)

    first, second = sorted(headers.values())

    def section(start, stop):
        head = _HEADER_RE.match(lines[start]).group(2)
        return "\n".join([head] + lines[start + 1:stop]).strip()

    sections = {
        lines_index: section(lines_index, second if lines_index == first else len(lines))
        for lines_index in (first, second)
    }
    local_text = sections[headers["LOCAL"]]
    upstream_text = sections[headers["UPSTREAM"]]

    local = local_text or None
    if not upstream_text or is_stop_token(upstream_text):
        return RoutedFeedback(local=local, upstream=UpstreamKind.STOP)
    return RoutedFeedback(local=local, upstream=UpstreamKind.FEEDBACK, upstream_text=upstream_text)


@dataclass
class DensityEntry:
    rho: int = 0
    t_last: int = 0


class DensityTable:
    """Per-node gradient density: local critiques recorded since the last update"""

    def __init__(self, component_ids):
        self._entries = {cid: DensityEntry() for cid in component_ids}

    @property
    def ids(self):
        return list(self._entries)

    def __contains__(self, component_id):
        return component_id in self._entries

    def _entry(self, component_id):
        if component_id not in self._entries:
            raise UnknownComponent(component_id)
        return self._entries[component_id]

    def rho(self, component_id):
        return self._entry(component_id).rho

    def t_last(self, component_id):
        return self._entry(component_id).t_last

    def increment(self, component_id):
        self._entry(component_id).rho += 1

    def reset(self, component_id, step):
        entry = self._entry(component_id)
        entry.rho = 0
        entry.t_last = step

    def any_positive(self):
        return any(e.rho > 0 for e in self._entries.values())

    def snapshot(self):
        return {cid: e.rho for cid, e in self._entries.items()}


@dataclass(frozen=True)
class BufferEntry:
    step: int
    local_text: str
    context_snippet: str = ""


class FeedbackBuffer:
    def __init__(self, component_ids=()):
        self._entries = {cid: [] for cid in component_ids}

    def append(self, component_id, entry):
        self._entries.setdefault(component_id, []).append(entry)

    def entries(self, component_id):
        return list(self._entries.get(component_id, []))

    def clear(self, component_id):
        self._entries[component_id] = []

    def __len__(self):
        return sum(len(items) for items in self._entries.values())


def record_density(densities, component_id, routed, step):
    """rho += 1 iff the routed feedback carries a LOCAL critique; t_last is untouched"""
    if component_id not in densities:
        raise UnknownComponent(component_id)
    if routed.local is not None:
        densities.increment(component_id)
    return densities


def critique_feedback(final, gold, reward):
    answer = final.get(gold.field_name, "<missing>")
    metric = gold.metric.value if hasattr(gold.metric, "value") else str(gold.metric)
    return ObjectiveFeedback(
        text=f"The final answer {answer} scored {reward:.3f} against gold {gold.answer} under metric {metric}."
    )


@dataclass
class BackwardReport:
    step: int = 0
    example: int = 0
    records: list = field(default_factory=list)
    decisions: list = field(default_factory=list)
    critiques: list = field(default_factory=list)
    received: dict = field(default_factory=dict)
    passed_through: list = field(default_factory=list)
    fan_in: list = field(default_factory=list)
    stop_events: int = 0

    @property
    def feedback_tokens(self):
        return sum(r.feedback_tokens for r in self.records)

    @property
    def projector_calls(self):
        return len(self.records)


def apply_report(report, densities, buffers):
    """Fold one example's routing decisions into the shared tables (single writer)"""
    for component_id, routed in report.decisions:
        if component_id in densities:
            record_density(densities, component_id, routed, report.step)
    for critique in report.critiques:
        buffers.append(
            critique.component_id,
            BufferEntry(critique.step, critique.local_text, critique.context_snippet),
        )


def _objective_node(graph, order, target_field):
    if target_field is None:
        return order[-1]
    producer = producers(graph).get(target_field)
    if producer is None:
        raise MissingField(target_field, "__objective__")
    return producer


def _unrouted_text(routed, incoming_text):
    parts = [text for text in (routed.local, routed.upstream_text) if text]
    return "\n\n".join(parts) if parts else incoming_text


def backward_pass(graph, trajectory, objective, projector, step=0, example=0,
                  densities=None, buffers=None, model=DEFAULT_MODEL, temperature=PROJECTOR_TEMPERATURE,
                  routing=RoutingMode.ROUTED, target_field=None):
    """Reverse-order semantic projection with causal routing.

    LOCAL critiques of optimizable nodes are collected, UPSTREAM feedback
    becomes the incoming signal of the producers, STOP_GRADIENT ends the
    chain and tool nodes pass the incoming signal through unchanged.

    The objective enters at the producer of `target_field` (the last node
    when omitted). Under `RoutingMode.UNROUTED` every node forwards its whole
    projector output upstream and STOP_GRADIENT is ignored.
    """
    routing = RoutingMode(routing)
    order = topological_order(graph)
    report = BackwardReport(step=step, example=example)
    if not order:
        return report

    start = _objective_node(graph, order, target_field)
    if start == INPUT_NODE_ID:
        return report
    pending = {start: [objective.text]}
    sources = {start: objective.source}

    try:
        for component_id in reversed(order):
            texts = pending.pop(component_id, None)
            if not texts:
                continue
            incoming_text = "\n\n".join(dict.fromkeys(texts))
            report.received[component_id] = incoming_text

            component = graph.component(component_id)
            parents = predecessors(graph, component_id)

            if component.is_tool:
                report.passed_through.append(component_id)
                for parent in parents:
                    pending.setdefault(parent, []).append(incoming_text)
                    sources.setdefault(parent, component_id)
                continue

            entry = trajectory.entry(component_id)
            if entry is None:
                raise NodeNotFound(component_id, example)

            incoming = ObjectiveFeedback(incoming_text, sources.get(component_id, "objective"))
            request = build_backward_prompt(
                component, entry, incoming, consumers(graph, component_id), model=model, temperature=temperature
            )
            try:
                response = projector.complete(request)
            except Exception as e:
                raise BackwardError(component_id, e, report) from e

            routed = parse_routed(response.text)
            report.decisions.append((component_id, routed))
            report.records.append(
                RoutingRecord(
                    step=step,
                    example=example,
                    component=component_id,
                    local_present=routed.local is not None,
                    upstream=routed.upstream,
                    feedback_tokens=response.usage.completion_tokens,
                )
            )
            if routed.local is not None and component.optimizable:
                report.critiques.append(
                    LocalCritique(component_id, step, example, routed.local,
                                  snippet(render_fields(entry.input_slice)))
                )

            if routing is RoutingMode.UNROUTED:
                upstream_text = _unrouted_text(routed, incoming_text)
            elif routed.stops:
                report.stop_events += 1
                continue
            else:
                upstream_text = routed.upstream_text

            if len(parents) > 1:
                # same upstream text goes to every parent; no weighting
                report.fan_in.append(component_id)
            for parent in parents:
                pending.setdefault(parent, []).append(upstream_text)
                sources.setdefault(parent, component_id)
    finally:
        if densities is not None and buffers is not None:
            apply_report(report, densities, buffers)

    return report

import logging
import re

from exceptions import ForwardError, MissingField, OutputArityMismatch, ToolNotRegistered
from graph import merge_outputs, project_inputs, topological_order
from models import (
    ChatRequest,
    Context,
    ForwardResult,
    Metric,
    TokenUsage,
    Trajectory,
    TrajectoryEntry,
    TruncationPolicy,
)
from utils import extract_label, normalize_answer, render_fields, strip_code_fences, token_f1, truncate_text

logger = logging.getLogger(__name__)

IDENTITY_PREFIX = "identity_"


def identity_tool(component, inputs, policy):
    """Lossless re-write: copy the single input field to the single output field"""
    if len(component.input_fields) != 1 or len(component.output_fields) != 1:
        raise OutputArityMismatch(component.id, component.output_fields, component.input_fields)
    return {component.output_fields[0]: inputs[component.input_fields[0]]}


BUILTIN_TOOLS = {
    "identity": identity_tool,
}


class ToolRegistry:
    """Tool callbacks keyed by component id: fn(component, inputs, policy) -> {field: text}"""

    def __init__(self, tools=None):
        self._tools = dict(tools or {})

    def register(self, component_id, fn):
        self._tools[component_id] = fn
        return self

    def register_builtin(self, component_id, name):
        if name not in BUILTIN_TOOLS:
            raise ValueError(f"Unknown builtin tool '{name}' (known: {sorted(BUILTIN_TOOLS)})")
        return self.register(component_id, BUILTIN_TOOLS[name])

    def lookup(self, component):
        fn = self._tools.get(component.id)
        if fn is None and component.id.startswith(IDENTITY_PREFIX):
            fn = identity_tool
        if fn is None:
            raise ToolNotRegistered(component.id)
        return fn

    def __contains__(self, component_id):
        return component_id in self._tools


def assemble_prompt(component, inputs):
    """System message is the component prompt; user message renders inputs in declared order"""
    return ChatRequest(
        system=component.prompt_text,
        user=render_fields(inputs, component.input_fields),
        temperature=component.decoding.temperature,
        max_new_tokens=component.decoding.max_new_tokens,
        model=component.model or "",
    )


def split_outputs(component, completion):
    """Multi-output completions carry one `<field>: value` header per declared field"""
    fields = component.output_fields
    header = re.compile(
        r"^\s*(" + "|".join(re.escape(name) for name in fields) + r")\s*:\s?(.*)$"
    )
    values = {}
    current = None
    for line in completion.splitlines():
        match = header.match(line)
        if match and match.group(1) not in values:
            current = match.group(1)
            values[current] = [match.group(2)]
        elif current is not None:
            values[current].append(line)

    if set(values) != set(fields):
        raise OutputArityMismatch(component.id, fields, list(values))
    return {name: "\n".join(values[name]).strip() for name in fields}


def apply_truncation(delta, policy):
    return Context((name, truncate_text(value, policy.cap_for(name))) for name, value in delta.items())


def keep_top_passages(value, policy):
    """Retrieval results arrive as a passage list; only the first top_k are kept"""
    if isinstance(value, (list, tuple)):
        return "\n\n".join(str(passage) for passage in value[:policy.top_k])
    return value


def run_component(component, inputs, backend, policy, tools=None):
    """Run one node on its projected inputs; returns (delta, trajectory entry)"""
    if component.is_tool:
        tools = tools or ToolRegistry()
        raw = dict(tools.lookup(component)(component, inputs, policy))
        if set(raw) != set(component.output_fields):
            raise OutputArityMismatch(component.id, component.output_fields, list(raw))
        kept = Context((name, keep_top_passages(raw[name], policy)) for name in component.output_fields)
        delta = apply_truncation(kept, policy)
        return delta, TrajectoryEntry(component.id, inputs, delta, TokenUsage(), None)

    request = assemble_prompt(component, inputs)
    response = backend.complete(request)
    completion = strip_code_fences(response.text)
    if len(component.output_fields) == 1:
        raw = {component.output_fields[0]: completion}
    else:
        raw = split_outputs(component, completion)
    delta = apply_truncation(Context((name, raw[name]) for name in component.output_fields), policy)
    return delta, TrajectoryEntry(component.id, inputs, delta, response.usage, request)


def run_forward(graph, task_input, backend, policy=None, gold=None, tools=None):
    """Execute every component in order: project, run, merge (h_l = h_{l-1} + delta_l)"""
    policy = policy or TruncationPolicy()
    order = topological_order(graph)
    missing = [name for name in graph.task_fields if name not in task_input]
    if missing:
        raise MissingField(missing[0], "__input__")

    context = task_input = Context(task_input)
    entries = []
    total = TokenUsage()
    for component_id in order:
        component = graph.component(component_id)
        try:
            inputs = project_inputs(context, component)
            delta, entry = run_component(component, inputs, backend, policy, tools)
        except Exception as e:
            partial = Trajectory(task_input, tuple(entries), context)
            logger.error(f"Forward pass aborted at {component_id}: {e}")
            raise ForwardError(component_id, e, partial) from e
        context = merge_outputs(context, delta)
        entries.append(entry)
        total = total + entry.token_usage

    trajectory = Trajectory(task_input, tuple(entries), context)
    reward = compute_reward(context, gold) if gold is not None else None
    return ForwardResult(final_context=context, trajectory=trajectory, total_tokens=total, reward=reward)


def compute_reward(final, gold):
    if gold.field_name not in final:
        raise MissingField(gold.field_name)
    prediction = final[gold.field_name]
    if gold.labels:
        prediction = extract_label(prediction, gold.labels)

    metric = Metric(gold.metric)
    if metric is Metric.EXACT_MATCH:
        return 1.0 if normalize_answer(prediction) == normalize_answer(gold.answer) else 0.0
    return token_f1(prediction, gold.answer)

import json
import logging
import re
from pathlib import Path
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from exceptions import ConfigParseError, ConfigValidationError, CycleOrForwardReference, MissingField
from models import INPUT_NODE_ID, ComponentSpec, Context, DecodingConfig, Graph, ValidationReport, Violation

logger = logging.getLogger(__name__)

FIELD_NAME_RE = re.compile(r"^[a-z0-9_]+$")


# Graph definition file

class DecodingModel(BaseModel):
    model_config = ConfigDict(extra="forbid")

    temperature: float = 0.0
    max_new_tokens: int = 1024


class ComponentModel(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: str
    role_description: str = ""
    prompt_text: str = ""
    input_fields: list[str]
    output_fields: list[str]
    optimizable: bool = True
    is_tool: bool = False
    decoding: DecodingModel = Field(default_factory=DecodingModel)
    model: Optional[str] = None


class GraphModel(BaseModel):
    model_config = ConfigDict(extra="forbid")

    task_fields: list[str]
    components: list[ComponentModel]


def graph_from_dict(data):
    parsed = GraphModel.model_validate(data)
    components = [
        ComponentSpec(
            id=c.id,
            role_description=c.role_description,
            prompt_text=c.prompt_text,
            input_fields=tuple(c.input_fields),
            output_fields=tuple(c.output_fields),
            optimizable=c.optimizable,
            is_tool=c.is_tool,
            decoding=DecodingConfig(c.decoding.temperature, c.decoding.max_new_tokens),
            model=c.model,
        )
        for c in parsed.components
    ]
    return Graph(task_fields=tuple(parsed.task_fields), components=tuple(components))


def graph_to_dict(graph):
    components = []
    for comp in graph.components:
        item = {
            "id": comp.id,
            "role_description": comp.role_description,
            "prompt_text": comp.prompt_text,
            "input_fields": list(comp.input_fields),
            "output_fields": list(comp.output_fields),
            "optimizable": comp.optimizable,
            "is_tool": comp.is_tool,
            "decoding": {
                "temperature": comp.decoding.temperature,
                "max_new_tokens": comp.decoding.max_new_tokens,
            },
        }
        if comp.model is not None:
            item["model"] = comp.model
        components.append(item)
    return {"task_fields": list(graph.task_fields), "components": components}


def dumps_graph(graph):
    return json.dumps(graph_to_dict(graph), indent=2, ensure_ascii=False) + "\n"


def load_graph(path):
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigParseError(path, e.msg, e.lineno, e.colno) from e
    try:
        return graph_from_dict(data)
    except ValidationError as e:
        raise ConfigValidationError(
            f"{path}: {'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()
        ) from e


def save_graph(graph, path):
    Path(path).write_text(dumps_graph(graph), encoding="utf-8")


# Structure

def producers(graph):
    """Field name -> id of the component producing it (task fields map to the input node)"""
    produced = {name: INPUT_NODE_ID for name in graph.task_fields}
    for comp in graph.components:
        for name in comp.output_fields:
            produced.setdefault(name, comp.id)
    return produced


def predecessors(graph, component_id):
    """Ids of the components whose outputs feed `component_id`, in execution order"""
    comp = graph.component(component_id)
    produced = producers(graph)
    found = {produced[name] for name in comp.input_fields if name in produced}
    found.discard(INPUT_NODE_ID)
    return [cid for cid in graph.ids if cid in found]


def consumers(graph, component_id):
    comp = graph.component(component_id)
    outputs = set(comp.output_fields)
    return [c.id for c in graph.components if c.id != component_id and outputs & set(c.input_fields)]


def _component_violations(comp):
    found = []

    def add(kind, message, field_name=None):
        found.append(Violation(kind, message, comp.id, field_name))

    if not comp.id:
        add("empty id", "component id is empty")
    for label, names in (("input", comp.input_fields), ("output", comp.output_fields)):
        if not names:
            add(f"empty {label} fields", f"{comp.id} declares no {label} fields")
        seen = set()
        for name in names:
            if name in seen:
                add(f"duplicate {label} field", f"{comp.id} declares {label} '{name}' twice", name)
            seen.add(name)
            if not FIELD_NAME_RE.match(name):
                add("invalid field name", f"'{name}' is not a [a-z0-9_]+ identifier", name)
    if comp.optimizable and comp.is_tool:
        add("optimizable tool", f"{comp.id} is a tool node and cannot be optimizable")
    if comp.optimizable and not comp.prompt_text:
        add("empty prompt", f"{comp.id} is optimizable but has no prompt text")
    if not 0.0 <= comp.decoding.temperature <= 2.0:
        add("invalid temperature", f"{comp.id} temperature {comp.decoding.temperature} outside [0, 2]")
    if comp.decoding.max_new_tokens < 1:
        add("invalid max_new_tokens", f"{comp.id} max_new_tokens must be positive")
    return found


def validate_graph(graph):
    """Report every violation of the graph invariants; an empty report means the graph is runnable"""
    violations = []

    if not graph.components:
        violations.append(Violation("empty graph", "graph has no components"))

    for name in graph.task_fields:
        if not FIELD_NAME_RE.match(name):
            violations.append(
                Violation("invalid field name", f"task field '{name}' is not a [a-z0-9_]+ identifier",
                          INPUT_NODE_ID, name)
            )

    seen_ids = set()
    for comp in graph.components:
        if comp.id in seen_ids:
            violations.append(Violation("duplicate component id", f"id '{comp.id}' used twice", comp.id))
        seen_ids.add(comp.id)
        violations.extend(_component_violations(comp))

    # every pair of producers sharing a field name, the input node included
    owners = [(INPUT_NODE_ID, name) for name in graph.task_fields]
    owners += [(comp.id, name) for comp in graph.components for name in comp.output_fields]
    for i, (first_id, first_name) in enumerate(owners):
        for second_id, second_name in owners[i + 1:]:
            if first_name == second_name and first_id != second_id:
                violations.append(
                    Violation(
                        "duplicate output field",
                        f"'{first_name}' is produced by both {first_id} and {second_id}",
                        second_id,
                        first_name,
                    )
                )

    later = {}
    for index, comp in enumerate(graph.components):
        for name in comp.output_fields:
            later.setdefault(name, index)
    available = set(graph.task_fields)
    for index, comp in enumerate(graph.components):
        for name in comp.input_fields:
            if name in available:
                continue
            if name in later and later[name] >= index:
                violations.append(
                    Violation("forward reference",
                              f"{comp.id} consumes '{name}' before it is produced", comp.id, name)
                )
            else:
                violations.append(
                    Violation("unbound input field",
                              f"{comp.id} consumes '{name}' which nothing produces", comp.id, name)
                )
        available.update(comp.output_fields)

    return ValidationReport(tuple(violations))


def topological_order(graph):
    """Declaration order, verified to respect every data dependency"""
    produced_at = {name: -1 for name in graph.task_fields}
    for index, comp in enumerate(graph.components):
        for name in comp.output_fields:
            produced_at.setdefault(name, index)

    for index, comp in enumerate(graph.components):
        for name in comp.input_fields:
            where = produced_at.get(name)
            if where is None:
                raise MissingField(name, comp.id)
            if where >= index:
                raise CycleOrForwardReference(comp.id, name, graph.components[where].id)
    return graph.ids


def project_inputs(context, component):
    """Interface-level projection: exactly the declared input fields, in declared order"""
    missing = [name for name in component.input_fields if name not in context]
    if missing:
        raise MissingField(missing[0], component.id)
    return Context((name, context[name]) for name in component.input_fields)


def merge_outputs(context, delta):
    """Key-wise update: prior keys keep their position, the delta wins on collision"""
    merged = context.to_dict()
    for name, value in delta.items():
        merged[name] = value
    return Context(merged)

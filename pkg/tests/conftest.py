from pathlib import Path

import pytest

from llm_backend import ScriptedBackend, ScriptRule, ScriptTable
from models import ComponentSpec, Context, Example, GoldSpec, Graph, Metric
from stub_server import StubServer, create_stub_app

ROOT = Path(__file__).resolve().parent.parent
CONFIGS = ROOT / "configs"
DEFECTIVE_DIR = CONFIGS / "defective_node"

LOCAL_STOP = "LOCAL: {local}\nUPSTREAM: STOP_GRADIENT"
EMPTY_STOP = "LOCAL:\nUPSTREAM: STOP_GRADIENT"


def component(cid, inputs, outputs, prompt=None, **kwargs):
    return ComponentSpec(
        id=cid,
        role_description=kwargs.pop("role", f"Role of {cid}."),
        prompt_text=f"Prompt for {cid}." if prompt is None else prompt,
        input_fields=tuple(inputs),
        output_fields=tuple(outputs),
        **kwargs,
    )


def chain_graph(length, task_field="question"):
    """n1 -> n2 -> ... -> nL, each node reading the previous node's single output"""
    comps = []
    previous = task_field
    for i in range(1, length + 1):
        output = "answer" if i == length else f"out{i}"
        comps.append(component(f"n{i}", [previous], [output]))
        previous = output
    return Graph(task_fields=(task_field,), components=tuple(comps))


def scripted(rules, fallback=""):
    """ScriptedBackend from (pattern, response) pairs or ready ScriptRules"""
    built = [r if isinstance(r, ScriptRule) else ScriptRule(pattern=r[0], response=r[1]) for r in rules]
    return ScriptedBackend(ScriptTable(rules=built, fallback=fallback))


def example(question, answer, metric=Metric.EXACT_MATCH, labels=None):
    return Example(input=Context(question=question), gold=GoldSpec("answer", answer, metric, labels))


@pytest.fixture
def chain3():
    return chain_graph(3)


@pytest.fixture
def echo_forward():
    """Every chain node answers with a fixed per-node text"""
    return scripted([(f"Prompt for n{i}.", f"text from n{i}") for i in range(1, 21)])


@pytest.fixture
def defective_dir():
    return DEFECTIVE_DIR


@pytest.fixture
def stub_server():
    servers = []

    def start(backend):
        server = StubServer(create_stub_app(backend)).start()
        servers.append(server)
        return server

    yield start
    for server in servers:
        server.stop()

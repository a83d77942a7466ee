import json

import pytest

from config import load_config, save_config
from exceptions import ConfigParseError, ConfigValidationError
from models import (
    DEFAULT_BATCH_SIZE,
    DEFAULT_STEPS,
    OPTIMIZER_TEMPERATURE,
    PROJECTOR_TEMPERATURE,
    BackendKind,
    RoutingMode,
    SchedulerStrategy,
)
from trainer import TrainConfig


def write_config(tmp_path, defective_dir, **overrides):
    data = {
        "graph": str(defective_dir / "graph.json"),
        "train": str(defective_dir / "train.jsonl"),
        "backends": {
            role: {"kind": "scripted", "script_path": str(defective_dir / f"{role}_script.json")}
            for role in ("forward", "projector", "optimizer")
        },
    }
    data.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(data), encoding="utf-8")
    return path


def test_minimal_config_gets_defaults(tmp_path, defective_dir):
    config = load_config(write_config(tmp_path, defective_dir))
    assert config.schema_version == 1
    assert config.training.steps == DEFAULT_STEPS
    assert config.training.batch_size == DEFAULT_BATCH_SIZE
    assert config.scheduler.strategy is SchedulerStrategy.DENSITY_BOLTZMANN
    assert config.dev is None

    train = config.train_config()
    assert train.projector_temperature == PROJECTOR_TEMPERATURE
    assert train.optimizer_temperature == OPTIMIZER_TEMPERATURE
    assert train.tau == 1.0
    assert train.routing is RoutingMode.ROUTED


def test_config_defaults_match_train_defaults(tmp_path, defective_dir):
    assert load_config(write_config(tmp_path, defective_dir)).train_config() == TrainConfig()


def test_projector_routing_reaches_train_config(tmp_path, defective_dir):
    config = load_config(write_config(tmp_path, defective_dir, projector={"routing": "unrouted"}))
    assert config.train_config().routing is RoutingMode.UNROUTED

    with pytest.raises(ConfigValidationError, match="projector.routing"):
        load_config(write_config(tmp_path, defective_dir, projector={"routing": "sideways"}))


def test_shipped_config_resolves_relative_paths(defective_dir):
    config = load_config(defective_dir / "config.json")
    assert config.graph == (defective_dir / "graph.json").resolve()
    assert config.backends.forward.script_path == (defective_dir / "forward_script.json").resolve()
    assert config.output_dir == (defective_dir / "runs/defective_node").resolve()
    assert config.training.steps == 10
    assert all(s.kind is BackendKind.SCRIPTED for s in config.backend_settings())


def test_unknown_strategy_names_field(tmp_path, defective_dir):
    path = write_config(tmp_path, defective_dir, scheduler={"strategy": "foo"})
    with pytest.raises(ConfigValidationError) as info:
        load_config(path)
    assert any(v.startswith("scheduler.strategy:") for v in info.value.violations)


@pytest.mark.parametrize("overrides,field", [
    ({"training": {"steps": 0}}, "training.steps"),
    ({"scheduler": {"tau": -1}}, "scheduler.tau"),
    ({"schema": 2}, "schema"),
    ({"surprise": True}, "surprise"),
])
def test_invalid_values(tmp_path, defective_dir, overrides, field):
    with pytest.raises(ConfigValidationError, match=field):
        load_config(write_config(tmp_path, defective_dir, **overrides))


def test_scripted_backend_needs_script(tmp_path, defective_dir):
    path = write_config(tmp_path, defective_dir)
    data = json.loads(path.read_text(encoding="utf-8"))
    del data["backends"]["optimizer"]["script_path"]
    path.write_text(json.dumps(data), encoding="utf-8")
    with pytest.raises(ConfigValidationError, match="script_path"):
        load_config(path)


def test_missing_file_is_a_violation(tmp_path, defective_dir):
    path = write_config(tmp_path, defective_dir, dev="nowhere.jsonl")
    with pytest.raises(ConfigValidationError) as info:
        load_config(path)
    assert info.value.violations == [f"dev: file not found: {(tmp_path / 'nowhere.jsonl').resolve()}"]


def test_unknown_builtin_tool(tmp_path, defective_dir):
    path = write_config(tmp_path, defective_dir, tools={"search": "telepathy"})
    with pytest.raises(ConfigValidationError, match="unknown builtin tool"):
        load_config(path)


def test_parse_error_reports_line(tmp_path):
    path = tmp_path / "config.json"
    path.write_text('{\n  "graph": "g.json",\n  "train": \n}\n', encoding="utf-8")
    with pytest.raises(ConfigParseError) as info:
        load_config(path)
    assert info.value.line == 4


def test_unreadable_config(tmp_path):
    with pytest.raises(ConfigParseError):
        load_config(tmp_path / "absent.json")


def test_save_and_reload(tmp_path, defective_dir):
    config = load_config(defective_dir / "config.json")
    saved = tmp_path / "saved.json"
    save_config(config, saved)
    assert json.loads(saved.read_text(encoding="utf-8"))["schema"] == 1
    assert load_config(saved) == config

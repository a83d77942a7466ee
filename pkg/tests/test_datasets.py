import pytest

from conftest import example
from datasets import example_from_dict, example_to_dict, load_dataset, save_dataset, split_dataset
from exceptions import DatasetError
from models import Metric


def test_load_shipped_dataset(defective_dir):
    examples = load_dataset(defective_dir / "train.jsonl")
    assert len(examples) == 10
    assert examples[0].gold.field_name == "answer"
    assert examples[0].gold.metric is Metric.EXACT_MATCH
    assert "question" in examples[0].input


def test_example_without_gold():
    parsed = example_from_dict({"input": {"question": "q"}})
    assert parsed.gold is None
    assert example_to_dict(parsed) == {"input": {"question": "q"}}


def test_labels_survive_save(tmp_path):
    path = tmp_path / "data.jsonl"
    original = [example("pick one", "b", labels=("a", "b"))]
    save_dataset(original, path)
    assert load_dataset(path) == original


@pytest.mark.parametrize("record", [
    {"gold": {"field": "answer", "answer": "x"}},
    {"input": "not an object"},
    {"input": {"q": "x"}, "gold": {"answer": "x"}},
    {"input": {"q": "x"}, "gold": {"field": "a", "answer": "x", "metric": "bleu"}},
])
def test_invalid_records(record):
    with pytest.raises(DatasetError):
        example_from_dict(record)


def test_error_names_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"input": {"q": "a"}}\n\n{"input": \n', encoding="utf-8")
    with pytest.raises(DatasetError, match=r"bad\.jsonl:3"):
        load_dataset(path)


def test_split_is_seeded_and_disjoint():
    examples = [example(f"q{i}", "yes") for i in range(40)]
    train, dev = split_dataset(examples, seed=7)
    assert (len(train), len(dev)) == (38, 2)
    assert {e.input["question"] for e in train}.isdisjoint(e.input["question"] for e in dev)
    assert split_dataset(examples, seed=7) == (train, dev)


def test_split_keeps_one_dev_example():
    train, dev = split_dataset([example("a", "y"), example("b", "y"), example("c", "y")])
    assert (len(train), len(dev)) == (2, 1)
    with pytest.raises(DatasetError):
        split_dataset([example("a", "y")])

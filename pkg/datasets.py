import json
import logging
from pathlib import Path

import numpy as np

from exceptions import DatasetError
from models import Context, Example, GoldSpec, Metric

logger = logging.getLogger(__name__)


def example_from_dict(data):
    if not isinstance(data.get("input"), dict):
        raise DatasetError("record has no 'input' object")
    gold = None
    if data.get("gold") is not None:
        raw = data["gold"]
        try:
            gold = GoldSpec(
                field_name=raw["field"],
                answer=str(raw["answer"]),
                metric=Metric(raw.get("metric", Metric.EXACT_MATCH.value)),
                labels=tuple(raw["labels"]) if raw.get("labels") else None,
            )
        except (KeyError, ValueError) as e:
            raise DatasetError(f"invalid gold block: {e}") from e
    return Example(input=Context(data["input"]), gold=gold)


def example_to_dict(example):
    data = {"input": example.input.to_dict()}
    if example.gold is not None:
        gold = {
            "field": example.gold.field_name,
            "answer": example.gold.answer,
            "metric": example.gold.metric.value,
        }
        if example.gold.labels:
            gold["labels"] = list(example.gold.labels)
        data["gold"] = gold
    return data


def load_dataset(path):
    """One JSON record per line: {input: {...}, gold: {field, answer, metric}}"""
    path = Path(path)
    examples = []
    with open(path, encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                examples.append(example_from_dict(json.loads(line)))
            except (json.JSONDecodeError, DatasetError) as e:
                raise DatasetError(f"{path}:{line_number}: {e}") from e
    logger.info(f"Loaded {len(examples)} examples from {path}")
    return examples


def save_dataset(examples, path):
    with open(path, "w", encoding="utf-8") as f:
        for example in examples:
            f.write(json.dumps(example_to_dict(example), ensure_ascii=False) + "\n")


def split_dataset(examples, train_fraction=0.95, seed=42):
    """Seeded shuffle, then a train/validation split (validation keeps at least one example)"""
    examples = list(examples)
    if len(examples) < 2:
        raise DatasetError("need at least two examples to split")
    order = np.random.default_rng(seed).permutation(len(examples))
    n_train = min(max(1, int(round(len(examples) * train_fraction))), len(examples) - 1)
    train = [examples[i] for i in order[:n_train]]
    dev = [examples[i] for i in order[n_train:]]
    return train, dev

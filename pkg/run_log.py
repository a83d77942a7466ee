import json
import logging
import os
import threading
from pathlib import Path

import pandas as pd

from utils import get_now

logger = logging.getLogger(__name__)

HISTORY_FILE = "history.jsonl"
TOKENS_FILE = "tokens_per_step.csv"
DENSITY_FILE = "density_history.csv"
BEST_PROMPTS_FILE = "best_prompts.json"
RUN_LOG_FILE = "run_log.jsonl"


class RunLog:
    """Append-only JSON-lines event stream with a monotone sequence number.

    Every worker funnels events through `emit`, which serializes writes.

    Usage::

        log = RunLog("runs/exp1/run_log.jsonl")
        log.emit("step", step=1, action="update")
        log.close()
    """

    def __init__(self, path, overwrite=True):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._file = open(self.path, "w" if overwrite else "a", encoding="utf-8")
        self._lock = threading.Lock()
        self._seq = 0 if overwrite else self._last_seq()

    def _last_seq(self):
        events = load_jsonl(self.path)
        return events[-1]["seq"] if events else 0

    def emit(self, event, **payload):
        with self._lock:
            self._seq += 1
            entry = {"seq": self._seq, "time": get_now().isoformat(), "event": event, **payload}
            self._file.write(json.dumps(entry, ensure_ascii=False) + "\n")
            self._file.flush()
            return self._seq

    def close(self):
        with self._lock:
            if not self._file.closed:
                self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def load_jsonl(path):
    """Load a JSON-lines file; a torn final line (crash mid-write) is skipped"""
    entries = []
    with open(path, encoding="utf-8") as f:
        lines = f.readlines()
    for index, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            entries.append(json.loads(line))
        except json.JSONDecodeError:
            if index == len(lines) - 1:
                logger.warning(f"Skipping torn final line in {path}")
                continue
            raise
    return entries


def replay_prompt_state(path, initial_prompts):
    """Prompt state as of the last completed step recorded in a run log"""
    events = load_jsonl(path)
    completed = [e["step"] for e in events if e["event"] == "step"]
    last_step = max(completed) if completed else 0

    prompts = dict(initial_prompts)
    for event in events:
        if event["event"] == "prompt_change" and event["step"] <= last_step:
            prompts[event["component"]] = event["prompt_text"]
    return prompts, last_step


def _write_text(path, text):
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as e:
        raise OSError(f"Failed writing {path}: {e}") from e


def save_best_prompts(path, prompts, dev_score, step):
    payload = {"dev_score": dev_score, "step": step, "prompts": dict(prompts)}
    tmp = f"{path}.tmp"
    _write_text(tmp, json.dumps(payload, indent=2, ensure_ascii=False) + "\n")
    os.replace(tmp, path)


def load_best_prompts(path):
    with open(path, encoding="utf-8") as f:
        payload = json.load(f)
    return payload["prompts"], payload.get("dev_score")


def export_metrics(history, out_dir):
    """history.jsonl, tokens_per_step.csv and density_history.csv"""
    if not history.steps:
        raise ValueError("history has no steps to export")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    history_path = out_dir / HISTORY_FILE
    _write_text(history_path, "".join(json.dumps(r.to_dict(), ensure_ascii=False) + "\n"
                                      for r in history.steps))

    tokens = pd.DataFrame(
        [(r.step, r.feedback_tokens, r.stop_events) for r in history.steps],
        columns=["step", "feedback_tokens", "stop_events"],
    )
    density = pd.DataFrame(
        [(r.step, component, rho) for r in history.steps for component, rho in r.rho.items()],
        columns=["step", "component", "rho"],
    )
    paths = {"history": history_path, "tokens": out_dir / TOKENS_FILE, "density": out_dir / DENSITY_FILE}
    for frame, key in ((tokens, "tokens"), (density, "density")):
        try:
            frame.to_csv(paths[key], index=False)
        except OSError as e:
            raise OSError(f"Failed writing {paths[key]}: {e}") from e

    logger.info(f"Exported metrics for {len(history.steps)} steps to {out_dir}")
    return paths

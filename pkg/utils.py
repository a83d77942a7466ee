import re
from collections import Counter
from datetime import datetime

import pytz

_FENCE_RE = re.compile(r"^```[A-Za-z0-9_+-]*[ \t]*\n?(.*?)\n?```$", re.DOTALL)
_WS_RE = re.compile(r"\s+")


def get_now():
    """Current time in UTC"""
    return datetime.now(pytz.utc)


def field_label(name):
    """`retrieve_content` -> `Retrieve Content`"""
    return " ".join(part.capitalize() for part in name.split("_") if part)


def render_fields(context, names=None):
    """Render fields as `Label:\\nvalue` blocks separated by a blank line"""
    names = list(context.keys()) if names is None else list(names)
    return "\n\n".join(f"{field_label(name)}:\n{context[name]}" for name in names)


def strip_code_fences(text):
    """Strip surrounding whitespace and one enclosing markdown code fence"""
    stripped = text.strip()
    match = _FENCE_RE.match(stripped)
    if match:
        return match.group(1).strip()
    return stripped


def truncate_text(text, cap):
    """Keep the first `cap` characters; None means no cap"""
    if cap is None or len(text) <= cap:
        return text
    return text[:cap]


def normalize_answer(text):
    return _WS_RE.sub(" ", text.strip().lower())


def extract_label(text, labels):
    """First occurrence of one of `labels` in `text` (case-insensitive), else the text itself"""
    best = None
    for label in labels:
        match = re.search(rf"\b{re.escape(label)}\b", text, re.IGNORECASE)
        if match and (best is None or match.start() < best[0]):
            best = (match.start(), label)
    return best[1] if best else text


def token_f1(prediction, gold):
    pred_tokens = normalize_answer(prediction).split()
    gold_tokens = normalize_answer(gold).split()
    if not pred_tokens or not gold_tokens:
        return 1.0 if pred_tokens == gold_tokens else 0.0

    common = Counter(pred_tokens) & Counter(gold_tokens)
    overlap = sum(common.values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred_tokens)
    recall = overlap / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def snippet(text, limit=512):
    return truncate_text(text, limit)

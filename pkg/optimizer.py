import logging

from backward import load_prompt
from exceptions import EmptyBuffer, TagsNotFound
from models import DEFAULT_MODEL, OPTIMIZER_MAX_TOKENS, OPTIMIZER_TEMPERATURE, ChatRequest

logger = logging.getLogger(__name__)

START_TAG = "<IMPROVED_PROMPT>"
END_TAG = "</IMPROVED_PROMPT>"


def render_batch_feedback(entries):
    blocks = []
    for i, entry in enumerate(entries, start=1):
        block = f"Feedback {i} (step {entry.step}): {entry.local_text}"
        if entry.context_snippet:
            block += f"\nContext: {entry.context_snippet}"
        blocks.append(block)
    return "\n\n".join(blocks)


def build_update_prompt(component, entries, model=DEFAULT_MODEL,
                        temperature=OPTIMIZER_TEMPERATURE, max_new_tokens=OPTIMIZER_MAX_TOKENS):
    entries = list(entries)
    if not entries:
        raise EmptyBuffer(component.id)

    user = load_prompt("optimizer_update").format(
        variable_desc=component.role_description,
        variable_short=component.prompt_text,
        variable_context=render_batch_feedback(entries),
        start_tag=START_TAG,
        end_tag=END_TAG,
    )
    return ChatRequest(
        system=load_prompt("optimizer_system"),
        user=user,
        temperature=temperature,
        max_new_tokens=max_new_tokens,
        model=model,
    )


def extract_new_prompt(completion, start_tag=START_TAG, end_tag=END_TAG):
    """Text between the first start tag and the next end tag"""
    start = completion.find(start_tag)
    if start < 0:
        raise TagsNotFound(start_tag, end_tag)
    start += len(start_tag)
    end = completion.find(end_tag, start)
    if end < 0:
        raise TagsNotFound(start_tag, end_tag)

    prompt = completion[start:end].strip()
    if not prompt:
        raise TagsNotFound(start_tag, end_tag)
    return prompt

import json
import logging
import math
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol

import requests

from exceptions import BackendError, ConfigParseError
from models import DEFAULT_MODEL, BackendKind, ChatRequest, ChatResponse, TokenUsage

logger = logging.getLogger(__name__)

API_KEY_ENV = "RESGRAD_API_KEY"
BASE_URL_ENV = "RESGRAD_BASE_URL"
DEFAULT_BASE_URL = "https://api.openai.com/v1"
DEFAULT_TIMEOUT = 60.0
DEFAULT_MAX_ATTEMPTS = 3
DEFAULT_BACKOFF = 1.0


class Backend(Protocol):
    def complete(self, request: ChatRequest) -> ChatResponse:
        ...


def count_tokens(text):
    """Character heuristic: ceil(len / 4)"""
    return math.ceil(len(text) / 4)


def estimate_usage(request, completion):
    return TokenUsage(
        prompt_tokens=count_tokens(request.system) + count_tokens(request.user),
        completion_tokens=count_tokens(completion),
    )


# Scripted backend

@dataclass
class ScriptRule:
    """`pattern` is a substring (or regex) matched against system + "\\n" + user.

    `nth` maps a 1-based matching-call number to an alternate response;
    `responder` computes the response from (request, call number) instead.
    """

    pattern: str
    response: str = ""
    regex: bool = False
    nth: dict = field(default_factory=dict)
    responder: Optional[Callable[[ChatRequest, int], str]] = None

    def __post_init__(self):
        self.nth = {int(k): v for k, v in self.nth.items()}
        self._compiled = re.compile(self.pattern, re.DOTALL) if self.regex else None

    def matches(self, text):
        if self._compiled is not None:
            return self._compiled.search(text) is not None
        return self.pattern in text

    def respond(self, request, call_number):
        if self.responder is not None:
            return self.responder(request, call_number)
        return self.nth.get(call_number, self.response)


@dataclass
class ScriptTable:
    rules: list = field(default_factory=list)
    fallback: str = ""

    @classmethod
    def from_dict(cls, data):
        rules = [
            ScriptRule(
                pattern=item["pattern"],
                response=item.get("response", ""),
                regex=bool(item.get("regex", False)),
                nth=item.get("nth", {}),
            )
            for item in data.get("rules", [])
        ]
        return cls(rules=rules, fallback=data.get("fallback", ""))


def load_script_table(path):
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigParseError(path, e.msg, e.lineno, e.colno) from e
    return ScriptTable.from_dict(data)


class ScriptedBackend:
    """Deterministic backend: first matching rule wins, the fallback keeps it total"""

    def __init__(self, table):
        self.table = table
        self._counts = {}
        self._lock = threading.Lock()

    def complete(self, request):
        text = f"{request.system}\n{request.user}"
        for index, rule in enumerate(self.table.rules):
            if rule.matches(text):
                with self._lock:
                    self._counts[index] = self._counts.get(index, 0) + 1
                    call_number = self._counts[index]
                completion = rule.respond(request, call_number)
                break
        else:
            completion = self.table.fallback
        return ChatResponse(text=completion, usage=estimate_usage(request, completion))

    def reset(self):
        with self._lock:
            self._counts.clear()


# HTTP backend

class HttpBackend:
    """OpenAI-compatible chat-completions client"""

    def __init__(self, base_url=None, model=DEFAULT_MODEL, api_key=None, timeout=DEFAULT_TIMEOUT):
        self.base_url = (base_url or os.environ.get(BASE_URL_ENV) or DEFAULT_BASE_URL).rstrip("/")
        self.model = model
        self.timeout = timeout
        self._api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)

    @property
    def endpoint(self):
        return f"{self.base_url}/chat/completions"

    def build_body(self, request):
        return {
            "model": request.model or self.model,
            "messages": [
                {"role": "system", "content": request.system},
                {"role": "user", "content": request.user},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_new_tokens,
        }

    def complete(self, request):
        headers = {"Content-Type": "application/json"}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"

        try:
            response = requests.post(
                self.endpoint, json=self.build_body(request), headers=headers, timeout=self.timeout
            )
        except (requests.ConnectionError, requests.Timeout) as e:
            raise BackendError(f"Network failure calling {self.endpoint}: {e}", retryable=True) from e
        except requests.RequestException as e:
            raise BackendError(f"Request to {self.endpoint} failed: {e}", retryable=False) from e

        if response.status_code == 429 or response.status_code >= 500:
            raise BackendError(
                f"HTTP {response.status_code} from {self.endpoint}: {response.text[:200]}", retryable=True
            )
        if response.status_code >= 400:
            raise BackendError(
                f"HTTP {response.status_code} from {self.endpoint}: {response.text[:200]}", retryable=False
            )

        try:
            payload = response.json()
            text = payload["choices"][0]["message"]["content"]
            if text is None:
                text = ""
            if not isinstance(text, str):
                raise TypeError(f"content is {type(text).__name__}, not a string")
            usage_block = payload.get("usage") or {}
            if "prompt_tokens" in usage_block and "completion_tokens" in usage_block:
                usage = TokenUsage(int(usage_block["prompt_tokens"]), int(usage_block["completion_tokens"]))
            else:
                usage = estimate_usage(request, text)
        except (ValueError, KeyError, IndexError, TypeError, AttributeError) as e:
            raise BackendError(f"Malformed response from {self.endpoint}: {e}", retryable=False) from e
        return ChatResponse(text=text, usage=usage)


# Wrappers

def with_retry(backend, request, max_attempts=DEFAULT_MAX_ATTEMPTS, base_backoff=DEFAULT_BACKOFF,
               sleep=time.sleep):
    """Retry retryable BackendErrors with exponential backoff (base * 2**attempt)"""
    if max_attempts < 1:
        raise ValueError("max_attempts must be at least 1")

    for attempt in range(max_attempts):
        try:
            return backend.complete(request)
        except BackendError as e:
            if not e.retryable or attempt == max_attempts - 1:
                raise
            delay = base_backoff * (2 ** attempt)
            logger.warning(f"Retryable backend error (attempt {attempt + 1}/{max_attempts}), "
                           f"sleeping {delay:.2f}s: {e.detail}")
            sleep(delay)


class RetryingBackend:
    def __init__(self, inner, max_attempts=DEFAULT_MAX_ATTEMPTS, base_backoff=DEFAULT_BACKOFF,
                 sleep=time.sleep):
        self.inner = inner
        self.max_attempts = max_attempts
        self.base_backoff = base_backoff
        self._sleep = sleep

    def complete(self, request):
        return with_retry(self.inner, request, self.max_attempts, self.base_backoff, self._sleep)


class CountingBackend:
    """Records every request and sums the usage of every successful call"""

    def __init__(self, inner):
        self.inner = inner
        self.calls = 0
        self.requests = []
        self.usage = TokenUsage()
        self._lock = threading.Lock()

    def complete(self, request):
        with self._lock:
            self.calls += 1
            self.requests.append(request)
        response = self.inner.complete(request)
        with self._lock:
            self.usage = self.usage + response.usage
        return response


def build_backend(settings):
    """Backend from a config.BackendSettings"""
    kind = BackendKind(settings.kind)
    if kind is BackendKind.SCRIPTED:
        if settings.script_path is None:
            raise ValueError("scripted backend requires script_path")
        backend = ScriptedBackend(load_script_table(settings.script_path))
        logger.info(f"Scripted backend loaded from {settings.script_path}")
        return backend

    backend = HttpBackend(base_url=settings.base_url, model=settings.model, timeout=settings.timeout)
    logger.info(f"HTTP backend at {backend.base_url} using model {settings.model}")
    return RetryingBackend(backend, settings.max_attempts, settings.base_backoff)

"""Judge clients: a yes/no (or score) oracle queried with a fixed prompt.

``MockJudge`` and ``KeywordJudge`` are deterministic and used in tests and the
desk profile. ``RemoteJudge`` speaks a chat-completion style HTTP API.
"""
from __future__ import annotations

import base64
import logging
import os
import re
import threading
import time
from pathlib import Path
from typing import Callable, Protocol

import httpx

from .exceptions import ConfigurationError, JudgeError

log = logging.getLogger(__name__)

IMAGE_PROMPT = "Is this a non-pathological image? Answer yes or no."
TEXT_PROMPT = "Does this description involve non-human organisms? Answer yes or no."

_VERDICT = re.compile(r"\s*(yes|no)\b", re.IGNORECASE)


class JudgeClient(Protocol):
    retry_budget: int

    def judge(self, prompt: str, payload: dict) -> str: ...


def parse_verdict(raw: str) -> str:
    m = _VERDICT.match(raw or "")
    if not m:
        raise JudgeError(f"reply is not a yes/no verdict: {raw!r}")
    return m.group(1).lower()


def with_retries(judge: JudgeClient, prompt: str, payload: dict, parse: Callable[[str], object]):
    """Call ``judge`` up to ``retry_budget + 1`` times until ``parse`` accepts the reply."""
    attempts = getattr(judge, "retry_budget", 0) + 1
    backoff = getattr(judge, "backoff", 0.0)
    last = None
    for attempt in range(attempts):
        try:
            return parse(judge.judge(prompt, payload))
        except Exception as e:  # transport failures and unparseable replies alike
            last = e
            log.debug("judge attempt %d/%d failed: %s", attempt + 1, attempts, e)
            if backoff and attempt + 1 < attempts:
                time.sleep(backoff * 2**attempt)
    raise JudgeError(f"no usable reply after {attempts} attempts: {last}") from last


def ask_verdict(judge: JudgeClient, prompt: str, payload: dict) -> str:
    return with_retries(judge, prompt, payload, parse_verdict)


class MockJudge:
    """Answers with ``rule(prompt, payload)``; counts calls per payload id."""

    def __init__(self, rule: Callable[[str, dict], str], retry_budget: int = 2):
        self.rule = rule
        self.retry_budget = retry_budget
        self.calls: dict[str, int] = {}
        self._lock = threading.Lock()

    def judge(self, prompt: str, payload: dict) -> str:
        with self._lock:
            key = str(payload.get("id"))
            self.calls[key] = self.calls.get(key, 0) + 1
        return self.rule(prompt, payload)


class KeywordJudge(MockJudge):
    """Says yes when any keyword occurs (case-insensitively) in ``payload[field]``.

    With ``whole_words`` the keywords must sit on word boundaries ("rat" does
    not fire on "separate"); otherwise plain substring matching is used.
    """

    def __init__(self, keywords, field: str = "text", whole_words: bool = True, retry_budget: int = 2):
        self.keywords = tuple(k.lower() for k in keywords)
        self.field = field
        alt = "|".join(re.escape(k) for k in self.keywords)
        self._pattern = re.compile(rf"\b(?:{alt})\b" if whole_words else alt, re.IGNORECASE)
        super().__init__(self._rule, retry_budget)

    def _rule(self, prompt, payload):
        return "Yes." if self._pattern.search(str(payload.get(self.field, ""))) else "No."


NON_HUMAN_KEYWORDS = (
    "murine", "mouse", "mice", "rat", "rats", "canine", "dog", "dogs", "feline", "cat", "cats",
    "porcine", "pig", "bovine", "equine", "zebrafish", "rabbit", "primate", "monkey", "avian", "chicken",
)
NON_PATHOLOGY_KEYWORDS = ("xray_", "ct_", "mri_", "chart_", "photo_")


class RemoteJudge:
    """Minimal chat-completion client. Images travel as base64 data URLs."""

    def __init__(self, endpoint: str, model: str, api_key: str | None = None, timeout: float = 60.0,
                 retry_budget: int = 2, backoff: float = 1.0, client: httpx.Client | None = None):
        if not endpoint:
            raise ConfigurationError("remote judge needs an endpoint")
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key
        self.timeout = timeout
        self.retry_budget = retry_budget
        self.backoff = backoff
        self._client = client or httpx.Client(timeout=timeout)

    @classmethod
    def from_env(cls, model: str, **kw) -> "RemoteJudge":
        return cls(os.environ.get("PATHASSIST_JUDGE_ENDPOINT", ""), model,
                   api_key=os.environ.get("PATHASSIST_JUDGE_API_KEY"), **kw)

    def build_request(self, prompt: str, payload: dict) -> dict:
        content: list[dict] = [{"type": "text", "text": prompt}]
        if payload.get("text"):
            content[0]["text"] = f"{prompt}\n\n{payload['text']}"
        if payload.get("image_ref"):
            data = base64.b64encode(Path(payload["image_ref"]).read_bytes()).decode("ascii")
            content.append({"type": "image_url", "image_url": {"url": f"data:image/png;base64,{data}"}})
        return {"model": self.model, "messages": [{"role": "user", "content": content}], "temperature": 0}

    def judge(self, prompt: str, payload: dict) -> str:
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        resp = self._client.post(self.endpoint, json=self.build_request(prompt, payload),
                                 headers=headers, timeout=self.timeout)
        resp.raise_for_status()
        return resp.json()["choices"][0]["message"]["content"]

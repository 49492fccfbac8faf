"""LLM-judge style classifier over a chat-completions HTTP interface.

The transport is injected, so every test runs without network access. Labels
are matched against the reply by exact comparison first (after trimming and
casefolding), then by unique word-boundary containment; anything else maps
to "unknown". Requests are serialized to stable bytes so they can be
snapshot-tested.
"""

from __future__ import annotations

import json
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

API_KEY_ENV = "BTTS_JUDGE_API_KEY"

DEFAULT_SYSTEM_PROMPT = "You are a text style classifier."
DEFAULT_USER_TEMPLATE = (
    "Classify the style of the following sentence as one of: {{styles}}. "
    "Reply with only the style name.\nSentence: {{text}}"
)


class JudgeConfigError(ValueError):
    """Invalid judge configuration or a request the server rejected (4xx)."""


class JudgeTransportError(RuntimeError):
    """Transport failure that persisted through every retry."""


class JudgeResponseError(RuntimeError):
    """A 2xx response whose body does not carry a chat completion."""


@dataclass(frozen=True)
class JudgeConfig:
    base_url: str = "https://api.openai.com/v1"
    model_name: str = "gpt-3.5-turbo"
    temperature: float = 0.0
    max_in_flight: int = 4
    max_retries: int = 3
    timeout_s: float = 30.0
    prompt_template: str = DEFAULT_USER_TEMPLATE

    def __post_init__(self) -> None:
        if self.temperature != 0.0:
            raise JudgeConfigError("temperature is fixed at 0 for determinism")
        if self.max_in_flight < 1:
            raise JudgeConfigError("max_in_flight must be positive")
        if self.max_retries < 0:
            raise JudgeConfigError("max_retries must be non-negative")
        for placeholder in ("{{styles}}", "{{text}}"):
            if placeholder not in self.prompt_template:
                raise JudgeConfigError(f"prompt template is missing {placeholder}")


@dataclass(frozen=True)
class JudgeVerdict:
    raw_response: str
    label: str
    matched_by: str  # exact | containment | none


@dataclass(frozen=True)
class TransportResponse:
    status: int
    body: bytes


class RequestsTransport:
    """Real HTTP POST via requests. Connection problems and timeouts raise
    JudgeTransportError so the retry loop can see them."""

    def post(self, url: str, body: bytes, headers: dict[str, str],
             timeout_s: float) -> TransportResponse:
        import requests

        try:
            resp = requests.post(url, data=body, headers=headers, timeout=timeout_s)
        except requests.RequestException as exc:
            raise JudgeTransportError(str(exc)) from exc
        return TransportResponse(resp.status_code, resp.content)


def build_prompt(cfg: JudgeConfig, labels: list[str], text: str) -> tuple[str, str]:
    """Substitute the label list and sentence into the prompt template,
    returning (system, user) messages."""
    if len(labels) < 2:
        raise JudgeConfigError("need at least 2 labels")
    if not text.strip():
        raise JudgeConfigError("text must be non-empty")
    user = cfg.prompt_template.replace("{{styles}}", ", ".join(labels))
    user = user.replace("{{text}}", text)
    return DEFAULT_SYSTEM_PROMPT, user


def request_body(cfg: JudgeConfig, labels: list[str], text: str) -> bytes:
    """Byte-stable JSON body for a classification request."""
    system, user = build_prompt(cfg, labels, text)
    payload = {
        "model": cfg.model_name,
        "messages": [
            {"role": "system", "content": system},
            {"role": "user", "content": user},
        ],
        "temperature": 0,
    }
    return json.dumps(payload, ensure_ascii=False, separators=(",", ":")).encode("utf-8")


def match_label(response_text: str, labels: list[str]) -> tuple[str, str]:
    """Map a raw reply to (label, matched_by); total over all inputs.

    Exact match (trimmed, casefolded) wins; otherwise a label contained in
    the reply as a whole word matches, but only if exactly one label does.
    """
    cleaned = response_text.strip().casefold()
    for label in labels:
        if cleaned == label.strip().casefold():
            return label, "exact"
    contained = [label for label in labels
                 if re.search(rf"\b{re.escape(label)}\b", response_text, re.IGNORECASE)]
    if len(contained) == 1:
        return contained[0], "containment"
    return "unknown", "none"


def _headers() -> dict[str, str]:
    headers = {"Content-Type": "application/json"}
    key = os.environ.get(API_KEY_ENV)
    if key:
        headers["Authorization"] = f"Bearer {key}"
    return headers


def _parse_completion(body: bytes) -> str:
    try:
        obj = json.loads(body.decode("utf-8"))
        content = obj["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise JudgeResponseError(f"malformed completion response: {exc}") from exc
    if not isinstance(content, str):
        raise JudgeResponseError("completion content is not a string")
    return content


def classify(cfg: JudgeConfig, transport, labels: list[str], text: str,
             sleep=time.sleep) -> JudgeVerdict:
    """Ask the judge to classify one text; retries transport errors and 5xx
    responses with exponential backoff (1s base, doubling)."""
    body = request_body(cfg, labels, text)
    url = cfg.base_url.rstrip("/") + "/chat/completions"
    attempts = cfg.max_retries + 1
    last_error: Exception | None = None
    for attempt in range(attempts):
        if attempt > 0:
            sleep(1.0 * (2 ** (attempt - 1)))
        try:
            resp = transport.post(url, body, _headers(), cfg.timeout_s)
        except JudgeTransportError as exc:
            last_error = exc
            continue
        if 500 <= resp.status < 600:
            last_error = JudgeTransportError(f"server error {resp.status}")
            continue
        if resp.status != 200:
            raise JudgeConfigError(f"judge request rejected with status {resp.status}")
        content = _parse_completion(resp.body)
        label, matched_by = match_label(content, labels)
        return JudgeVerdict(content, label, matched_by)
    raise JudgeTransportError(
        f"judge request failed after {attempts} attempts: {last_error}")


def classify_batch(cfg: JudgeConfig, transport, labels: list[str],
                   texts: list[str], sleep=time.sleep
                   ) -> list[JudgeVerdict | Exception]:
    """Classify many texts with at most max_in_flight concurrent requests.

    Results come back in input order. An item that exhausts its retries (or
    hits a non-retryable error) carries the exception in its slot; the rest
    of the batch still completes.
    """
    if not texts:
        raise JudgeConfigError("empty batch")

    def one(text: str) -> JudgeVerdict | Exception:
        try:
            return classify(cfg, transport, labels, text, sleep=sleep)
        except Exception as exc:
            return exc

    with ThreadPoolExecutor(max_workers=cfg.max_in_flight) as pool:
        return list(pool.map(one, texts))


def judge_classifier(cfg: JudgeConfig, transport, labels: list[str], sleep=time.sleep):
    """Adapter: a text -> label callable for the evaluation module. Failed
    requests classify as "unknown" (counted incorrect)."""

    def classify_text(text: str) -> str:
        try:
            return classify(cfg, transport, labels, text, sleep=sleep).label
        except (JudgeTransportError, JudgeResponseError, JudgeConfigError):
            return "unknown"

    return classify_text


class MockTransport:
    """Scripted transport for tests: maps user-message text to replies,
    optionally failing specific calls, and records concurrency."""

    def __init__(self, reply_fn, latency_fn=None):
        self.reply_fn = reply_fn
        self.latency_fn = latency_fn
        self.requests: list[dict] = []
        self._lock = threading.Lock()
        self._in_flight = 0
        self.max_in_flight_seen = 0
        self._calls = 0

    def post(self, url: str, body: bytes, headers: dict[str, str],
             timeout_s: float) -> TransportResponse:
        with self._lock:
            self._in_flight += 1
            self.max_in_flight_seen = max(self.max_in_flight_seen, self._in_flight)
            call_idx = self._calls
            self._calls += 1
            payload = json.loads(body.decode("utf-8"))
            self.requests.append({"url": url, "body": body, "headers": headers,
                                  "payload": payload})
        try:
            if self.latency_fn is not None:
                time.sleep(self.latency_fn(call_idx))
            reply = self.reply_fn(payload, call_idx)
            if isinstance(reply, TransportResponse):
                return reply
            if isinstance(reply, Exception):
                raise reply
            body_out = json.dumps(
                {"choices": [{"message": {"role": "assistant", "content": reply}}]}
            ).encode("utf-8")
            return TransportResponse(200, body_out)
        finally:
            with self._lock:
                self._in_flight -= 1

"""Generation backends.

A backend is any object with ``generate(request) -> Completion``.  Three are
provided: :class:`ScriptedBackend` (deterministic replay of a transcript
table), :class:`RecordingBackend` (captures another backend's output for
later replay) and :class:`HttpBackend` (the JSON-over-HTTP wire protocol
documented in ``docs/protocol.md``).
"""

from __future__ import annotations

import json
import logging
import math
import os
import threading
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Protocol, Tuple

from . import defaults
from .geometry import ImageRef
from .images import encode_png_base64
from .protocol import Message

log = logging.getLogger(__name__)

TOKEN_ENV = "CROPZOOM_BACKEND_TOKEN"


class BackendUnavailable(ConnectionError):
    """Transport failure that persisted through every retry."""


class BackendError(RuntimeError):
    """The backend answered, but not with a usable completion."""


class MissingScriptEntry(KeyError):
    pass


@dataclass(frozen=True)
class BackendRequest:
    messages: Tuple[Message, ...]
    temperature: float = defaults.EVAL_TEMPERATURE
    max_new_tokens: int = defaults.MAX_NEW_TOKENS
    want_logprobs: bool = False
    sample_id: str = ""
    stage: int = 1

    def __post_init__(self):
        object.__setattr__(self, "messages", tuple(self.messages))
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be positive")


@dataclass(frozen=True)
class Completion:
    text: str
    token_logprobs: Optional[Tuple[float, ...]] = None


class Backend(Protocol):
    def generate(self, request: BackendRequest) -> Completion: ...


# --- transcript tables --------------------------------------------------------

TranscriptKey = Tuple[str, int]


def load_transcripts(path) -> Dict[TranscriptKey, str]:
    """Read a JSONL table of ``{"sample_id", "stage", "text"}`` records."""
    table: Dict[TranscriptKey, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            try:
                table[(str(rec["sample_id"]), int(rec["stage"]))] = str(rec["text"])
            except KeyError as exc:
                raise ValueError(f"{path} line {lineno}: missing {exc}") from None
    return table


def save_transcripts(table: Dict[TranscriptKey, str], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for (sid, stage), text in sorted(table.items()):
            fh.write(json.dumps({"sample_id": sid, "stage": stage, "text": text}) + "\n")


class ScriptedBackend:
    """Returns pre-authored completions keyed by ``(sample_id, stage)``.

    Log-probabilities are fabricated: one uniform value per
    whitespace-delimited token.
    """

    name = "scripted"

    def __init__(self, script: Dict[TranscriptKey, str], token_logprob: float = math.log(0.5)):
        self.script = dict(script)
        self.token_logprob = token_logprob

    def generate(self, request: BackendRequest) -> Completion:
        key = (request.sample_id, request.stage)
        try:
            text = self.script[key]
        except KeyError:
            raise MissingScriptEntry(f"no scripted completion for {key}") from None
        logprobs = None
        if request.want_logprobs:
            logprobs = tuple(self.token_logprob for _ in text.split()) or (self.token_logprob,)
        return Completion(text, logprobs)


def scripted_backend(script) -> ScriptedBackend:
    """Build a :class:`ScriptedBackend` from a table or a JSONL transcript path."""
    if isinstance(script, (str, os.PathLike)):
        script = load_transcripts(script)
    return ScriptedBackend(script)


class RecordingBackend:
    """Forwards to ``inner`` and records every completion for replay."""

    def __init__(self, inner: Backend):
        self.inner = inner
        self.table: Dict[TranscriptKey, str] = {}
        self._lock = threading.Lock()

    def generate(self, request: BackendRequest) -> Completion:
        completion = self.inner.generate(request)
        with self._lock:
            self.table[(request.sample_id, request.stage)] = completion.text
        return completion

    def replay(self) -> ScriptedBackend:
        with self._lock:
            return ScriptedBackend(dict(self.table))


# --- HTTP ----------------------------------------------------------------------


def _encode_image(ref: ImageRef, mode: str) -> dict:
    out = {
        "type": "image",
        "crop": list(ref.source_box.as_list()),
        "resize": list(ref.display_resolution.as_tuple()),
    }
    if mode == "base64":
        out["base64"] = encode_png_base64(ref)
    else:
        out["path"] = ref.uri
    return out


def encode_request(request: BackendRequest, image_mode: str = "path") -> dict:
    """Wire form of a request (see ``docs/protocol.md``)."""
    messages = []
    for m in request.messages:
        content: List[dict] = [{"type": "text", "text": m.text}]
        content.extend(_encode_image(img, image_mode) for img in m.images)
        messages.append({"role": m.role, "content": content})
    return {
        "messages": messages,
        "temperature": request.temperature,
        "max_tokens": request.max_new_tokens,
        "logprobs": request.want_logprobs,
        "metadata": {"sample_id": request.sample_id, "stage": request.stage},
    }


def decode_completion(payload) -> Completion:
    if not isinstance(payload, dict) or not isinstance(payload.get("text"), str):
        raise BackendError("response lacks a 'text' string")
    lp = payload.get("logprobs")
    if lp is not None:
        if not isinstance(lp, list) or not all(isinstance(v, (int, float)) for v in lp):
            raise BackendError("'logprobs' must be a list of numbers")
        lp = tuple(float(v) for v in lp)
    return Completion(payload["text"], lp)


class HttpBackend:
    """Client for the JSON-over-HTTP generation endpoint.

    Transport errors, HTTP 429 and 5xx are retried ``retries`` times with
    exponential backoff, then surface as :class:`BackendUnavailable`.
    The bearer token, if any, is read from ``$CROPZOOM_BACKEND_TOKEN``.
    """

    name = "http"

    def __init__(
        self,
        endpoint: str,
        *,
        retries: int = defaults.BACKEND_RETRIES,
        backoff: float = defaults.BACKOFF_SECONDS,
        timeout: float = 120.0,
        image_mode: str = "path",
        transport=None,
        sleep=time.sleep,
    ):
        import httpx

        if image_mode not in ("path", "base64"):
            raise ValueError("image_mode must be 'path' or 'base64'")
        headers = {}
        token = os.environ.get(TOKEN_ENV)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        self.endpoint = endpoint
        self.retries = retries
        self.backoff = backoff
        self.image_mode = image_mode
        self._sleep = sleep
        self._httpx = httpx
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)

    def close(self) -> None:
        self._client.close()

    def generate(self, request: BackendRequest) -> Completion:
        httpx = self._httpx
        body = encode_request(request, self.image_mode)
        last: Optional[Exception] = None
        for attempt in range(self.retries + 1):
            if attempt:
                self._sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self._client.post(self.endpoint, json=body)
            except httpx.TransportError as exc:
                last = exc
                log.warning("backend transport error (attempt %d): %s", attempt + 1, exc)
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = BackendError(f"HTTP {resp.status_code}")
                log.warning("backend HTTP %d (attempt %d)", resp.status_code, attempt + 1)
                continue
            if resp.status_code >= 400:
                raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                payload = resp.json()
            except ValueError as exc:
                raise BackendError(f"invalid JSON response: {exc}") from exc
            return decode_completion(payload)
        raise BackendUnavailable(
            f"{self.endpoint} unreachable after {self.retries + 1} attempts: {last}"
        )

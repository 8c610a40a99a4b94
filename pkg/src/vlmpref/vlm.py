"""Transport-agnostic chat client for vision-language labelers.

Holds the exact prompt wording used for comparison and scoring queries,
request assembly (interleaved text and image parts), response parsing,
an on-disk response cache keyed by content hashes, retry with exponential
backoff, and an append-only query audit log.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np


class TransientBackendError(RuntimeError):
    """Retryable failure: timeouts, rate limits, 5xx responses."""


class CredentialRejected(RuntimeError):
    """Authentication failure; retrying cannot help."""


class ProviderUnavailable(RuntimeError):
    """Raised after the retry budget is exhausted."""


# ---------------------------------------------------------------------------
# prompt wording
# ---------------------------------------------------------------------------
# The wording below is load-bearing: caches key on the rendered text, and the
# golden-file tests pin every byte.  Do not "fix" the grammar.

PAIR_INTRO = "Consider the following two images:"

PAIR_QUESTIONS = (
    "1. What is shown in Image 1?\n"
    "2. What is shown in Image 2?\n"
    "3. The goal is to {goal}. Is there any difference between Image 1 and Image 2 "
    "in terms of achieving the goal?"
)

# the single-stage variant drops the "to" before the goal text
PAIR_QUESTIONS_SINGLE = (
    "1. What is shown in Image 1?\n"
    "2. What is shown in Image 2?\n"
    "3. The goal is {goal}. Is there any difference between Image 1 and Image 2 "
    "in terms of achieving the goal?"
)

LABEL_INSTRUCTION = (
    "Is the goal better achieved in Image 1 or Image 2? Reply a single line of 0 "
    "if the goal is better achieved in Image 1, or 1 if it is better achieved in "
    "Image 2.\n"
    "Reply -1 if the text is unsure or there is no difference."
)

LABELING_PREAMBLE = "Based on the text below to the questions:"

SCORE_INTRO = "Consider the following image:"

SCORE_QUESTIONS = (
    "1. What is shown in the image?\n"
    "2. The goal is {goal}. On a scale of 0 to 1, the score is 1 if the goal is "
    "achieved. What score would you give the image in terms of achieving the goal?"
)

SCORE_INSTRUCTION = (
    "Please reply a single line of the score the text has given. "
    "Reply -1 if the text is unsure."
)


# ---------------------------------------------------------------------------
# requests and responses
# ---------------------------------------------------------------------------


@dataclass
class ChatRequest:
    """Ordered multimodal parts: str for text, uint8 (H, W, 3) array for image."""

    parts: list
    model_name: str = "vlm-default"
    temperature: float = 0.0
    max_output_tokens: int = 1024
    template_id: str = ""

    def __post_init__(self) -> None:
        if not any(isinstance(p, str) for p in self.parts):
            raise ValueError("request needs at least one text part")
        for p in self.parts:
            if isinstance(p, str):
                continue
            a = np.asarray(p)
            if a.dtype != np.uint8 or a.ndim != 3 or a.shape[2] != 3:
                raise ValueError("image parts must be uint8 (H, W, 3)")

    def image_parts(self) -> list:
        return [p for p in self.parts if not isinstance(p, str)]


@dataclass
class ChatResponse:
    text: str
    latency_ms: float
    backend_name: str
    cached: bool = False


def request_text(request: ChatRequest) -> str:
    """Canonical prompt text with image parts shown as placeholders.

    A lone image renders as "[Image]", multiple images number themselves in
    order of appearance.  Parts join with single newlines, so the result is
    exactly the template wording when the text parts came from the renderers.
    """
    n_images = len(request.image_parts())
    pieces = []
    seen = 0
    for p in request.parts:
        if isinstance(p, str):
            pieces.append(p)
        else:
            seen += 1
            pieces.append("[Image]" if n_images == 1 else f"[Image {seen}]")
    return "\n".join(pieces)


def _hash_image(arr: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(str(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


def request_key(request: ChatRequest) -> str:
    """Content hash identifying a query for caching and audit."""
    payload = {
        "model": request.model_name,
        "temperature": request.temperature,
        "max_output_tokens": request.max_output_tokens,
        "text": request_text(request),
        "images": [_hash_image(np.asarray(p)) for p in request.image_parts()],
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# renderers
# ---------------------------------------------------------------------------


def _check_goal(goal: str) -> str:
    if not goal or not goal.strip():
        raise ValueError("empty goal")
    return goal


def render_two_stage_analysis(goal: str, image0: np.ndarray, image1: np.ndarray,
                              **kw) -> ChatRequest:
    """First-stage request: describe both images, then compare against the goal."""
    _check_goal(goal)
    parts = [
        PAIR_INTRO,
        "Image 1:",
        image0,
        "Image 2:",
        image1,
        "\n" + PAIR_QUESTIONS.format(goal=goal),
    ]
    return ChatRequest(parts=parts, template_id="two_stage_analysis", **kw)


def render_two_stage_labeling(goal: str, analysis_response: str, **kw) -> ChatRequest:
    """Second-stage request: extract a {-1, 0, 1} label from the analysis text."""
    _check_goal(goal)
    if not analysis_response or not analysis_response.strip():
        raise ValueError("empty response")
    text = "\n".join([
        LABELING_PREAMBLE,
        PAIR_QUESTIONS.format(goal=goal),
        analysis_response,
        LABEL_INSTRUCTION,
    ])
    return ChatRequest(parts=[text], template_id="two_stage_labeling", **kw)


def render_single_stage(goal: str, image0: np.ndarray, image1: np.ndarray,
                        **kw) -> ChatRequest:
    """One-shot request asking directly for the label."""
    _check_goal(goal)
    parts = [
        PAIR_INTRO,
        "Image 1:",
        image0,
        "Image 2:",
        image1,
        "\n" + PAIR_QUESTIONS_SINGLE.format(goal=goal) + "\n\n" + LABEL_INSTRUCTION,
    ]
    return ChatRequest(parts=parts, template_id="single_stage", **kw)


def render_score_analysis(goal: str, image: np.ndarray, **kw) -> ChatRequest:
    _check_goal(goal)
    parts = [SCORE_INTRO, image, SCORE_QUESTIONS.format(goal=goal)]
    return ChatRequest(parts=parts, template_id="score_analysis", **kw)


def render_score_labeling(goal: str, analysis_response: str, **kw) -> ChatRequest:
    _check_goal(goal)
    if not analysis_response or not analysis_response.strip():
        raise ValueError("empty response")
    text = "\n".join([
        LABELING_PREAMBLE,
        SCORE_QUESTIONS.format(goal=goal),
        analysis_response,
        SCORE_INSTRUCTION,
    ])
    return ChatRequest(parts=[text], template_id="score_labeling", **kw)


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------


def parse_preference(text: str) -> int:
    """Map a labeling reply to {-1, 0, 1}; anything malformed counts as -1.

    Only the last non-empty line is inspected, since the instruction asks for
    a single line.  Never raises.
    """
    for line in reversed((text or "").splitlines()):
        token = line.strip()
        if not token:
            continue
        if token in ("-1", "0", "1"):
            return int(token)
        return -1
    return -1


def parse_score(text: str) -> Optional[float]:
    """Extract a score in [0, 1] from the reply; None means unsure/unusable."""
    for line in reversed((text or "").splitlines()):
        token = line.strip()
        if not token:
            continue
        try:
            value = float(token)
        except ValueError:
            return None
        if 0.0 <= value <= 1.0:
            return value
        return None
    return None


# ---------------------------------------------------------------------------
# cache and audit log
# ---------------------------------------------------------------------------


class ResponseCache:
    """Append-only JSONL cache of response texts keyed by request hash."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self._store: dict[str, str] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        if self.path is not None and self.path.exists():
            for line in self.path.read_text().splitlines():
                if line.strip():
                    d = json.loads(line)
                    self._store[d["key"]] = d["text"]

    def __len__(self) -> int:
        return len(self._store)

    def get(self, key: str) -> Optional[str]:
        with self._lock:
            if key in self._store:
                self.hits += 1
                return self._store[key]
            self.misses += 1
            return None

    def put(self, key: str, text: str) -> None:
        with self._lock:
            if key in self._store:
                return
            self._store[key] = text
            if self.path is not None:
                with open(self.path, "a") as f:
                    f.write(json.dumps({"key": key, "text": text}) + "\n")

    def keys(self) -> list[str]:
        with self._lock:
            return list(self._store)


class AuditLog:
    """One JSONL line per issued query, flushed before the response is used."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def append(self, entry: dict) -> None:
        with self._lock:
            with open(self.path, "a") as f:
                f.write(json.dumps(entry) + "\n")
                f.flush()

    @staticmethod
    def read(path) -> list[dict]:
        p = Path(path)
        if not p.exists():
            return []
        return [json.loads(l) for l in p.read_text().splitlines() if l.strip()]


class RateLimiter:
    """Token-bucket limiter over a sliding one-minute window."""

    def __init__(self, max_per_minute: int, time_fn: Callable[[], float] = time.monotonic,
                 sleep_fn: Callable[[float], None] = time.sleep):
        if max_per_minute < 1:
            raise ValueError("max_per_minute must be positive")
        self.max_per_minute = max_per_minute
        self._time = time_fn
        self._sleep = sleep_fn
        self._stamps: list[float] = []
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._time()
                self._stamps = [t for t in self._stamps if now - t < 60.0]
                if len(self._stamps) < self.max_per_minute:
                    self._stamps.append(now)
                    return
                wait = 60.0 - (now - self._stamps[0])
            self._sleep(max(wait, 1e-3))


# ---------------------------------------------------------------------------
# backends
# ---------------------------------------------------------------------------


class SequenceBackend:
    """Replies with a fixed sequence of texts; mainly for tests and demos."""

    name = "scripted-sequence"

    def __init__(self, responses):
        self.responses = list(responses)
        self.calls = 0

    def complete(self, request: ChatRequest) -> str:
        self.calls += 1
        if not self.responses:
            raise TransientBackendError("scripted sequence exhausted")
        return self.responses.pop(0)


class ScriptedBackend:
    """Replay backend keyed by request hash, loaded from a JSONL mapping file.

    Lines have the shape {"key": <request hash>, "text": <response>}; a cache
    file written by a live run can be replayed directly.
    """

    name = "scripted-replay"

    def __init__(self, mapping=None, path=None):
        self.mapping = dict(mapping or {})
        if path is not None:
            for line in Path(path).read_text().splitlines():
                if line.strip():
                    d = json.loads(line)
                    self.mapping[d["key"]] = d["text"]
        self.calls = 0

    def complete(self, request: ChatRequest) -> str:
        self.calls += 1
        key = request_key(request)
        if key not in self.mapping:
            raise TransientBackendError(f"no scripted response for {key[:12]}")
        return self.mapping[key]


class HttpBackend:
    """OpenAI-style chat-completions transport over HTTP.

    Reads the bearer token from ``api_key_env``.  Images are inlined as
    base64 PNG data URIs in the order the template placed them.
    """

    def __init__(self, endpoint: str, api_key_env: str = "VLM_API_KEY",
                 timeout: float = 120.0, session=None):
        self.endpoint = endpoint
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.name = f"http:{endpoint}"
        self._session = session

    @staticmethod
    def _encode_image(arr: np.ndarray) -> str:
        from PIL import Image

        buf = io.BytesIO()
        Image.fromarray(arr).save(buf, format="PNG")
        return base64.b64encode(buf.getvalue()).decode()

    def _payload(self, request: ChatRequest) -> dict:
        content = []
        for p in request.parts:
            if isinstance(p, str):
                content.append({"type": "text", "text": p})
            else:
                uri = f"data:image/png;base64,{self._encode_image(np.asarray(p))}"
                content.append({"type": "image_url", "image_url": {"url": uri}})
        return {
            "model": request.model_name,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
            "messages": [{"role": "user", "content": content}],
        }

    def complete(self, request: ChatRequest) -> str:
        import os

        import requests

        token = os.environ.get(self.api_key_env, "")
        if not token:
            raise CredentialRejected(f"missing credential in ${self.api_key_env}")
        session = self._session or requests
        try:
            resp = session.post(
                self.endpoint,
                json=self._payload(request),
                headers={"Authorization": f"Bearer {token}"},
                timeout=self.timeout,
            )
        except requests.RequestException as e:
            raise TransientBackendError(str(e)) from e
        if resp.status_code in (401, 403):
            raise CredentialRejected(f"credential rejected ({resp.status_code})")
        if resp.status_code != 200:
            raise TransientBackendError(f"backend returned {resp.status_code}")
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (KeyError, IndexError, ValueError) as e:
            raise TransientBackendError(f"malformed backend reply: {e}") from e


# ---------------------------------------------------------------------------
# send with cache, retry, audit
# ---------------------------------------------------------------------------


def send(backend, request: ChatRequest, cache: Optional[ResponseCache] = None,
         audit: Optional[AuditLog] = None, max_attempts: int = 5,
         base_delay: float = 1.0, rate_limiter: Optional[RateLimiter] = None,
         sleep_fn: Callable[[float], None] = time.sleep) -> ChatResponse:
    """Issue one query: cache lookup, retries with doubling backoff, audit.

    The audit entry is written before the response is handed back, so a crash
    downstream still leaves a record of what was asked and answered.
    """
    key = request_key(request)

    def _log(response: ChatResponse) -> None:
        if audit is not None:
            audit.append({
                "request_hash": key,
                "template_id": request.template_id,
                "response_text": response.text,
                "latency_ms": round(response.latency_ms, 3),
                "cached": response.cached,
                "backend": response.backend_name,
            })

    if cache is not None:
        hit = cache.get(key)
        if hit is not None:
            response = ChatResponse(text=hit, latency_ms=0.0, backend_name="cache",
                                    cached=True)
            _log(response)
            return response

    last_error: Optional[Exception] = None
    for attempt in range(max_attempts):
        if rate_limiter is not None:
            rate_limiter.acquire()
        t0 = time.perf_counter()
        try:
            text = backend.complete(request)
        except TransientBackendError as e:
            last_error = e
            if attempt + 1 < max_attempts:
                sleep_fn(base_delay * (2 ** attempt))
            continue
        latency = (time.perf_counter() - t0) * 1000.0
        if cache is not None:
            cache.put(key, text)
        response = ChatResponse(text=text, latency_ms=latency,
                                backend_name=getattr(backend, "name", "backend"))
        _log(response)
        return response
    raise ProviderUnavailable(
        f"provider unavailable after {max_attempts} attempts: {last_error}")


class VlmChatClient:
    """Backend plus cache, audit log, retry policy and rate limit in one handle."""

    CACHE_FILE = "vlm_cache.jsonl"
    AUDIT_FILE = "vlm_queries.jsonl"

    def __init__(self, backend, run_dir=None, max_attempts: int = 5,
                 base_delay: float = 1.0, rate_limiter: Optional[RateLimiter] = None,
                 sleep_fn: Callable[[float], None] = time.sleep):
        self.backend = backend
        self.max_attempts = max_attempts
        self.base_delay = base_delay
        self.rate_limiter = rate_limiter
        self.sleep_fn = sleep_fn
        if run_dir is not None:
            run_dir = Path(run_dir)
            run_dir.mkdir(parents=True, exist_ok=True)
            self.cache = ResponseCache(run_dir / self.CACHE_FILE)
            self.audit = AuditLog(run_dir / self.AUDIT_FILE)
        else:
            self.cache = ResponseCache()
            self.audit = None

    def query(self, request: ChatRequest) -> ChatResponse:
        return send(self.backend, request, cache=self.cache, audit=self.audit,
                    max_attempts=self.max_attempts, base_delay=self.base_delay,
                    rate_limiter=self.rate_limiter, sleep_fn=self.sleep_fn)

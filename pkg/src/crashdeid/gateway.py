"""Client boundary to chat-completion backends.

Two backend kinds sit behind one ``complete`` call:

``http_endpoint``
    A chat-completions-style local inference server: POST ``{model,
    messages, temperature, seed}``; the completion is the first choice's
    message content. Transport failures are retried with exponential
    backoff. At most ``max_in_flight`` requests (default 4) are in flight
    at once.

``scripted_mock``
    A deterministic offline stand-in. The fixture file is JSONL of
    ``{"key", "response"}`` where ``key`` is ``request_key(system_prompt,
    user_content, seed)``; a completion depends only on request content,
    so repeated calls are byte-identical. Including the optional seed in
    the key lets fixtures script distinct sampled runs of one prompt.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import requests

DEFAULT_EXTRACTION_TEMPERATURE = 0.7
DEFAULT_VERIFIER_TEMPERATURE = 0.0
DEFAULT_MAX_OUTPUT_CHARS = 65536

_BACKOFF_BASE_SECONDS = 0.25
_inflight = threading.BoundedSemaphore(4)


def set_max_in_flight(limit: int) -> None:
    """Bound concurrent HTTP requests process-wide."""
    global _inflight
    if limit < 1:
        raise ValueError("in-flight limit must be >= 1")
    _inflight = threading.BoundedSemaphore(limit)


class GatewayError(RuntimeError):
    """Base error for backend communication failures."""


class Timeout(GatewayError):
    pass


class TransportFailure(GatewayError):
    pass


class MissingFixture(GatewayError):
    """The scripted mock has no entry for this request."""


class OversizeOutput(GatewayError):
    """The completion exceeds the request's output budget."""


class EmptyCandidateString(ValueError):
    """A verifier candidate list contains an empty string."""


@dataclass(frozen=True)
class ChatRequest:
    system_prompt: str
    user_content: str
    temperature: float = 0.0
    seed: int | None = None
    max_output_chars: int = DEFAULT_MAX_OUTPUT_CHARS

    def __post_init__(self) -> None:
        if not self.system_prompt or not self.user_content:
            raise ValueError("system_prompt and user_content must be non-empty")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if self.max_output_chars <= 0:
            raise ValueError("max_output_chars must be positive")


@dataclass(frozen=True)
class ChatResponse:
    text: str
    backend_id: str
    latency: float


@dataclass(frozen=True)
class BackendConfig:
    kind: str  # "http_endpoint" | "scripted_mock"
    endpoint_url: str | None = None
    model_name: str | None = None
    fixture_path: str | Path | None = None
    timeout: float = 30.0
    retries: int = 2

    def __post_init__(self) -> None:
        if self.kind == "http_endpoint":
            if not self.endpoint_url:
                raise ValueError("http_endpoint backend requires endpoint_url")
        elif self.kind == "scripted_mock":
            if not self.fixture_path:
                raise ValueError("scripted_mock backend requires fixture_path")
        else:
            raise ValueError(f"unknown backend kind: {self.kind!r}")
        if self.retries < 0:
            raise ValueError("retries must be >= 0")

    @property
    def backend_id(self) -> str:
        if self.kind == "scripted_mock":
            return f"mock:{Path(self.fixture_path).name}"
        model = self.model_name or "default"
        return f"http:{model}@{self.endpoint_url}"


def request_key(system_prompt: str, user_content: str, seed: int | None = None) -> str:
    """Content hash identifying a request in mock fixture files."""
    payload = json.dumps(
        {"seed": seed, "system": system_prompt, "user": user_content},
        ensure_ascii=False,
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def fixture_entry(request: ChatRequest, response: str) -> dict[str, str]:
    return {
        "key": request_key(request.system_prompt, request.user_content, request.seed),
        "response": response,
    }


def write_fixture_file(path: str | Path, entries: Iterable[dict[str, str]]) -> None:
    with Path(path).open("w", encoding="utf-8") as handle:
        for entry in entries:
            handle.write(json.dumps(entry, ensure_ascii=False) + "\n")


_fixture_cache: dict[tuple[str, float], dict[str, str]] = {}
_fixture_lock = threading.Lock()


def _load_fixtures(path: str | Path) -> dict[str, str]:
    resolved = Path(path).resolve()
    stamp = (str(resolved), resolved.stat().st_mtime)
    with _fixture_lock:
        cached = _fixture_cache.get(stamp)
        if cached is not None:
            return cached
    table: dict[str, str] = {}
    with resolved.open(encoding="utf-8") as handle:
        for line in handle:
            if not line.strip():
                continue
            entry = json.loads(line)
            table[entry["key"]] = entry["response"]
    with _fixture_lock:
        _fixture_cache[stamp] = table
    return table


def _http_post(url: str, payload: dict, timeout: float) -> dict:
    response = requests.post(url, json=payload, timeout=timeout)
    response.raise_for_status()
    return response.json()


def _complete_http(request: ChatRequest, config: BackendConfig) -> str:
    payload = {
        "model": config.model_name or "default",
        "messages": [
            {"role": "system", "content": request.system_prompt},
            {"role": "user", "content": request.user_content},
        ],
        "temperature": request.temperature,
    }
    if request.seed is not None:
        payload["seed"] = request.seed
    last_error: Exception | None = None
    for attempt in range(config.retries + 1):
        if attempt:
            time.sleep(_BACKOFF_BASE_SECONDS * 2 ** (attempt - 1))
        try:
            with _inflight:
                body = _http_post(config.endpoint_url, payload, config.timeout)
            return body["choices"][0]["message"]["content"]
        except requests.Timeout as exc:
            last_error = exc
        except (requests.RequestException, KeyError, IndexError, ValueError) as exc:
            last_error = exc
    if isinstance(last_error, requests.Timeout):
        raise Timeout(
            f"backend timed out after {config.retries + 1} attempts: {last_error}"
        ) from last_error
    raise TransportFailure(
        f"backend failed after {config.retries + 1} attempts: {last_error}"
    ) from last_error


def complete(request: ChatRequest, config: BackendConfig) -> ChatResponse:
    """Run one completion against the configured backend."""
    started = time.monotonic()
    if config.kind == "scripted_mock":
        key = request_key(request.system_prompt, request.user_content, request.seed)
        table = _load_fixtures(config.fixture_path)
        if key not in table:
            raise MissingFixture(
                f"no fixture entry for request key {key} in {config.fixture_path}"
            )
        text = table[key]
    else:
        text = _complete_http(request, config)
    if len(text) > request.max_output_chars:
        raise OversizeOutput(
            f"completion of {len(text)} chars exceeds limit "
            f"{request.max_output_chars}"
        )
    return ChatResponse(
        text=text,
        backend_id=config.backend_id,
        latency=time.monotonic() - started,
    )


EXTRACTION_SYSTEM_PROMPT = """\
Role: You are an expert linguist specializing in detecting personally identifiable information (PII) in crash narratives.

Context: Your task is to find and tag any Personally Identifiable Information (PII) using the special identifiers below, based on the PII category. If no PII is found, return the input text unchanged.

PII categories and tagging rules:
- Name: tag with @@@Text@@@
  Example: @@@John Smith@@@
- Phone Number: tag with &&&Text&&&
  Example: &&&608-733-8366&&&
- Home Address: tag with $$$Text$$$
  Example: $$$123 Elm Street$$$
  Do not tag crash-location addresses. Only tag home addresses based on context.
- Email Address: tag with %%%Text%%%
  Example: %%%jsmith@gmail.com%%%
- Alphanumeric Identifiers, including driver's license, SSN, and license plate number: tag with ^^^Text^^^
  Example: ^^^ABC1234^^^

The input is:"""

VERIFIER_SYSTEM_PROMPT = """\
Role: You are a strict PII extraction verifier for crash narratives.

Context: You will be given:
- the raw narrative;
- extracted candidates for HOME ADDRESS and ALPHANUMERIC IDENTIFIERS.

Your job is to decide for each provided candidate: KEEP, DROP, or UNCERTAIN.

Critical output format rules (must follow exactly):
- home_address_reviews must contain exactly one review per item in home_address_candidates, in the same order.
- For each i, home_address_reviews[i].text must equal home_address_candidates[i] exactly (character-for-character).
- If home_address_candidates is empty, home_address_reviews must be an empty list [].
- alphanumeric_reviews must contain exactly one review per item in alphanumeric_candidates, in the same order.
- For each i, alphanumeric_reviews[i].text must equal alphanumeric_candidates[i] exactly.
- If alphanumeric_candidates is empty, alphanumeric_reviews must be [].
- Do not add extra reviews. Do not repeat a candidate. Do not output reviews for text that is not in the candidate lists.
- Never output an empty string as a candidate text.

Hard rules:
- Do not invent any text not present in the narrative.
- For KEEP or DROP, you must include evidence copied verbatim from the narrative (short snippet).
- If you cannot find supporting evidence, mark UNCERTAIN and set evidence to "".

Guidance:
- HOME ADDRESS: keep only the true residence or mailing address of a person. Drop crash-location addresses such as intersections, highways, mile markers, and scene locations.
- ALPHANUMERIC IDENTIFIERS: keep only personal identifiers such as license plates, driver's license or ID numbers, and SSNs. Drop roadway IDs (e.g., I-94, US-12), report or case numbers, incident IDs, tag numbers, and unit numbers unless clearly tied to a personal identifier.

Output JSON only, matching the schema exactly."""


def build_extraction_prompt(
    narrative_text: str,
    temperature: float = DEFAULT_EXTRACTION_TEMPERATURE,
    seed: int | None = None,
) -> ChatRequest:
    """Tagging request: the fixed extraction instructions plus the narrative."""
    if not narrative_text:
        raise ValueError("narrative_text must be non-empty")
    return ChatRequest(
        system_prompt=EXTRACTION_SYSTEM_PROMPT,
        user_content=narrative_text,
        temperature=temperature,
        seed=seed,
    )


def _candidate_block(label: str, candidates: list[str]) -> str:
    if not candidates:
        return f"{label}:\n[]"
    lines = "\n".join(f"[{i}] {text}" for i, text in enumerate(candidates))
    return f"{label}:\n{lines}"


def build_verifier_prompt(
    narrative_text: str,
    home_candidates: list[str],
    alnum_candidates: list[str],
    temperature: float = DEFAULT_VERIFIER_TEMPERATURE,
    seed: int | None = None,
) -> ChatRequest:
    """Review request: candidates are line-itemized with stable indices so
    the alignment rules are checkable positionally."""
    for candidate in list(home_candidates) + list(alnum_candidates):
        if candidate == "":
            raise EmptyCandidateString("candidate lists must not contain empty strings")
    user_content = "\n\n".join(
        [
            f"NARRATIVE:\n{narrative_text}",
            _candidate_block("home_address_candidates", list(home_candidates)),
            _candidate_block("alphanumeric_candidates", list(alnum_candidates)),
        ]
    )
    return ChatRequest(
        system_prompt=VERIFIER_SYSTEM_PROMPT,
        user_content=user_content,
        temperature=temperature,
        seed=seed,
    )

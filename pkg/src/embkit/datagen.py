"""Synthetic query-document pairs from long documents.

Documents of 100-1000 whitespace tokens are reservoir-sampled per language,
wrapped in a fixed question-generation prompt and sent to a text-generation
client.  A reply of ``Non-<Language>`` means the model judged the document
to be in the wrong language; such documents are dropped.
"""

from __future__ import annotations

import json
import logging
import os
import re
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import httpx
import numpy as np

from .data import Document, read_documents, write_jsonl
from .errors import EmptyResponse, InsufficientDocuments, TransportError

log = logging.getLogger(__name__)

SYNTHETIC_TASK = "synthetic-retrieval"
API_KEY_ENV = "EMBKIT_GEN_KEY"

LANGUAGE_NAMES = {
    "en": "English",
    "fr": "French",
    "es": "Spanish",
    "de": "German",
    "zh": "Chinese",
    "it": "Italian",
    "ja": "Japanese",
    "ko": "Korean",
    "fa": "Persian",
    "hi": "Hindi",
    "id": "Indonesian",
    "ar": "Arabic",
    "bn": "Bengali",
    "fi": "Finnish",
    "sw": "Swahili",
    "te": "Telugu",
    "th": "Thai",
    "jv": "Javanese",
    "ms": "Malay",
    "sq": "Albanian",
}
LANGUAGES = tuple(LANGUAGE_NAMES)

_PROMPT_A = (
    "You are a curious AI assistant, please generate one specific and valuable "
    "question based on the following text. If the text is not "
)
_PROMPT_B = ", please reply with Non-"
_PROMPT_C = (
    ". The generated question should revolve around the core content of this "
    "text, and avoid using pronouns (e.g., 'this'). Note that you should "
    "generate only one question, without including additional content:\n"
)


def render_prompt(document: str, language_name: str) -> str:
    # plain concatenation: braces inside the document are left alone
    return _PROMPT_A + language_name + _PROMPT_B + language_name + _PROMPT_C + document


def language_name(code: str) -> str:
    try:
        return LANGUAGE_NAMES[code]
    except KeyError:
        raise ValueError(f"unsupported language code {code!r}; known: {', '.join(LANGUAGES)}")


@dataclass(frozen=True)
class GenerationRequest:
    document: str
    language: str
    rendered_prompt: str

    @classmethod
    def for_document(cls, document: str, language: str) -> "GenerationRequest":
        return cls(document, language, render_prompt(document, language_name(language)))


@dataclass(frozen=True)
class SyntheticPair:
    query: str
    document: str
    language: str
    source_doc_id: str
    task: str = SYNTHETIC_TASK

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Rejected:
    """The generator declined the document (``Non-<Language>`` reply)."""

    language: str
    response: str


class GenerationClient(Protocol):
    def complete(self, request: GenerationRequest) -> str: ...


class MockClient:
    """Offline stand-in: the "question" is the first few document tokens
    followed by ``?``.  Languages in ``reject_languages`` get a rejection."""

    def __init__(self, prefix_tokens: int = 8, reject_languages: Iterable[str] = ()):
        self.prefix_tokens = prefix_tokens
        self.reject_languages = set(reject_languages)

    def complete(self, request: GenerationRequest) -> str:
        if request.language in self.reject_languages:
            return "Non-" + language_name(request.language)
        m = re.match(r"\S+(?:\s+\S+){0,%d}" % (self.prefix_tokens - 1), request.document)
        return (m.group(0) if m else "") + "?"


class ChatCompletionClient:
    """Minimal JSON-over-HTTP chat-completion client.

    Sends ``{"model", "messages": [{"role": "user", "content": prompt}],
    "temperature", "n": 1}`` and reads ``choices[0].message.content``.
    """

    def __init__(self, endpoint: str, model: str, api_key: str | None = None,
                 temperature: float = 0.7, timeout: float = 60.0,
                 transport: httpx.BaseTransport | None = None):
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        if not self.api_key:
            raise ValueError(f"no credential: set {API_KEY_ENV}")
        self.temperature = temperature
        self._http = httpx.Client(timeout=timeout, transport=transport)

    @classmethod
    def from_config(cls, path: str | Path, **kwargs) -> "ChatCompletionClient":
        import yaml

        cfg = yaml.safe_load(Path(path).read_text()) or {}
        return cls(cfg["endpoint"], cfg["model"],
                   temperature=float(cfg.get("temperature", 0.7)), **kwargs)

    def payload(self, request: GenerationRequest) -> dict:
        return {
            "model": self.model,
            "messages": [{"role": "user", "content": request.rendered_prompt}],
            "temperature": self.temperature,
            "n": 1,
        }

    def complete(self, request: GenerationRequest) -> str:
        try:
            resp = self._http.post(
                self.endpoint,
                json=self.payload(request),
                headers={"Authorization": f"Bearer {self.api_key}"},
            )
        except httpx.HTTPError as exc:
            raise TransportError(f"request failed: {exc}") from exc
        if resp.status_code != 200:
            raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed response: {exc}") from exc


@dataclass
class RetryPolicy:
    max_attempts: int = 3
    base_delay: float = 1.0
    max_delay: float = 30.0
    sleep: Callable[[float], None] = time.sleep

    def delay(self, attempt: int) -> float:
        return min(self.max_delay, self.base_delay * 2 ** (attempt - 1))


def generate_query(client: GenerationClient, request: GenerationRequest,
                   retry: RetryPolicy | None = None) -> str | Rejected:
    retry = retry or RetryPolicy()
    for attempt in range(1, retry.max_attempts + 1):
        log.info("generation attempt %d/%d (%s)", attempt, retry.max_attempts, request.language)
        try:
            text = client.complete(request)
            break
        except TransportError as exc:
            if attempt == retry.max_attempts:
                raise TransportError(f"giving up after {attempt} attempts: {exc}") from exc
            log.warning("attempt %d failed: %s", attempt, exc)
            retry.sleep(retry.delay(attempt))
    text = text.strip()
    if text.startswith("Non-" + language_name(request.language)):
        return Rejected(request.language, text)
    if not text:
        raise EmptyResponse("generator returned an empty response")
    return text


def token_count(text: str) -> int:
    return len(text.split())


def sample_documents(stream: Iterable[Document], n: int, seed: int = 0,
                     min_len: int = 100, max_len: int = 1000) -> list[Document]:
    """Reservoir sample of ``n`` documents whose whitespace-token count lies
    in ``[min_len, max_len]``."""
    rng = np.random.default_rng(seed)
    reservoir: list[Document] = []
    seen = 0
    for doc in stream:
        if not min_len <= token_count(doc.text) <= max_len:
            continue
        if seen < n:
            reservoir.append(doc)
        else:
            j = int(rng.integers(0, seen + 1))
            if j < n:
                reservoir[j] = doc
        seen += 1
    if seen < n:
        raise InsufficientDocuments(f"only {seen} documents of {min_len}-{max_len} tokens, need {n}")
    return reservoir


@dataclass
class LanguageStats:
    requested: int = 0
    accepted: int = 0
    rejected: int = 0
    transport_errors: int = 0
    empty_responses: int = 0
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None or self.transport_errors > 0


@dataclass
class DatasetResult:
    pairs: list[SyntheticPair] = field(default_factory=list)
    stats: dict[str, LanguageStats] = field(default_factory=dict)

    @property
    def failed_languages(self) -> list[str]:
        return [lang for lang, s in self.stats.items() if s.failed]


def stats_path(out_path: str | Path) -> Path:
    out_path = Path(out_path)
    return out_path.with_name(out_path.stem + ".stats.json")


def language_seed(seed: int, language: str) -> list[int]:
    return [seed, zlib.crc32(language.encode("utf-8"))]


def build_synthetic_dataset(
    corpus_path: str | Path,
    languages: Sequence[str],
    per_language_count: int,
    client: GenerationClient,
    out_path: str | Path | None = None,
    seed: int = 0,
    min_len: int = 100,
    max_len: int = 1000,
    concurrency: int = 4,
    retry: RetryPolicy | None = None,
) -> DatasetResult:
    """Sample, prompt and filter per language; write the pairs (JSONL) and a
    ``<stem>.stats.json`` sidecar when ``out_path`` is given.  A language
    without enough documents is recorded in the stats and skipped."""
    if per_language_count < 1:
        raise ValueError("per_language_count must be >= 1")
    for lang in languages:
        language_name(lang)
    docs = read_documents(corpus_path)
    result = DatasetResult()

    def attempt(req: GenerationRequest):
        try:
            return generate_query(client, req, retry)
        except (TransportError, EmptyResponse) as exc:
            return exc

    with ThreadPoolExecutor(max_workers=max(1, concurrency)) as pool:
        for lang in languages:
            stats = result.stats[lang] = LanguageStats(requested=per_language_count)
            try:
                sample = sample_documents((d for d in docs if d.lang == lang),
                                          per_language_count, language_seed(seed, lang),
                                          min_len, max_len)
            except InsufficientDocuments as exc:
                stats.error = str(exc)
                log.warning("%s: %s", lang, exc)
                continue
            requests = [GenerationRequest.for_document(d.text, lang) for d in sample]
            # map() keeps input order, so output does not depend on scheduling
            for doc, outcome in zip(sample, pool.map(attempt, requests)):
                if isinstance(outcome, Rejected):
                    stats.rejected += 1
                elif isinstance(outcome, TransportError):
                    stats.transport_errors += 1
                elif isinstance(outcome, EmptyResponse):
                    stats.empty_responses += 1
                else:
                    stats.accepted += 1
                    result.pairs.append(SyntheticPair(outcome, doc.text, lang, doc.id))

    if out_path is not None:
        write_jsonl(out_path, (p.to_json() for p in result.pairs))
        stats_path(out_path).write_text(
            json.dumps({k: asdict(v) for k, v in result.stats.items()}, indent=2, sort_keys=True)
            + "\n"
        )
    return result

"""Prompt construction, sampling, response parsing, and the sample cache.

The language model is always external: any OpenAI-compatible chat
completion endpoint works, and a deterministic mock transport stands in
for it during tests and desk-scale experiments. Model parameters are
never touched here; the model is treated as a frozen conditional text
distribution we draw from.

Completed generations are appended to a JSON Lines cache keyed by
(prompt hash, model id, temperature, sample index), so interrupted
sampling runs resume without repeating a single network call, and two
runs over the same inputs yield byte-identical sample sets.

Credentials for HTTP endpoints are read from the NLECAL_API_KEY
environment variable and sent as a bearer token.
"""

import hashlib
import json
import logging
import os
import random
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum

import requests

from .errors import ConfigError, EndpointError, ParseError, TransportError, UnparseableScoreError
from .textsim import tokenize

logger = logging.getLogger(__name__)

API_KEY_ENV = "NLECAL_API_KEY"

LABEL_RELEVANT = "relevant"
LABEL_NONRELEVANT = "nonrelevant"
LABEL_UNPARSED = "unparsed"


class PromptKind(str, Enum):
    literal = "literal"
    conditional_relevant = "conditional_relevant"
    conditional_nonrelevant = "conditional_nonrelevant"
    rubric = "rubric"
    binary = "binary"


# Fixed per release; the active template travels with every sample's
# provenance via the prompt hash.
PROMPT_TEMPLATES = {
    PromptKind.literal: (
        "For the following query and document, judge whether they are relevant "
        "or non-relevant, and provide an explanation. Output 'Relevant' or "
        "'Nonrelevant'. Do not repeat the content of the query or the document. "
        "Query: {query} Document: {document} Output:"
    ),
    PromptKind.conditional_relevant: (
        "For the following query and document, explain why they are relevant. "
        "Query: {query} Document: {document} Output:"
    ),
    PromptKind.conditional_nonrelevant: (
        "For the following query and document, explain why they are nonrelevant. "
        "Query: {query} Document: {document} Output:"
    ),
    PromptKind.binary: (
        "For the following query and document, judge whether they are relevant "
        "or non-relevant. Output 'Relevant' or 'Nonrelevant'. "
        "Query: {query} Document: {document} Output:"
    ),
    PromptKind.rubric: (
        "Assign a relevance score to the following query and document according "
        "to this rubric. Answer with a single integer score.\n"
        "{rubric}\n"
        "Query: {query} Document: {document} Output:"
    ),
}


def build_prompt(kind: PromptKind, query: str, document: str, rubric: str | None = None) -> str:
    """Fill the fixed template for *kind*; rubric text required iff rubric kind."""
    kind = PromptKind(kind)
    if kind is PromptKind.rubric:
        if not rubric:
            raise ConfigError("rubric prompt requires rubric text")
        return PROMPT_TEMPLATES[kind].format(query=query, document=document, rubric=rubric)
    if rubric is not None:
        raise ConfigError(f"rubric text given for non-rubric prompt kind {kind.value}")
    return PROMPT_TEMPLATES[kind].format(query=query, document=document)


# Non-whitespace chunks; the label scan window is the first 10 of these.
_CHUNK_RE = re.compile(r"\S+")
_LABEL_WINDOW = 10
_EDGE_PUNCT = "\"'`*_.,:;!?()[]{}<>«»—–-"
_SEPARATORS = " \t\r\n.,:;!?—–-"


def _label_for_chunk(chunk: str) -> str | None:
    core = chunk.strip(_EDGE_PUNCT).lower()
    if core == "relevant":
        return LABEL_RELEVANT
    if core in ("nonrelevant", "non-relevant"):
        return LABEL_NONRELEVANT
    return None


def parse_literal(raw: str) -> tuple[str, str]:
    """Extract a relevance label and the remaining explanation.

    Scans the first 10 whitespace-separated chunks for a standalone
    "relevant" / "nonrelevant" / "non-relevant" (case-insensitive,
    surrounding punctuation ignored). The matched chunk plus adjacent
    separators are removed; if no label is found the whole text is the
    explanation and the label is "unparsed".
    """
    for i, match in enumerate(_CHUNK_RE.finditer(raw)):
        if i >= _LABEL_WINDOW:
            break
        label = _label_for_chunk(match.group())
        if label is None:
            continue
        prefix = raw[: match.start()]
        suffix = raw[match.end() :].lstrip(_SEPARATORS)
        if not prefix.strip():
            explanation = suffix
        else:
            explanation = prefix + suffix
        return label, explanation
    return LABEL_UNPARSED, raw


_INT_RE = re.compile(r"-?\d+")


def parse_rubric_score(raw: str, scale: tuple[int, int]) -> int:
    """First integer in *raw* that falls inside *scale*."""
    lo, hi = scale
    for match in _INT_RE.finditer(raw):
        value = int(match.group())
        if lo <= value <= hi:
            return value
    raise UnparseableScoreError(f"no integer in [{lo}, {hi}] found in {raw!r}")


@dataclass(frozen=True)
class NleSample:
    """One raw generation for a (query, document) pair, plus parse results.

    ``prompt_sha`` records which exact prompt produced the text and is
    part of the cache key.
    """

    query_id: str
    doc_id: str
    kind: str
    sample_index: int
    raw_text: str
    predicted_label: str
    explanation: str
    temperature: float
    model_id: str
    prompt_sha: str

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "doc_id": self.doc_id,
            "kind": self.kind,
            "sample_index": self.sample_index,
            "raw_text": self.raw_text,
            "predicted_label": self.predicted_label,
            "explanation": self.explanation,
            "temperature": self.temperature,
            "model_id": self.model_id,
            "prompt_sha": self.prompt_sha,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "NleSample":
        return cls(**{k: obj[k] for k in cls.__dataclass_fields__})


def make_sample(query_id, doc_id, kind, sample_index, raw_text, temperature, model_id, prompt_sha) -> NleSample:
    """Build a sample, parsing the label for label-bearing prompt kinds."""
    kind = PromptKind(kind)
    if kind in (PromptKind.literal, PromptKind.binary):
        label, explanation = parse_literal(raw_text)
    else:
        label, explanation = LABEL_UNPARSED, raw_text
    return NleSample(
        query_id=query_id,
        doc_id=doc_id,
        kind=kind.value,
        sample_index=sample_index,
        raw_text=raw_text,
        predicted_label=label,
        explanation=explanation,
        temperature=temperature,
        model_id=model_id,
        prompt_sha=prompt_sha,
    )


@dataclass(frozen=True)
class SamplerConfig:
    endpoint_url: str = ""
    model_id: str = "mock"
    temperature: float = 0.7
    max_output_tokens: int = 512
    request_timeout: float = 30.0
    max_in_flight: int = 4
    retry_budget: int = 2

    def __post_init__(self):
        if self.max_in_flight < 1:
            raise ConfigError("max_in_flight must be >= 1")
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")

    def to_dict(self) -> dict:
        return {
            "endpoint_url": self.endpoint_url,
            "model_id": self.model_id,
            "temperature": self.temperature,
            "max_output_tokens": self.max_output_tokens,
            "request_timeout": self.request_timeout,
            "max_in_flight": self.max_in_flight,
            "retry_budget": self.retry_budget,
        }


def prompt_sha(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


def _cache_key(sha: str, model_id: str, temperature: float, index: int) -> tuple:
    return (sha, model_id, repr(float(temperature)), index)


class SampleCache:
    """Append-only JSON Lines store of NleSample records.

    Appends are serialized through one lock; lookups never touch disk
    after the initial load, so warm-cache runs make zero network calls.
    """

    def __init__(self, path):
        self.path = path
        self._lock = threading.Lock()
        self._records: dict[tuple, NleSample] = {}
        if path is not None and os.path.exists(path):
            self._load()

    def _load(self) -> None:
        with open(self.path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    record = NleSample.from_dict(json.loads(line))
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise ParseError(f"bad cache line: {exc}", self.path, line_no)
                self._records[self._key(record)] = record

    @staticmethod
    def _key(record: NleSample) -> tuple:
        return _cache_key(record.prompt_sha, record.model_id, record.temperature, record.sample_index)

    def __len__(self) -> int:
        return len(self._records)

    def get(self, sha: str, model_id: str, temperature: float, index: int) -> NleSample | None:
        return self._records.get(_cache_key(sha, model_id, temperature, index))

    def put(self, record: NleSample) -> None:
        with self._lock:
            self._records[self._key(record)] = record
            if self.path is not None:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(record.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")


class HttpTransport:
    """OpenAI-compatible chat completion client."""

    def __init__(self, config: SamplerConfig, session=None):
        if not config.endpoint_url:
            raise ConfigError("http sampling requires an endpoint_url")
        self.config = config
        self.session = session or requests.Session()

    def complete(self, prompt: str, temperature: float, sample_index: int) -> str:
        payload = {
            "model": self.config.model_id,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": temperature,
            "max_tokens": self.config.max_output_tokens,
            "n": 1,
        }
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(API_KEY_ENV)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        try:
            response = self.session.post(
                self.config.endpoint_url,
                json=payload,
                headers=headers,
                timeout=self.config.request_timeout,
            )
        except requests.RequestException as exc:
            raise TransportError(f"request failed: {exc}") from exc
        if response.status_code != 200:
            raise EndpointError(response.status_code, response.text[:200])
        try:
            return response.json()["choices"][0]["message"]["content"]
        except (KeyError, IndexError, ValueError) as exc:
            raise EndpointError(response.status_code, f"malformed completion body: {exc}")


class ScriptedTransport:
    """Returns pre-written generations; greedy calls replay index 0.

    ``scripts`` maps a prompt to its list of generations, or a single
    list is used for every prompt.
    """

    def __init__(self, scripts):
        self.scripts = scripts
        self.calls = 0

    def _lines(self, prompt: str) -> list[str]:
        if isinstance(self.scripts, dict):
            if prompt not in self.scripts:
                raise ConfigError("no script for prompt")
            return self.scripts[prompt]
        return self.scripts

    def complete(self, prompt: str, temperature: float, sample_index: int) -> str:
        self.calls += 1
        lines = self._lines(prompt)
        index = 0 if temperature == 0 else sample_index
        if index >= len(lines):
            raise ConfigError(f"script exhausted at index {index}")
        return lines[index]


_MOCK_TEMPLATES = (
    "The document mentions {a} and {b} directly.",
    "Coverage of {a} looks thorough here.",
    "There is a passage about {a} near material on {b}.",
    "Reading closely, {a} matters more than {b}.",
    "One section treats {a} in depth.",
    "Only a brief aside touches {a}.",
    "The part about {b} answers what was asked regarding {a}.",
    "Nothing beyond {a} connects back to the request.",
)


class MockTransport:
    """Deterministic stand-in for a chat endpoint.

    The generation is a pure function of (seed, prompt, temperature,
    sample index): the mock extracts the query and document from the
    prompt, estimates relevance from token overlap, and composes an
    answer shaped like the prompt asks (label plus explanation, bare
    label, polarity-conditioned rationale, or a scalar grade). Greedy
    calls (temperature 0) ignore the sample index.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed

    def _rng(self, prompt: str, temperature: float, index: int) -> random.Random:
        material = f"{self.seed}|{temperature!r}|{index}|{prompt}".encode("utf-8")
        digest = hashlib.blake2b(material, digest_size=8).digest()
        return random.Random(int.from_bytes(digest, "little"))

    @staticmethod
    def _extract(prompt: str) -> tuple[str, str]:
        query = document = ""
        q = prompt.rfind("Query:")
        d = prompt.rfind("Document:")
        o = prompt.rfind("Output:")
        if 0 <= q < d < o:
            query = prompt[q + len("Query:") : d].strip()
            document = prompt[d + len("Document:") : o].strip()
        return query, document

    def _sentences(self, rng: random.Random, d_tokens: list[str], count: int) -> list[str]:
        out = []
        for _ in range(count):
            template = rng.choice(_MOCK_TEMPLATES)
            out.append(template.format(a=rng.choice(d_tokens), b=rng.choice(d_tokens)))
        return out

    def complete(self, prompt: str, temperature: float, sample_index: int) -> str:
        index = 0 if temperature == 0 else sample_index
        rng = self._rng(prompt, temperature, index)
        query, document = self._extract(prompt)
        q_tokens = set(tokenize(query))
        d_tokens = list(tokenize(document)) or ["nothing"]
        overlap = len(q_tokens & set(d_tokens)) / max(1, len(q_tokens))
        p_relevant = 0.15 + 0.7 * overlap
        if "integer score" in prompt:
            return f"Score: {min(3, int(round(3 * p_relevant)))}"
        greedy = temperature == 0
        is_relevant = p_relevant >= 0.5 if greedy else rng.random() < p_relevant
        n_sentences = 2 if greedy else 2 + rng.randrange(3)
        sentences = self._sentences(rng, d_tokens, n_sentences)
        if "explain why they are" in prompt:
            # Conditional prompt: rationale only, no label token.
            return " ".join(sentences)
        label = "Relevant." if is_relevant else "Nonrelevant."
        if "provide an explanation" not in prompt:
            return label  # binary classifier prompt
        return label + " " + " ".join(sentences)


class Sampler:
    """Cache-aware Monte Carlo sampler over one transport.

    Requesting n generations returns samples with indices 0..n-1: cache
    hits are served locally and only misses reach the transport, with at
    most ``max_in_flight`` concurrent requests. Each completed sample is
    appended to the cache before the call returns.
    """

    def __init__(self, config: SamplerConfig, transport, cache: SampleCache | None = None):
        self.config = config
        self.transport = transport
        self.cache = cache if cache is not None else SampleCache(None)

    def sample_records(
        self,
        prompt: str,
        n: int,
        *,
        temperature: float | None = None,
        query_id: str = "",
        doc_id: str = "",
        kind: PromptKind = PromptKind.literal,
    ) -> list[NleSample]:
        if n < 1:
            raise ConfigError("n must be >= 1")
        temp = self.config.temperature if temperature is None else float(temperature)
        sha = prompt_sha(prompt)
        results: dict[int, NleSample] = {}
        misses = []
        for index in range(n):
            cached = self.cache.get(sha, self.config.model_id, temp, index)
            if cached is not None:
                results[index] = cached
            else:
                misses.append(index)

        if misses:
            completed = [0]  # shared counter for partial-result reporting

            def fetch(index: int) -> NleSample:
                raw = self._complete_with_retries(prompt, temp, index)
                record = make_sample(
                    query_id, doc_id, kind, index, raw, temp, self.config.model_id, sha
                )
                self.cache.put(record)
                completed[0] += 1
                return record

            try:
                with ThreadPoolExecutor(max_workers=self.config.max_in_flight) as pool:
                    for index, record in zip(misses, pool.map(fetch, misses)):
                        results[index] = record
            except TransportError as exc:
                # Cache hits plus misses that completed before the failure.
                exc.partial_results = (n - len(misses)) + completed[0]
                raise
        return [results[i] for i in range(n)]

    def sample(self, prompt: str, n: int, **kw) -> list[str]:
        """Raw generation texts for the first n sample indices."""
        return [record.raw_text for record in self.sample_records(prompt, n, **kw)]

    def sample_greedy(self, prompt: str, **kw) -> NleSample:
        """Single temperature-0 sample (the most probable generation)."""
        return self.sample_records(prompt, 1, temperature=0.0, **kw)[0]

    def _complete_with_retries(self, prompt: str, temperature: float, index: int) -> str:
        last_error = None
        for attempt in range(self.config.retry_budget + 1):
            try:
                return self.transport.complete(prompt, temperature, index)
            except EndpointError:
                raise
            except TransportError as exc:
                last_error = exc
                logger.warning("transport failure (attempt %d/%d): %s", attempt + 1, self.config.retry_budget + 1, exc)
        raise TransportError(f"retry budget exhausted: {last_error}")


def make_transport(backend: str, config: SamplerConfig, mock_seed: int = 0):
    """Transport factory used by the pipeline configuration."""
    if backend == "http":
        return HttpTransport(config)
    if backend == "mock":
        return MockTransport(seed=mock_seed)
    raise ConfigError(f"unknown sampler backend {backend!r}")

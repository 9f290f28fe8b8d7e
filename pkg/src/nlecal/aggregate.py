"""Novelty-based aggregation of sampled explanations, and selection policies.

Aggregation grows one combined explanation per (query, document) pair by
walking sampled generations in order and admitting each sentence whose
maximum similarity to the already-admitted set is at or below a
threshold. The first sentence is always admitted (the set starts empty);
a sentence is skipped only when its similarity strictly exceeds the
threshold. Growth stops when either the sample budget or the sentence
budget is exhausted. Because disagreeing samples keep contributing novel
sentences while repetitive ones do not, the length of the result encodes
the sampler's uncertainty about the pair.

Three selection policies decide what the scorer sees for a pair: the
single most probable generation, the aggregate over Monte Carlo samples,
or an oracle that resamples until the parsed label matches the binarized
gold label (falling back to the greedy generation after a bounded number
of tries).
"""

import json
import logging
import math
from dataclasses import dataclass
from itertools import islice

from .errors import ConfigError, EmptyMetaError
from .llm import PromptKind, Sampler, build_prompt
from .textsim import Sentence, rouge_l, split_sentences

logger = logging.getLogger(__name__)

POLARITY_LITERAL = "literal"
POLARITY_RELEVANT = "relevant"
POLARITY_NONRELEVANT = "nonrelevant"

ORACLE_FALLBACK_FLAG = "oracle_fallback"


@dataclass(frozen=True)
class AggregationParams:
    """Similarity threshold and budgets for aggregation."""

    similarity_threshold: float = 0.35
    max_samples: int = 20  # generation budget per pair
    max_sentences: int = 30  # size cap of the combined explanation

    def __post_init__(self):
        if not 0.0 <= self.similarity_threshold <= 1.0:
            raise ConfigError("similarity_threshold must be in [0, 1]")
        if self.max_samples < 1 or self.max_sentences < 1:
            raise ConfigError("sample and sentence budgets must be >= 1")

    def to_dict(self) -> dict:
        return {
            "lambda": self.similarity_threshold,
            "k_l": self.max_samples,
            "k_s": self.max_sentences,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "AggregationParams":
        return cls(obj["lambda"], obj["k_l"], obj["k_s"])


@dataclass(frozen=True)
class MetaNle:
    """The aggregated, novelty-filtered explanation for one pair."""

    query_id: str
    doc_id: str
    polarity: str
    sentences: tuple[Sentence, ...]
    source_sample_count: int

    @property
    def text(self) -> str:
        return " ".join(s.text for s in self.sentences)

    def to_record(self, params: AggregationParams) -> dict:
        return {
            "query_id": self.query_id,
            "doc_id": self.doc_id,
            "polarity": self.polarity,
            "sentences": [s.text for s in self.sentences],
            "source_sample_count": self.source_sample_count,
            "params": params.to_dict(),
        }

    @classmethod
    def from_record(cls, obj: dict) -> "MetaNle":
        return cls(
            query_id=obj["query_id"],
            doc_id=obj["doc_id"],
            polarity=obj["polarity"],
            sentences=tuple(Sentence.from_text(t) for t in obj["sentences"]),
            source_sample_count=obj["source_sample_count"],
        )


def aggregate(
    samples,
    params: AggregationParams,
    *,
    query_id: str = "",
    doc_id: str = "",
    polarity: str = POLARITY_LITERAL,
) -> MetaNle:
    """Fold up to ``max_samples`` generations into one filtered explanation.

    ``samples`` is a lazy sequence of generation texts; it is consumed
    one element at a time and never beyond the sample budget, and
    consumption stops immediately once the sentence budget is reached.
    Yielding fewer samples than the budget is tolerated (and logged).
    Deterministic for a given sequence.
    """
    admitted: list[Sentence] = []
    consumed = 0
    for raw in islice(iter(samples), params.max_samples):
        consumed += 1
        for sentence in split_sentences(raw):
            if admitted:
                closest = max(rouge_l(sentence, kept) for kept in admitted)
                if closest > params.similarity_threshold:
                    continue
            admitted.append(sentence)
            if len(admitted) >= params.max_sentences:
                return MetaNle(query_id, doc_id, polarity, tuple(admitted), consumed)
    if consumed < params.max_samples:
        logger.debug("sample shortfall for %s/%s: %d of %d", query_id, doc_id, consumed, params.max_samples)
    if not admitted:
        raise EmptyMetaError(f"no usable sentences across {consumed} samples for {query_id}/{doc_id}")
    return MetaNle(query_id, doc_id, polarity, tuple(admitted), consumed)


@dataclass(frozen=True)
class SelectionStrategy:
    """How the per-pair explanation is chosen from the sampler."""

    kind: str = "aggregate_mc"  # most_probable | aggregate_mc | oracle
    max_tries: int = 20
    binarization_threshold: int | None = None  # oracle only; None = scale midpoint

    def __post_init__(self):
        if self.kind not in ("most_probable", "aggregate_mc", "oracle"):
            raise ConfigError(f"unknown selection strategy {self.kind!r}")
        if self.max_tries < 1:
            raise ConfigError("max_tries must be >= 1")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "max_tries": self.max_tries,
            "binarization_threshold": self.binarization_threshold,
        }


def default_binarization(scale: tuple[int, int]) -> int:
    """Grades at or above ceil((C-1)/2) count as relevant."""
    return math.ceil(scale[1] / 2)


def _single_sample_meta(sample, polarity: str) -> MetaNle:
    sentences = tuple(split_sentences(sample.explanation))
    return MetaNle(sample.query_id, sample.doc_id, polarity, sentences, 1)


def _explanation_stream(sampler: Sampler, prompt: str, pair, kind: PromptKind, budget: int):
    """Lazily sample one generation at a time, yielding explanation text.

    Incremental requests share the cache, so asking for prefixes of
    growing length costs exactly one new generation per step.
    """
    for i in range(budget):
        records = sampler.sample_records(
            prompt, i + 1, query_id=pair.query_id, doc_id=pair.doc_id, kind=kind
        )
        yield records[i].explanation


def select(
    pair,
    strategy: SelectionStrategy,
    sampler: Sampler,
    params: AggregationParams,
    *,
    mode: str = "literal",
    scale: tuple[int, int] = (0, 3),
) -> tuple[list[MetaNle], list[str]]:
    """Produce the explanation(s) for one judged pair.

    Literal mode returns one explanation; conditional mode returns
    exactly two (relevant then nonrelevant polarity). The returned flags
    record oracle fallbacks. Sampler transport errors propagate.
    """
    flags: list[str] = []
    if mode == "conditional":
        if strategy.kind == "oracle":
            raise ConfigError("oracle selection needs parseable labels; use literal mode")
        metas = []
        for kind, polarity in (
            (PromptKind.conditional_relevant, POLARITY_RELEVANT),
            (PromptKind.conditional_nonrelevant, POLARITY_NONRELEVANT),
        ):
            prompt = build_prompt(kind, pair.query, pair.text)
            metas.append(_select_one(pair, strategy, sampler, params, prompt, kind, polarity, scale, flags))
        return metas, flags
    if mode != "literal":
        raise ConfigError(f"unknown explanation mode {mode!r}")
    prompt = build_prompt(PromptKind.literal, pair.query, pair.text)
    meta = _select_one(pair, strategy, sampler, params, prompt, PromptKind.literal, POLARITY_LITERAL, scale, flags)
    return [meta], flags


def _select_one(pair, strategy, sampler, params, prompt, kind, polarity, scale, flags) -> MetaNle:
    if strategy.kind == "most_probable":
        record = sampler.sample_greedy(prompt, query_id=pair.query_id, doc_id=pair.doc_id, kind=kind)
        return _single_sample_meta(record, polarity)
    if strategy.kind == "aggregate_mc":
        stream = _explanation_stream(sampler, prompt, pair, kind, params.max_samples)
        return aggregate(stream, params, query_id=pair.query_id, doc_id=pair.doc_id, polarity=polarity)
    # oracle: resample until the parsed label matches the binarized gold label
    threshold = strategy.binarization_threshold
    if threshold is None:
        threshold = default_binarization(scale)
    if pair.label is None:
        raise ConfigError("oracle selection requires gold labels")
    target = "relevant" if pair.label >= threshold else "nonrelevant"
    for i in range(strategy.max_tries):
        records = sampler.sample_records(
            prompt, i + 1, query_id=pair.query_id, doc_id=pair.doc_id, kind=kind
        )
        if records[i].predicted_label == target:
            return _single_sample_meta(records[i], polarity)
    flags.append(f"{ORACLE_FALLBACK_FLAG}:{pair.query_id}:{pair.doc_id}")
    record = sampler.sample_greedy(prompt, query_id=pair.query_id, doc_id=pair.doc_id, kind=kind)
    return _single_sample_meta(record, polarity)


def save_metas(metas: list[MetaNle], params: AggregationParams, path) -> None:
    """Persist explanations as JSON Lines with their parameters."""
    with open(path, "w", encoding="utf-8") as fh:
        for meta in metas:
            fh.write(json.dumps(meta.to_record(params), ensure_ascii=False, sort_keys=True) + "\n")


def load_metas(path) -> list[MetaNle]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(MetaNle.from_record(json.loads(line)))
    return out

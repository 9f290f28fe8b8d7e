"""Synthetic judged collections for desk-scale experiments and tests.

Documents are built so that their token overlap with the query grows
with the relevance grade; the mock sampler keys off the same overlap, so
end-to-end runs on synthetic data carry real (if noisy) signal from
labels through explanations to trained scores.
"""

import random

from .corpus import JudgedCollection, RunRecord

_TOPICS = (
    "solar panel efficiency",
    "ancient roman aqueducts",
    "deep sea bioluminescence",
    "sourdough fermentation chemistry",
    "electric vehicle batteries",
    "coral reef restoration",
    "quantum error correction",
    "urban rainwater harvesting",
    "migratory bird navigation",
    "fiber optic attenuation",
    "volcanic soil agriculture",
    "glacier mass balance",
    "honeybee colony behavior",
    "desert solar farms",
    "antibiotic resistance genes",
    "tidal energy turbines",
)

_NOISE = (
    "meanwhile other unrelated matters took place nearby",
    "a committee met to discuss scheduling and logistics",
    "the archive holds miscellaneous records of little note",
    "various paperwork was filed without further comment",
    "an overview of general topics appears elsewhere",
)


def make_synthetic_collection(
    n_queries: int = 12,
    docs_per_query: int = 6,
    n_grades: int = 4,
    seed: int = 0,
    split_counts: tuple[int, int, int] = (6, 3, 3),
) -> dict[str, JudgedCollection]:
    """Build train/validation/test collections over ``n_queries`` queries.

    Grades cycle over each query's documents so every query has labeled
    documents across the scale (no all-zero queries).
    """
    if sum(split_counts) != n_queries:
        raise ValueError("split_counts must sum to n_queries")
    rng = random.Random(seed)
    scale = (0, n_grades - 1)
    split_of = (
        ["train"] * split_counts[0] + ["validation"] * split_counts[1] + ["test"] * split_counts[2]
    )
    buckets = {s: {"queries": {}, "docs": {}, "labels": {}} for s in ("train", "validation", "test")}
    for qi in range(n_queries):
        qid = f"q{qi:03d}"
        topic = _TOPICS[qi % len(_TOPICS)]
        query = f"what explains {topic}"
        split = split_of[qi]
        bucket = buckets[split]
        bucket["queries"][qid] = query
        topic_words = topic.split()
        for di in range(docs_per_query):
            did = f"d{qi:03d}_{di}"
            grade = di % n_grades
            # Overlap with the query grows with the grade.
            on_topic = []
            for g in range(grade + 1):
                on_topic.append(f"this text covers {' '.join(topic_words[: g + 1])} in detail")
            off_topic = [rng.choice(_NOISE) for _ in range(n_grades - grade)]
            body = on_topic + off_topic
            rng.shuffle(body)
            bucket["docs"][(qid, did)] = ". ".join(body) + "."
            bucket["labels"][(qid, did)] = grade
    return {
        s: JudgedCollection(
            queries=b["queries"], docs=b["docs"], labels=b["labels"], scale=scale, split=s
        )
        for s, b in buckets.items()
        if b["labels"]
    }


def make_overlap_run(collections: dict[str, JudgedCollection], seed: int = 0, tag: str = "overlap") -> list[RunRecord]:
    """A baseline run scoring documents by noisy query-document overlap.

    Stands in for a frozen first-stage ranker when exercising the
    evaluation-only and post-hoc calibration paths.
    """
    from .textsim import tokenize

    rng = random.Random(seed)
    records = []
    for collection in collections.values():
        for qid in collection.query_ids():
            q_tokens = set(tokenize(collection.queries[qid]))
            scored = []
            for (q, did), text in sorted(collection.docs.items()):
                if q != qid:
                    continue
                overlap = len(q_tokens & set(tokenize(text))) / max(1, len(q_tokens))
                scored.append((did, 4.0 * overlap + rng.uniform(-0.2, 0.2)))
            scored.sort(key=lambda r: (-r[1], r[0]))
            for rank, (did, score) in enumerate(scored, 1):
                records.append(RunRecord(qid, did, rank, score, tag))
    return records


DEFAULT_RUBRIC = """Score 3: the document directly and completely answers the query.
Score 2: the document answers the query but with unclear or extra material.
Score 1: the document is on topic but does not answer the query.
Score 0: the document is unrelated to the query."""

"""Judged ranking collections and TREC-format file I/O.

Formats follow the classic plain-text conventions:

* qrels:  ``<qid> <iter> <docid> <rel>`` whitespace-separated
* run:    ``<qid> Q0 <docid> <rank> <score> <tag>``
* pairs:  JSON Lines, one object per line with fields
          query_id, query, doc_id, text, label, split

Loaders are pure functions; the resulting collections are immutable in
practice and safe to share across threads.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ParseError, ValidationError

logger = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")

_PAIR_FIELDS = ("query_id", "query", "doc_id", "text", "label", "split")


@dataclass(frozen=True)
class RunRecord:
    """One row of a ranking run file."""

    query_id: str
    doc_id: str
    rank: int
    score: float
    tag: str = "run"


@dataclass(frozen=True)
class QueryDocPair:
    """A judged (query, document) pair with its graded label."""

    query_id: str
    query: str
    doc_id: str
    text: str
    label: int
    split: str


@dataclass
class JudgedCollection:
    """Queries, their candidate documents, and graded relevance labels.

    ``scale`` is the inclusive label range [0, C-1]. A collection holds a
    single split; multi-split pairs files are loaded one split at a time.
    """

    queries: dict[str, str]
    docs: dict[tuple[str, str], str]
    labels: dict[tuple[str, str], int]
    scale: tuple[int, int]
    split: str = "train"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.split not in SPLITS:
            raise ValidationError(f"unknown split {self.split!r}")
        lo, hi = self.scale
        if lo != 0 or hi < lo:
            raise ValidationError(f"scale must be [0, C-1], got {self.scale}")
        if not self.labels:
            raise ValidationError("empty collection")
        offenders = [(k, v) for k, v in self.labels.items() if not lo <= v <= hi]
        if offenders:
            listing = ", ".join(f"{q}/{d}={v}" for (q, d), v in offenders[:20])
            raise ValidationError(f"labels outside scale {self.scale}: {listing}")
        for qid, doc_id in self.labels:
            if qid not in self.queries:
                raise ValidationError(f"labeled pair ({qid}, {doc_id}) has no query text")
            if (qid, doc_id) not in self.docs:
                raise ValidationError(f"labeled pair ({qid}, {doc_id}) has no document text")
        labeled = {qid for qid, _ in self.labels}
        orphans = set(self.queries) - labeled
        if orphans:
            raise ValidationError(f"queries without labeled documents: {sorted(orphans)[:10]}")

    @property
    def num_classes(self) -> int:
        return self.scale[1] + 1

    def query_ids(self) -> list[str]:
        return sorted(self.queries)

    def pairs(self) -> list[QueryDocPair]:
        """All judged pairs, ordered by (query_id, doc_id)."""
        return [
            QueryDocPair(qid, self.queries[qid], did, self.docs[(qid, did)], label, self.split)
            for (qid, did), label in sorted(self.labels.items())
        ]

    def pairs_for_query(self, qid: str) -> list[QueryDocPair]:
        return [p for p in self.pairs() if p.query_id == qid]


def load_qrels(path) -> dict[tuple[str, str], int]:
    """Parse a TREC qrels file into a (query_id, doc_id) -> grade map.

    Duplicate judgments keep the last occurrence and log a warning.
    """
    judgments: dict[tuple[str, str], int] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            fields = line.split()
            if len(fields) != 4:
                raise ParseError(f"expected 4 fields, got {len(fields)}", path, line_no)
            qid, _iteration, doc_id, rel = fields
            try:
                grade = int(rel)
            except ValueError:
                raise ParseError(f"relevance grade {rel!r} is not an integer", path, line_no)
            if grade < 0:
                raise ValidationError(f"{path}:{line_no}: negative grade {grade} for {qid}/{doc_id}")
            key = (qid, doc_id)
            if key in judgments:
                logger.warning("duplicate judgment for %s/%s at line %d; keeping last", qid, doc_id, line_no)
            judgments[key] = grade
    return judgments


def save_qrels(judgments: dict[tuple[str, str], int], path) -> None:
    """Write judgments in canonical order (query_id, doc_id ascending)."""
    with open(path, "w", encoding="utf-8") as fh:
        for (qid, doc_id), grade in sorted(judgments.items()):
            fh.write(f"{qid} 0 {doc_id} {grade}\n")


def load_run(path) -> list[RunRecord]:
    """Parse a TREC run file into rank-consistent records.

    Records are grouped by query in order of first appearance; within a
    query they are re-sorted by descending score (ties broken by doc_id
    ascending) and ranks are recomputed 1..n, so the output is always a
    valid ranking regardless of the ranks stored in the file.
    """
    by_query: dict[str, list[tuple[str, float, str]]] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            fields = line.split()
            if len(fields) != 6:
                raise ParseError(f"expected 6 fields, got {len(fields)}", path, line_no)
            qid, _q0, doc_id, rank, score, tag = fields
            try:
                int(rank)
                parsed_score = float(score)
            except ValueError:
                raise ParseError(f"non-numeric rank/score in {rank!r} {score!r}", path, line_no)
            by_query.setdefault(qid, []).append((doc_id, parsed_score, tag))
    records = []
    for qid, rows in by_query.items():
        rows.sort(key=lambda r: (-r[1], r[0]))
        for new_rank, (doc_id, score, tag) in enumerate(rows, 1):
            records.append(RunRecord(qid, doc_id, new_rank, score, tag))
    return records


def save_run(records: list[RunRecord], path) -> None:
    """Write records sorted by (query_id, rank). Scores use repr round-trip."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in sorted(records, key=lambda r: (r.query_id, r.rank)):
            fh.write(f"{rec.query_id} Q0 {rec.doc_id} {rec.rank} {rec.score!r} {rec.tag}\n")


def run_from_scores(scores: dict[tuple[str, str], float], tag: str = "run") -> list[RunRecord]:
    """Build a valid run (descending score, doc_id tiebreak) from a score map."""
    by_query: dict[str, list[tuple[str, float]]] = {}
    for (qid, doc_id), score in scores.items():
        by_query.setdefault(qid, []).append((doc_id, score))
    records = []
    for qid in sorted(by_query):
        rows = sorted(by_query[qid], key=lambda r: (-r[1], r[0]))
        for rank, (doc_id, score) in enumerate(rows, 1):
            records.append(RunRecord(qid, doc_id, rank, float(score), tag))
    return records


def _parse_pair_line(obj, path, line_no) -> QueryDocPair:
    missing = [f for f in _PAIR_FIELDS if f not in obj]
    if missing:
        raise ParseError(f"missing fields {missing}", path, line_no)
    label = obj["label"]
    if not isinstance(label, int) or isinstance(label, bool):
        raise ParseError(f"label {label!r} is not an integer", path, line_no)
    split = obj["split"]
    if split not in SPLITS:
        raise ParseError(f"unknown split {split!r}", path, line_no)
    return QueryDocPair(
        query_id=str(obj["query_id"]),
        query=str(obj["query"]),
        doc_id=str(obj["doc_id"]),
        text=str(obj["text"]),
        label=label,
        split=split,
    )


def _read_pairs_file(path) -> list[QueryDocPair]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", path, line_no)
            rows.append(_parse_pair_line(obj, path, line_no))
    return rows


def _assemble(rows: list[QueryDocPair], scale: tuple[int, int], split: str) -> JudgedCollection:
    queries: dict[str, str] = {}
    docs: dict[tuple[str, str], str] = {}
    labels: dict[tuple[str, str], int] = {}
    for row in rows:
        queries[row.query_id] = row.query
        docs[(row.query_id, row.doc_id)] = row.text
        labels[(row.query_id, row.doc_id)] = row.label
    return JudgedCollection(queries=queries, docs=docs, labels=labels, scale=scale, split=split)


def load_pairs(path, split: str | None = None, scale: tuple[int, int] | None = None) -> JudgedCollection:
    """Load a pairs JSONL file into a JudgedCollection.

    The scale is inferred as [0, max label over the whole file] unless
    overridden, so all splits of one file share a scale. When the file
    holds several splits, ``split`` selects which one to assemble.
    """
    rows = _read_pairs_file(path)
    if not rows:
        raise ValidationError(f"{path}: empty collection")
    inferred = (0, max(r.label for r in rows))
    effective = scale or inferred
    offenders = [r for r in rows if not effective[0] <= r.label <= effective[1]]
    if offenders:
        listing = ", ".join(f"{r.query_id}/{r.doc_id}={r.label}" for r in offenders[:20])
        raise ValidationError(f"{path}: labels outside scale {effective}: {listing}")
    present = sorted({r.split for r in rows}, key=SPLITS.index)
    if split is None:
        if len(present) > 1:
            raise ValidationError(f"{path}: file holds splits {present}; pass split= to choose one")
        split = present[0]
    selected = [r for r in rows if r.split == split]
    if not selected:
        raise ValidationError(f"{path}: no rows for split {split!r}")
    return _assemble(selected, effective, split)


def load_pair_splits(path, scale: tuple[int, int] | None = None) -> dict[str, JudgedCollection]:
    """Load every split present in a pairs file, sharing one scale."""
    rows = _read_pairs_file(path)
    if not rows:
        raise ValidationError(f"{path}: empty collection")
    effective = scale or (0, max(r.label for r in rows))
    present = sorted({r.split for r in rows}, key=SPLITS.index)
    return {s: load_pairs(path, split=s, scale=effective) for s in present}


def save_pairs(collections, path) -> None:
    """Write one or more collections as canonical pairs JSONL.

    Rows are ordered by (split order, query_id, doc_id) with a fixed key
    order, so saving the result of a load reproduces the file byte for byte.
    """
    if isinstance(collections, JudgedCollection):
        collections = [collections]
    rows: list[QueryDocPair] = []
    for col in collections:
        rows.extend(col.pairs())
    rows.sort(key=lambda r: (SPLITS.index(r.split), r.query_id, r.doc_id))
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            obj = {
                "query_id": r.query_id,
                "query": r.query,
                "doc_id": r.doc_id,
                "text": r.text,
                "label": r.label,
                "split": r.split,
            }
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")

#!/usr/bin/env python3
"""Generate a synthetic judged collection plus companion files.

Writes pairs.jsonl (train/validation/test splits), a TREC-format qrels
file, an overlap-scored baseline run, and a grading rubric into the
output directory. These are the inputs every pipeline method needs, so
the full method grid can run offline against the mock sampler.
"""

import argparse
from pathlib import Path

from nlecal.corpus import save_pairs, save_qrels, save_run
from nlecal.synth import DEFAULT_RUBRIC, make_overlap_run, make_synthetic_collection


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out", type=Path, help="output directory")
    ap.add_argument("--queries", type=int, default=12)
    ap.add_argument("--docs-per-query", type=int, default=6)
    ap.add_argument("--grades", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    args.out.mkdir(parents=True, exist_ok=True)
    n_train = args.queries - 2 * (args.queries // 4)
    split_counts = (n_train, args.queries // 4, args.queries // 4)
    collections = make_synthetic_collection(
        n_queries=args.queries,
        docs_per_query=args.docs_per_query,
        n_grades=args.grades,
        seed=args.seed,
        split_counts=split_counts,
    )
    save_pairs(list(collections.values()), args.out / "pairs.jsonl")
    qrels = {}
    for col in collections.values():
        qrels.update(col.labels)
    save_qrels(qrels, args.out / "qrels.txt")
    save_run(make_overlap_run(collections, seed=args.seed + 1), args.out / "run.txt")
    (args.out / "rubric.txt").write_text(DEFAULT_RUBRIC + "\n", encoding="utf-8")
    total_pairs = sum(len(c.labels) for c in collections.values())
    print(f"wrote {args.queries} queries / {total_pairs} pairs to {args.out}")


if __name__ == "__main__":
    main()

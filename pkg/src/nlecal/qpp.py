"""Post-hoc query performance prediction from ranking scores.

Two score-based predictors are computed per query over its candidate
list, then correlated against per-query retrieval effectiveness
(nDCG@k). Both are functions of the run alone:

* WIG: mean excess of the top-k scores over the query's candidate mean,
  (1/k') * sum_{i<=k'} (s_i - mu_q). Shifting all scores of a query moves
  mu_q by the same amount, so WIG is shift invariant and scales linearly
  with the scores; it only becomes comparable across queries once the
  scores share a scale.
* NQC: population standard deviation of the top-k scores divided by
  max(|mu_q|, 1e-9). The normalizer makes NQC shift sensitive, which is
  exactly where calibrated scores help.

mu_q is the mean over all of the query's candidates; no corpus-level
statistics or query-length normalization are used, so the predictors are
reproducible from the run file alone (this simplification is recorded in
emitted reports).
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientDataError, UndefinedCorrelationError
from .metrics import kendall, ndcg, pearson

_EPS = 1e-9

PREDICTORS = ("wig", "nqc")
CORRELATIONS = ("pearson", "kendall")


def wig(scores_for_query, k: int) -> float:
    """Weighted information gain of a descending score vector."""
    s = np.asarray(scores_for_query, dtype=float)
    if s.size == 0:
        raise InsufficientDataError("wig of an empty score list")
    top = s[: min(k, s.size)]
    return float(np.mean(top - s.mean()))


def nqc(scores_for_query, k: int) -> float:
    """Normalized query commitment of a descending score vector."""
    s = np.asarray(scores_for_query, dtype=float)
    if s.size == 0:
        raise InsufficientDataError("nqc of an empty score list")
    top = s[: min(k, s.size)]
    return float(np.std(top) / max(abs(float(s.mean())), _EPS))


@dataclass
class QppResult:
    """Per-query predictor values and their correlation with effectiveness.

    ``correlations[predictor][stat]`` is None when the correlation is
    undefined (constant input); the slot is recorded in ``flags``.
    """

    per_query: dict[str, dict[str, float]]
    correlations: dict[str, dict[str, float | None]]
    k: int = 10
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "per_query": self.per_query,
            "correlations": self.correlations,
            "k": self.k,
            "flags": self.flags,
        }


def evaluate_qpp(run_records, qrels: dict[tuple[str, str], int], k: int = 10) -> QppResult:
    """Correlate WIG/NQC with actual per-query nDCG@k.

    ``run_records`` must be a valid ranking (as produced by the run
    loader); documents absent from ``qrels`` count as grade 0. Queries
    must be shared between run and qrels; fewer than 2 shared queries is
    an error. Undefined correlation slots are surfaced, not raised.
    """
    by_query: dict[str, list] = {}
    for rec in run_records:
        by_query.setdefault(rec.query_id, []).append(rec)
    judged_queries = {qid for qid, _ in qrels}
    shared = sorted(set(by_query) & judged_queries)
    if len(shared) < 2:
        raise InsufficientDataError(f"only {len(shared)} queries shared between run and qrels")

    per_query: dict[str, dict[str, float]] = {}
    for qid in shared:
        records = sorted(by_query[qid], key=lambda r: r.rank)
        scores = [r.score for r in records]
        labels = [qrels.get((qid, r.doc_id), 0) for r in records]
        per_query[qid] = {
            "wig": wig(scores, k),
            "nqc": nqc(scores, k),
            "actual": ndcg(labels, k=k),
        }

    actual = [per_query[q]["actual"] for q in shared]
    correlations: dict[str, dict[str, float | None]] = {}
    flags: list[str] = []
    for predictor in PREDICTORS:
        values = [per_query[q][predictor] for q in shared]
        correlations[predictor] = {}
        for stat_name, stat_fn in (("pearson", pearson), ("kendall", kendall)):
            try:
                correlations[predictor][stat_name] = stat_fn(values, actual)
            except UndefinedCorrelationError:
                correlations[predictor][stat_name] = None
                flags.append(f"undefined_correlation:{predictor}:{stat_name}")
    return QppResult(per_query=per_query, correlations=correlations, k=k, flags=flags)


def write_qpp_csv(rows: list[tuple[str, QppResult]], path) -> None:
    """Emit correlations as a method-by-predictor table.

    One row per (method, result); columns are WIG/NQC crossed with
    Pearson and Kendall. Undefined slots are left empty.
    """
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "wig_pearson", "wig_kendall", "nqc_pearson", "nqc_kendall"])
        for method, result in rows:
            cells = [method]
            for predictor in PREDICTORS:
                for stat_name in CORRELATIONS:
                    value = result.correlations.get(predictor, {}).get(stat_name)
                    cells.append("" if value is None else f"{value:.6f}")
            writer.writerow(cells)

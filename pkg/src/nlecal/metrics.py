"""Ranking, calibration, and correlation metrics.

Conventions:

* nDCG uses exponential gain (2^rel - 1) with a log2(rank + 1) discount;
  a linear gain is available for collections where exponential gain is
  inappropriate. A list whose ideal DCG is zero scores 1.0 by convention
  (callers flag this case).
* Calibration error bins are equal-mass over predictions sorted
  ascending (ties broken by label, then input order): with M requested
  bins the first n mod M bins receive one extra element. The
  class-balanced variant averages per-grade errors, charging empty grades
  the distance from the grade value to the global mean prediction so that
  a predictor that never covers part of the scale cannot score well.
* Correlations are Pearson product-moment and tie-corrected Kendall
  tau-b, delegated to scipy.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import UndefinedCorrelationError, ValidationError

BIN_SCHEME = "equal-mass-by-sorted-prediction"


@dataclass(frozen=True)
class BinStat:
    mean_prediction: float
    mean_label: float
    count: int


@dataclass(frozen=True)
class ReliabilityBins:
    """Per-bin reliability data backing a calibration diagram."""

    bins: tuple[BinStat, ...]
    requested_bins: int
    scheme: str = BIN_SCHEME

    @property
    def total(self) -> int:
        return sum(b.count for b in self.bins)

    def rows(self) -> list[tuple[float, float, int]]:
        return [(b.mean_prediction, b.mean_label, b.count) for b in self.bins]


def _as_vector(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1:
        raise ValidationError(f"{name} must be one-dimensional")
    return arr


def dcg(ranked_labels, k: int | None = None, gain: str = "exp") -> float:
    """Discounted cumulative gain of labels in ranked order."""
    labels = _as_vector(ranked_labels, "ranked_labels")
    if k is not None:
        labels = labels[:k]
    if gain == "exp":
        gains = np.power(2.0, labels) - 1.0
    elif gain == "linear":
        gains = labels
    else:
        raise ValidationError(f"unknown gain {gain!r}")
    discounts = 1.0 / np.log2(np.arange(2, labels.size + 2))
    return float(np.dot(gains, discounts))


def ndcg(ranked_labels, k: int | None = None, gain: str = "exp") -> float:
    """Normalized DCG in [0, 1]; 1.0 when the ideal DCG is zero."""
    labels = _as_vector(ranked_labels, "ranked_labels")
    if labels.size == 0:
        raise ValidationError("ndcg of an empty list")
    ideal = np.sort(labels)[::-1]
    idcg = dcg(ideal, k=k, gain=gain)
    if idcg == 0.0:
        return 1.0
    return dcg(labels, k=k, gain=gain) / idcg


def _sorted_equal_mass_bins(predictions: np.ndarray, labels: np.ndarray, bins: int) -> list[np.ndarray]:
    n = predictions.size
    order = sorted(range(n), key=lambda i: (predictions[i], labels[i], i))
    m = min(bins, n)
    base, extra = divmod(n, m)
    out = []
    start = 0
    for b in range(m):
        size = base + (1 if b < extra else 0)
        out.append(np.array(order[start : start + size], dtype=int))
        start += size
    return out


def ece(predictions, labels, bins: int = 10) -> tuple[float, ReliabilityBins]:
    """Expected calibration error over sorted equal-mass buckets.

    Returns the scalar error together with the reliability bins, i.e.
    sum over buckets of (|B|/n) * |mean label - mean prediction|.
    """
    preds = _as_vector(predictions, "predictions")
    labs = _as_vector(labels, "labels")
    if preds.size != labs.size:
        raise ValidationError(f"length mismatch: {preds.size} predictions vs {labs.size} labels")
    if preds.size == 0:
        raise ValidationError("ece of empty input")
    if bins < 1:
        raise ValidationError("bins must be >= 1")
    stats_out = []
    total = 0.0
    for idx in _sorted_equal_mass_bins(preds, labs, bins):
        mp = float(preds[idx].mean())
        ml = float(labs[idx].mean())
        stats_out.append(BinStat(mean_prediction=mp, mean_label=ml, count=int(idx.size)))
        total += (idx.size / preds.size) * abs(ml - mp)
    return total, ReliabilityBins(bins=tuple(stats_out), requested_bins=bins)


def per_class_ece(predictions, labels, scale: tuple[int, int], bins: int = 10) -> np.ndarray:
    """ECE restricted to each grade; empty grades are charged the distance
    from the grade value to the mean of all predictions."""
    preds = _as_vector(predictions, "predictions")
    labs = _as_vector(labels, "labels")
    if preds.size != labs.size:
        raise ValidationError(f"length mismatch: {preds.size} predictions vs {labs.size} labels")
    if not np.all(labs == np.round(labs)):
        raise ValidationError("class-balanced ECE needs integral labels")
    lo, hi = scale
    if labs.size and (labs.min() < lo or labs.max() > hi):
        raise ValidationError(f"labels outside scale {scale}")
    global_mean = float(preds.mean())
    out = np.zeros(hi - lo + 1)
    for c in range(lo, hi + 1):
        mask = labs == c
        size = int(mask.sum())
        if size == 0:
            out[c - lo] = abs(c - global_mean)
        else:
            value, _ = ece(preds[mask], labs[mask], bins=min(bins, size))
            out[c - lo] = value
    return out


def cb_ece(predictions, labels, scale: tuple[int, int], bins: int = 10) -> float:
    """Class-balanced ECE: the mean of per-grade calibration errors."""
    return float(per_class_ece(predictions, labels, scale, bins=bins).mean())


def mse(predictions, labels) -> float:
    """Mean squared error."""
    preds = _as_vector(predictions, "predictions")
    labs = _as_vector(labels, "labels")
    if preds.size != labs.size:
        raise ValidationError(f"length mismatch: {preds.size} predictions vs {labs.size} labels")
    if preds.size == 0:
        raise ValidationError("mse of empty input")
    return float(np.mean((preds - labs) ** 2))


def pearson(x, y) -> float:
    """Pearson product-moment correlation."""
    xv = _as_vector(x, "x")
    yv = _as_vector(y, "y")
    if xv.size != yv.size or xv.size < 2:
        raise ValidationError("pearson needs two equal-length vectors of size >= 2")
    if np.ptp(xv) == 0 or np.ptp(yv) == 0:
        raise UndefinedCorrelationError("zero variance input to pearson")
    with warnings.catch_warnings():
        # Exact degeneracy is guarded above; near-constant inputs are a
        # legitimate (if weak) signal for QPP predictors.
        warnings.simplefilter("ignore", stats.NearConstantInputWarning)
        return float(stats.pearsonr(xv, yv).statistic)


def kendall(x, y) -> float:
    """Kendall tau-b (tie-corrected) rank correlation."""
    xv = _as_vector(x, "x")
    yv = _as_vector(y, "y")
    if xv.size != yv.size or xv.size < 2:
        raise ValidationError("kendall needs two equal-length vectors of size >= 2")
    if np.ptp(xv) == 0 or np.ptp(yv) == 0:
        raise UndefinedCorrelationError("zero variance input to kendall")
    return float(stats.kendalltau(xv, yv, variant="b").statistic)


@dataclass
class EvalReport:
    """Ranking and calibration metrics for one scored test split."""

    ndcg: float
    ndcg_at_10: float
    mse: float
    ece: float
    cb_ece: float
    per_query_ndcg_at_10: dict
    reliability: ReliabilityBins
    per_class_ece: list
    flags: list

    def to_dict(self) -> dict:
        return {
            "ndcg": self.ndcg,
            "ndcg_at_10": self.ndcg_at_10,
            "mse": self.mse,
            "ece": self.ece,
            "cb_ece": self.cb_ece,
            "per_query_ndcg_at_10": self.per_query_ndcg_at_10,
            "reliability": {
                "scheme": self.reliability.scheme,
                "requested_bins": self.reliability.requested_bins,
                "bins": [
                    {"mean_prediction": b.mean_prediction, "mean_label": b.mean_label, "count": b.count}
                    for b in self.reliability.bins
                ],
            },
            "per_class_ece": self.per_class_ece,
            "flags": self.flags,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "EvalReport":
        rel = obj["reliability"]
        bins = ReliabilityBins(
            bins=tuple(BinStat(b["mean_prediction"], b["mean_label"], b["count"]) for b in rel["bins"]),
            requested_bins=rel["requested_bins"],
            scheme=rel["scheme"],
        )
        return cls(
            ndcg=obj["ndcg"],
            ndcg_at_10=obj["ndcg_at_10"],
            mse=obj["mse"],
            ece=obj["ece"],
            cb_ece=obj["cb_ece"],
            per_query_ndcg_at_10=obj["per_query_ndcg_at_10"],
            reliability=bins,
            per_class_ece=obj["per_class_ece"],
            flags=obj.get("flags", []),
        )


def evaluate_predictions(
    predictions: dict,
    labels: dict,
    scale: tuple[int, int],
    bins: int = 10,
    k: int = 10,
    gain: str = "exp",
) -> EvalReport:
    """Full metric suite over (query_id, doc_id)-keyed predictions.

    Per-query rankings order documents by descending prediction with
    doc_id as the tiebreak; pooled calibration metrics run over every
    labeled pair. Queries whose labels are all zero rank as 1.0 by the
    nDCG convention and are flagged.
    """
    keys = sorted(labels)
    missing = [key for key in keys if key not in predictions]
    if missing:
        raise ValidationError(f"predictions missing for {len(missing)} labeled pairs, e.g. {missing[:3]}")
    preds = np.array([predictions[key] for key in keys], dtype=float)
    labs = np.array([labels[key] for key in keys], dtype=float)

    flags = []
    per_query_full = {}
    per_query_at_k = {}
    by_query: dict[str, list] = {}
    for qid, did in keys:
        by_query.setdefault(qid, []).append(did)
    for qid, dids in by_query.items():
        ranked = sorted(dids, key=lambda d: (-predictions[(qid, d)], d))
        ranked_labels = [labels[(qid, d)] for d in ranked]
        if max(ranked_labels) == 0:
            flags.append(f"all_zero_labels:{qid}")
        per_query_full[qid] = ndcg(ranked_labels, gain=gain)
        per_query_at_k[qid] = ndcg(ranked_labels, k=k, gain=gain)

    ece_value, reliability = ece(preds, labs, bins=bins)
    per_class = per_class_ece(preds, labs, scale, bins=bins)
    empty_classes = [c for c in range(scale[0], scale[1] + 1) if not np.any(labs == c)]
    flags.extend(f"empty_class:{c}" for c in empty_classes)
    return EvalReport(
        ndcg=float(np.mean(list(per_query_full.values()))),
        ndcg_at_10=float(np.mean(list(per_query_at_k.values()))),
        mse=mse(preds, labs),
        ece=ece_value,
        cb_ece=float(per_class.mean()),
        per_query_ndcg_at_10=per_query_at_k,
        reliability=reliability,
        per_class_ece=[float(v) for v in per_class],
        flags=flags,
    )

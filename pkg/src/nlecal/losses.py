"""Query-level training objectives and the trainable explanation scorer.

Four objectives are supported, all differentiable in the score vector of
one query's candidate list:

* ``mse``: pointwise regression, L = (1/n) sum (s_i - y_i)^2.
* ``softmax``: listwise cross entropy against proportional targets
  p_i = y_i / sum(y); translation invariant, hence uncalibrated.
* ``calibrated_softmax``: softmax over the list augmented with a virtual
  anchor item of fixed logit t and zero target mass. The anchor absorbs
  probability, which breaks translation invariance and ties scores to an
  absolute scale.
* ``multiobj``: alpha * mse + (1 - alpha) * softmax.

The scorer itself is a linear model over L2-normalized hashed
bag-of-token features. It is intentionally small: the point is exact,
reproducible verification of the calibration machinery, with heavier
neural scorers pluggable through the external scoring service instead.
"""

import hashlib
import json
import logging
import math
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericInputError, TrainingError, ValidationError

logger = logging.getLogger(__name__)

LOSS_NAMES = ("mse", "softmax", "multiobj", "calibrated_softmax")

MODE_SINGLE = "literal_single"
MODE_PAIR = "conditional_pair"


@dataclass(frozen=True)
class LossKind:
    """One training objective plus its parameters."""

    name: str
    alpha: float = 0.5  # multiobj mixing weight on the mse term
    anchor: float = 0.0  # fixed anchor logit for calibrated_softmax

    def __post_init__(self):
        if self.name not in LOSS_NAMES:
            raise ConfigError(f"unknown loss {self.name!r}; expected one of {LOSS_NAMES}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"multiobj alpha must be in [0, 1], got {self.alpha}")

    @classmethod
    def mse(cls) -> "LossKind":
        return cls("mse")

    @classmethod
    def softmax(cls) -> "LossKind":
        return cls("softmax")

    @classmethod
    def multiobj(cls, alpha: float = 0.5) -> "LossKind":
        return cls("multiobj", alpha=alpha)

    @classmethod
    def calibrated_softmax(cls, anchor: float = 0.0) -> "LossKind":
        return cls("calibrated_softmax", anchor=anchor)

    @property
    def needs_positive_labels(self) -> bool:
        """Softmax-family targets need sum(y) > 0."""
        return self.name in ("softmax", "multiobj", "calibrated_softmax")

    def to_dict(self) -> dict:
        return {"name": self.name, "alpha": self.alpha, "anchor": self.anchor}

    @classmethod
    def from_dict(cls, obj: dict) -> "LossKind":
        return cls(obj["name"], alpha=obj.get("alpha", 0.5), anchor=obj.get("anchor", 0.0))


@dataclass(frozen=True)
class QueryBatch:
    """Scores and labels for one query's candidate list."""

    query_id: str
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "scores", np.asarray(self.scores, dtype=float))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=float))
        if self.scores.size != self.labels.size or self.scores.size < 1:
            raise ValidationError("QueryBatch needs equal-length non-empty scores and labels")


def _softmax_parts(s: np.ndarray, anchor: float | None):
    """Stable softmax probabilities and log-normalizer over s (+ anchor)."""
    high = float(np.max(s))
    if anchor is not None:
        high = max(high, anchor)
    exps = np.exp(s - high)
    z = float(np.sum(exps))
    if anchor is not None:
        z += math.exp(anchor - high)
    return exps / z, high + math.log(z)


def _listwise_cross_entropy(s, y, anchor):
    total = float(np.sum(y))
    if total <= 0:
        raise ValidationError("softmax-family loss needs sum(labels) > 0; skip all-zero queries upstream")
    p = y / total
    sigma, log_z = _softmax_parts(s, anchor)
    value = float(-np.dot(p, s - log_z))
    grad = sigma - p
    return value, grad


def loss_value_grad(kind: LossKind, batch: QueryBatch) -> tuple[float, np.ndarray]:
    """Loss value and gradient with respect to the score vector."""
    s, y = batch.scores, batch.labels
    if not np.isfinite(s).all():
        raise NumericInputError(f"non-finite score for query {batch.query_id}")
    if not np.isfinite(y).all():
        raise NumericInputError(f"non-finite label for query {batch.query_id}")
    n = s.size
    if kind.name == "mse":
        diff = s - y
        return float(np.mean(diff**2)), 2.0 * diff / n
    if kind.name == "softmax":
        return _listwise_cross_entropy(s, y, anchor=None)
    if kind.name == "calibrated_softmax":
        return _listwise_cross_entropy(s, y, anchor=kind.anchor)
    # multiobj
    mse_v, mse_g = loss_value_grad(LossKind.mse(), batch)
    sm_v, sm_g = loss_value_grad(LossKind.softmax(), batch)
    a = kind.alpha
    return a * mse_v + (1 - a) * sm_v, a * mse_g + (1 - a) * sm_g


@dataclass(frozen=True)
class FeatureSpec:
    """Hashed bag-of-tokens featurizer settings."""

    dimension: int = 32768
    seed: int = 0
    lowercase: bool = True

    def __post_init__(self):
        if self.dimension < 1 or self.dimension & (self.dimension - 1):
            raise ConfigError(f"feature dimension must be a power of two, got {self.dimension}")

    def to_dict(self) -> dict:
        return {"dimension": self.dimension, "seed": self.seed, "lowercase": self.lowercase}

    @classmethod
    def from_dict(cls, obj: dict) -> "FeatureSpec":
        return cls(obj["dimension"], obj.get("seed", 0), obj.get("lowercase", True))


def hash_token(token: str, seed: int, dimension: int) -> int:
    """Stable bucket index for a token (keyed blake2b, process-independent)."""
    key = seed.to_bytes(8, "little", signed=True)
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=key).digest()
    return int.from_bytes(digest, "little") % dimension


_FEATURE_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


def _text_tokens(text: str, spec: FeatureSpec) -> list[str]:
    source = text.lower() if spec.lowercase else text
    return _FEATURE_TOKEN_RE.findall(source)


def featurize_text(text: str, spec: FeatureSpec) -> np.ndarray:
    """L2-normalized hashed token counts; empty text gives the zero vector."""
    vec = np.zeros(spec.dimension)
    for token in _text_tokens(text, spec):
        vec[hash_token(token, spec.seed, spec.dimension)] += 1.0
    norm = np.linalg.norm(vec)
    if norm > 0:
        vec /= norm
    return vec


def featurize(meta, spec: FeatureSpec) -> np.ndarray:
    """Feature vector for one explanation, or a (relevant, nonrelevant) pair.

    A single input yields one block of size ``dimension``; a pair yields
    two concatenated blocks (block 0: relevant polarity, block 1:
    nonrelevant polarity), each L2-normalized independently.
    """
    if isinstance(meta, (tuple, list)):
        if len(meta) != 2:
            raise ConfigError(f"conditional featurization expects exactly 2 inputs, got {len(meta)}")
        return np.concatenate([featurize_text(_meta_text(m), spec) for m in meta])
    return featurize_text(_meta_text(meta), spec)


def _meta_text(meta) -> str:
    if isinstance(meta, str):
        return meta
    return meta.text


@dataclass
class Scorer:
    """Linear scorer over hashed explanation features."""

    weights: np.ndarray
    bias: float
    spec: FeatureSpec
    mode: str = MODE_SINGLE
    loss_kind: LossKind | None = None
    hyper: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        expected = self.spec.dimension * (2 if self.mode == MODE_PAIR else 1)
        if self.weights.size != expected:
            raise ConfigError(f"weight vector of size {self.weights.size} does not match mode {self.mode!r} ({expected})")

    @classmethod
    def zeros(cls, spec: FeatureSpec, mode: str = MODE_SINGLE, **kw) -> "Scorer":
        size = spec.dimension * (2 if mode == MODE_PAIR else 1)
        return cls(np.zeros(size), 0.0, spec, mode, **kw)

    def score_features(self, features: np.ndarray) -> float:
        return float(np.dot(self.weights, features) + self.bias)

    def to_json(self) -> str:
        obj = {
            "mode": self.mode,
            "dimension": self.spec.dimension,
            "seed": self.spec.seed,
            "lowercase": self.spec.lowercase,
            "bias": self.bias,
            "weights": self.weights.tolist(),
            "loss_kind": self.loss_kind.to_dict() if self.loss_kind else None,
            "hyper": self.hyper,
        }
        return json.dumps(obj, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Scorer":
        obj = json.loads(text)
        spec = FeatureSpec(obj["dimension"], obj.get("seed", 0), obj.get("lowercase", True))
        kind = LossKind.from_dict(obj["loss_kind"]) if obj.get("loss_kind") else None
        return cls(np.array(obj["weights"]), obj["bias"], spec, obj["mode"], kind, obj.get("hyper", {}))


def score(scorer: Scorer, meta) -> float:
    """Score one explanation (or conditional pair) with a trained scorer."""
    is_pair = isinstance(meta, (tuple, list))
    if is_pair != (scorer.mode == MODE_PAIR):
        raise ConfigError(f"input arity does not match scorer mode {scorer.mode!r}")
    return scorer.score_features(featurize(meta, scorer.spec))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.5
    epochs: int = 10
    seed: int = 0
    max_docs_per_query: int | None = None  # subsample cap; None = use all

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "seed": self.seed,
            "max_docs_per_query": self.max_docs_per_query,
        }


def _build_design(collection, texts, spec: FeatureSpec, mode: str, kind: LossKind, hyper: TrainConfig):
    """Per-query (feature matrix, label vector) pairs for training."""
    rng = np.random.default_rng(hyper.seed)
    design = []
    skipped = 0
    for qid in collection.query_ids():
        pairs = collection.pairs_for_query(qid)
        if hyper.max_docs_per_query is not None and len(pairs) > hyper.max_docs_per_query:
            keep = sorted(rng.choice(len(pairs), size=hyper.max_docs_per_query, replace=False))
            pairs = [pairs[i] for i in keep]
        labels = np.array([p.label for p in pairs], dtype=float)
        if kind.needs_positive_labels and labels.sum() <= 0:
            skipped += 1
            continue
        rows = []
        for p in pairs:
            key = (p.query_id, p.doc_id)
            if key not in texts:
                raise ValidationError(f"no scorer input for pair {key}")
            rows.append(featurize(texts[key], spec))
        design.append((qid, np.vstack(rows), labels))
    if skipped:
        logger.info("skipped %d all-zero-label queries for %s loss", skipped, kind.name)
    if not design:
        raise ValidationError("no usable queries for training")
    return design


def _dataset_loss(design, weights, bias, kind) -> tuple[float, np.ndarray, float]:
    """Mean loss over queries plus gradients for (weights, bias).

    Overflow is left to produce inf rather than warn; the training loop
    detects non-finite losses and raises TrainingError.
    """
    total = 0.0
    grad_w = np.zeros_like(weights)
    grad_b = 0.0
    with np.errstate(over="ignore", invalid="ignore"):
        for qid, features, labels in design:
            scores = features @ weights + bias
            value, grad_s = loss_value_grad(kind, QueryBatch(qid, scores, labels))
            total += value
            grad_w += features.T @ grad_s
            grad_b += float(grad_s.sum())
    n = len(design)
    return total / n, grad_w / n, grad_b / n


def train(
    train_collection,
    validation_collection,
    texts,
    kind: LossKind,
    spec: FeatureSpec = FeatureSpec(),
    hyper: TrainConfig = TrainConfig(),
    mode: str = MODE_SINGLE,
) -> Scorer:
    """Full-batch gradient descent on query-grouped losses.

    ``texts`` maps (query_id, doc_id) to the scorer input for that pair
    (a text, an aggregated explanation, or a pair of them in conditional
    mode). Training starts from zero weights, evaluates validation loss
    after every epoch, and returns the earliest snapshot with minimum
    validation loss. Deterministic for a fixed seed.
    """
    if not train_collection.labels or not validation_collection.labels:
        raise ValidationError("train and validation splits must be non-empty")
    train_design = _build_design(train_collection, texts, spec, mode, kind, hyper)
    val_design = _build_design(validation_collection, texts, spec, mode, kind, hyper)

    size = spec.dimension * (2 if mode == MODE_PAIR else 1)
    weights = np.zeros(size)
    bias = 0.0

    def val_loss(w, b) -> float:
        return _dataset_loss(val_design, w, b, kind)[0]

    best = (val_loss(weights, bias), 0, weights.copy(), bias)
    last_finite = 0
    for epoch in range(1, hyper.epochs + 1):
        try:
            loss, grad_w, grad_b = _dataset_loss(train_design, weights, bias, kind)
        except NumericInputError:
            # Scores overflowed even though the parameters are finite.
            raise TrainingError("training loss diverged", last_finite_epoch=last_finite)
        if not math.isfinite(loss):
            raise TrainingError("training loss diverged", last_finite_epoch=last_finite)
        last_finite = epoch
        weights = weights - hyper.learning_rate * grad_w
        bias = bias - hyper.learning_rate * grad_b
        if not np.isfinite(weights).all() or not math.isfinite(bias):
            raise TrainingError("parameters diverged", last_finite_epoch=epoch - 1)
        try:
            candidate = val_loss(weights, bias)
        except NumericInputError:
            raise TrainingError("validation loss diverged", last_finite_epoch=epoch - 1)
        if not math.isfinite(candidate):
            raise TrainingError("validation loss diverged", last_finite_epoch=epoch - 1)
        if candidate < best[0]:
            best = (candidate, epoch, weights.copy(), bias)
    logger.info("best validation loss %.6g at epoch %d/%d", best[0], best[1], hyper.epochs)
    return Scorer(best[2], best[3], spec, mode, loss_kind=kind, hyper=hyper.to_dict())

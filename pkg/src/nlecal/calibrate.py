"""Post-hoc calibrators.

Two strategies are provided: a two-parameter exponential map fitted by
regression (Platt scaling adapted to graded labels, s' = exp(w*s + b) / 2),
and confidence averaging over repeated binary LLM predictions, whose output
is then fed through the same exponential map.

When the fitted ``w`` is positive the map is strictly increasing, so the
induced ranking (and hence nDCG) is unchanged; a negative ``w`` means the
calibration data disagreed with the ranker's ordering, and the sign is
surfaced to callers rather than hidden.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import FitError, SaturationError, UnparseablePairError, ValidationError

logger = logging.getLogger(__name__)

_EXP_LIMIT = 700.0


@dataclass(frozen=True)
class PlattParams:
    w: float
    b: float

    def to_dict(self, fit_mse: float | None = None, n_points: int | None = None) -> dict:
        out = {"w": self.w, "b": self.b}
        if fit_mse is not None:
            out["fit_mse"] = fit_mse
        if n_points is not None:
            out["n_points"] = n_points
        return out


@dataclass(frozen=True)
class PlattFitConfig:
    learning_rate: float = 0.02
    iterations: int = 20000
    seed: int = 0


def platt_apply(params: PlattParams, scores) -> np.ndarray:
    """Elementwise s' = exp(w*s + b) / 2; every output is positive."""
    s = np.asarray(scores, dtype=float)
    z = params.w * s + params.b
    over = np.nonzero(z > _EXP_LIMIT)[0]
    if over.size:
        idx = int(over[0])
        raise SaturationError(index=idx, value=float(z[idx]))
    return np.exp(z) / 2.0


def platt_fit(scores, labels, config: PlattFitConfig = PlattFitConfig()) -> PlattParams:
    """Fit (w, b) by full-batch gradient descent on squared error.

    Initialization is w = 0, b = ln 2, i.e. the constant map s' = 1.
    Deterministic for a given config; raises FitError if the optimizer
    leaves the finite domain.
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=float)
    if s.size != y.size or s.size < 2:
        raise ValidationError("platt_fit needs at least 2 (score, label) points")
    if not (np.isfinite(s).all() and np.isfinite(y).all()):
        raise FitError("non-finite fit inputs")
    w, b = 0.0, math.log(2.0)
    lr = config.learning_rate
    for step in range(config.iterations):
        z = w * s + b
        if np.max(z) > _EXP_LIMIT:
            raise FitError(f"exponent overflow during fit at iteration {step}")
        f = np.exp(z) / 2.0
        residual = f - y
        loss = float(np.mean(residual**2))
        if not math.isfinite(loss):
            raise FitError(f"non-finite loss at iteration {step}")
        grad_w = float(np.mean(2.0 * residual * f * s))
        grad_b = float(np.mean(2.0 * residual * f))
        w -= lr * grad_w
        b -= lr * grad_b
    if not (math.isfinite(w) and math.isfinite(b)):
        raise FitError("non-finite parameters after fit")
    if w <= 0:
        logger.warning("fitted w = %.4g is not positive; ranking is not preserved", w)
    return PlattParams(w=w, b=b)


def pl_confidence(samples, n: int = 20) -> float:
    """Fraction of parsed predictions that say "relevant".

    Uses the first ``n`` samples for one (query, document) pair. Samples
    whose label failed to parse are excluded from both numerator and
    denominator; if nothing parsed the pair is unusable.
    """
    used = list(samples)[:n]
    parsed = [s for s in used if s.predicted_label in ("relevant", "nonrelevant")]
    if not parsed:
        raise UnparseablePairError(f"all {len(used)} samples unparsed")
    relevant = sum(1 for s in parsed if s.predicted_label == "relevant")
    return relevant / len(parsed)

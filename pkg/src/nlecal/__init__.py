"""Scale-calibrated ranking scores from sampled LLM relevance explanations.

The package turns free-text relevance judgments sampled from a language
model into numeric ranking scores aligned with a graded relevance scale,
and ships the calibration objectives, post-hoc calibrators, metrics, and
query-performance predictors needed to evaluate them.
"""

from .aggregate import AggregationParams, MetaNle, SelectionStrategy, aggregate, select
from .calibrate import PlattFitConfig, PlattParams, pl_confidence, platt_apply, platt_fit
from .corpus import (
    JudgedCollection,
    QueryDocPair,
    RunRecord,
    load_pair_splits,
    load_pairs,
    load_qrels,
    load_run,
    save_pairs,
    save_qrels,
    save_run,
)
from .llm import (
    MockTransport,
    NleSample,
    PromptKind,
    SampleCache,
    Sampler,
    SamplerConfig,
    ScriptedTransport,
    build_prompt,
    parse_literal,
    parse_rubric_score,
)
from .losses import (
    FeatureSpec,
    LossKind,
    QueryBatch,
    Scorer,
    TrainConfig,
    featurize,
    loss_value_grad,
    score,
    train,
)
from .metrics import EvalReport, ReliabilityBins, cb_ece, ece, evaluate_predictions, kendall, mse, ndcg, pearson
from .pipeline import ExperimentConfig, emit_report, external_score, run_pipeline
from .qpp import QppResult, evaluate_qpp, nqc, wig
from .textsim import Sentence, rouge_l, split_sentences, tokenize

__version__ = "0.1.0"

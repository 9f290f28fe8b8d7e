"""End-to-end experiment pipeline with resumable stages.

A run is a sequence of stages: ingest -> generate -> aggregate -> train
-> score -> calibrate -> evaluate -> qpp -> report. Which stages apply
depends on the method:

* ``nc``   evaluate a precomputed run's scores as-is
* ``pc``   fit the exponential calibrator on train-split run scores,
           apply it to the test split
* ``fc``   train the builtin scorer on raw query+document text
* ``pr``   single greedy rubric-prompted generation per pair, parsed to
           a scalar grade
* ``pl``   repeated binary predictions -> confidence -> calibrator
* ``nle_literal`` / ``nle_conditional``
           sample explanations, aggregate them, train the scorer on the
           aggregated text(s), score the test split

Every stage writes its artifact plus a stamp holding a content hash of
everything upstream of it; re-running with unchanged inputs is a per-stage
no-op, and deleting a downstream artifact never re-triggers LLM sampling
as long as the sample cache is intact. Stage failures halt the run with
the stage name attached; completed artifacts stay on disk.
"""

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import requests

from . import qpp as qpp_mod
from .aggregate import AggregationParams, MetaNle, SelectionStrategy, load_metas, save_metas, select
from .calibrate import PlattFitConfig, platt_apply, platt_fit, pl_confidence
from .corpus import JudgedCollection, load_pair_splits, load_qrels, load_run, run_from_scores, save_run
from .errors import (
    ConfigError,
    EmptyMetaError,
    EndpointError,
    NlecalError,
    ProtocolError,
    TransportError,
    UnparseablePairError,
    UnparseableScoreError,
    ValidationError,
)
from .llm import (
    PROMPT_TEMPLATES,
    PromptKind,
    SampleCache,
    Sampler,
    SamplerConfig,
    build_prompt,
    make_transport,
    parse_rubric_score,
)
from .losses import MODE_PAIR, MODE_SINGLE, FeatureSpec, LossKind, Scorer, TrainConfig, score, train
from .metrics import EvalReport, evaluate_predictions
from .qpp import QppResult, evaluate_qpp, write_qpp_csv
from .textsim import Sentence

logger = logging.getLogger(__name__)

METHODS = ("nc", "pc", "fc", "pr", "pl", "nle_literal", "nle_conditional")
SCORING_PROTOCOL = "nlecal-score/1"

SUMMARY_HEADER = ["method", "nDCG", "nDCG@10", "CB-ECE", "ECE", "MSE"]

EMPTY_META_TEXT = "no explanation"


# ---------------------------------------------------------------------------
# Configuration


def _to_int(v):
    return int(v)


def _to_float(v):
    return float(v)


def _to_str(v):
    return str(v)


def _to_opt_int(v):
    return None if v in ("", "none", None) else int(v)


def _to_opt_str(v):
    return None if v in ("", "none", None) else str(v)


def _to_seeds(v):
    if isinstance(v, (list, tuple)):
        return tuple(int(x) for x in v)
    return tuple(int(x) for x in str(v).split(",") if x.strip() != "")


# flat config key -> (coercion, default)
CONFIG_KEYS = {
    "method": (_to_str, "nle_literal"),
    "pairs": (_to_opt_str, None),
    "qrels": (_to_opt_str, None),
    "run": (_to_opt_str, None),
    "rubric": (_to_opt_str, None),
    "output_dir": (_to_str, "out"),
    "cache_path": (_to_opt_str, None),
    "scale_max": (_to_opt_int, None),
    "seeds": (_to_seeds, (0,)),
    "agg.lambda": (_to_float, 0.35),
    "agg.k_l": (_to_int, 20),
    "agg.k_s": (_to_int, 30),
    "loss.kind": (_to_str, "calibrated_softmax"),
    "loss.alpha": (_to_float, 0.5),
    "loss.anchor": (_to_float, 0.0),
    "select.kind": (_to_str, "aggregate_mc"),
    "select.max_tries": (_to_int, 20),
    "select.binarization_threshold": (_to_opt_int, None),
    "sampler.backend": (_to_str, "mock"),
    "sampler.endpoint_url": (_to_str, ""),
    "sampler.model_id": (_to_str, "mock"),
    "sampler.temperature": (_to_float, 0.7),
    "sampler.max_output_tokens": (_to_int, 512),
    "sampler.request_timeout": (_to_float, 30.0),
    "sampler.max_in_flight": (_to_int, 4),
    "sampler.retry_budget": (_to_int, 2),
    "sampler.mock_seed": (_to_int, 0),
    "scorer.backend": (_to_str, "builtin_linear"),
    "scorer.endpoint": (_to_opt_str, None),
    "feature.dimension": (_to_int, 32768),
    "feature.seed": (_to_int, 0),
    "train.lr": (_to_float, 0.5),
    "train.epochs": (_to_int, 10),
    "train.max_docs_per_query": (_to_opt_int, None),
    "platt.lr": (_to_float, 0.02),
    "platt.iterations": (_to_int, 20000),
    "pl.samples": (_to_int, 20),
    "metrics.bins": (_to_int, 10),
    "metrics.k": (_to_int, 10),
    "metrics.gain": (_to_str, "exp"),
}


@dataclass
class ExperimentConfig:
    """Fully resolved experiment settings (one method, one output dir)."""

    flat: dict

    def __post_init__(self):
        unknown = set(self.flat) - set(CONFIG_KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        resolved = {}
        for key, (coerce, default) in CONFIG_KEYS.items():
            raw = self.flat.get(key, default)
            try:
                resolved[key] = coerce(raw) if raw is not default else default
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key}: {raw!r} ({exc})")
        self.flat = resolved
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        # Constructing the typed views validates their invariants early.
        self.aggregation_params()
        self.loss_kind()
        self.strategy()
        self.sampler_config()
        self.feature_spec()

    def __getitem__(self, key):
        return self.flat[key]

    @property
    def method(self) -> str:
        return self.flat["method"]

    @property
    def output_dir(self) -> Path:
        return Path(self.flat["output_dir"])

    @property
    def seeds(self) -> tuple[int, ...]:
        return self.flat["seeds"]

    @property
    def cache_path(self) -> Path:
        if self.flat["cache_path"]:
            return Path(self.flat["cache_path"])
        return self.output_dir / "samples.cache.jsonl"

    def aggregation_params(self) -> AggregationParams:
        return AggregationParams(self.flat["agg.lambda"], self.flat["agg.k_l"], self.flat["agg.k_s"])

    def loss_kind(self) -> LossKind:
        return LossKind(self.flat["loss.kind"], alpha=self.flat["loss.alpha"], anchor=self.flat["loss.anchor"])

    def strategy(self) -> SelectionStrategy:
        return SelectionStrategy(
            self.flat["select.kind"],
            max_tries=self.flat["select.max_tries"],
            binarization_threshold=self.flat["select.binarization_threshold"],
        )

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(
            endpoint_url=self.flat["sampler.endpoint_url"],
            model_id=self.flat["sampler.model_id"],
            temperature=self.flat["sampler.temperature"],
            max_output_tokens=self.flat["sampler.max_output_tokens"],
            request_timeout=self.flat["sampler.request_timeout"],
            max_in_flight=self.flat["sampler.max_in_flight"],
            retry_budget=self.flat["sampler.retry_budget"],
        )

    def feature_spec(self) -> FeatureSpec:
        return FeatureSpec(self.flat["feature.dimension"], self.flat["feature.seed"])

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.flat["train.lr"],
            epochs=self.flat["train.epochs"],
            seed=seed,
            max_docs_per_query=self.flat["train.max_docs_per_query"],
        )

    def platt_config(self, seed: int) -> PlattFitConfig:
        return PlattFitConfig(self.flat["platt.lr"], self.flat["platt.iterations"], seed)

    def resolved(self) -> dict:
        return dict(self.flat)

    def portable_resolved(self) -> dict:
        """Resolved config without the output location, for embedding in
        reports that must be byte-identical across output directories."""
        out = dict(self.flat)
        out.pop("output_dir")
        out.pop("cache_path")
        return out

    @classmethod
    def from_dict(cls, flat: dict) -> "ExperimentConfig":
        return cls(dict(flat))

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "ExperimentConfig":
        flat = parse_config_text(Path(path).read_text(encoding="utf-8"), path)
        if overrides:
            flat.update(overrides)
        return cls(flat)


def parse_config_text(text: str, path="<config>") -> dict:
    """Parse ``key = value`` lines; '#' starts a comment."""
    flat = {}
    for line_no, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{line_no}: expected 'key = value', got {stripped!r}")
        key, value = stripped.split("=", 1)
        flat[key.strip()] = value.strip()
    return flat


# ---------------------------------------------------------------------------
# Stage machinery


def _stable_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False)


def _hash_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _hash_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class StageChain:
    """Runs named stages with content-hash staleness stamps.

    Each stage's hash chains the previous stage's hash with that stage's
    own configuration slice, so any upstream change invalidates
    everything below it and nothing else. ``sequence`` records every
    stage the run comprises in order; ``executed`` and ``skipped`` say
    which ones actually ran.
    """

    def __init__(self, directory: Path, root_hash: str):
        self.directory = directory
        self.chain = root_hash
        self.sequence: list[str] = []
        self.executed: list[str] = []
        self.skipped: list[str] = []
        directory.mkdir(parents=True, exist_ok=True)

    def run(self, name: str, config_slice, artifacts: list[str], build, load):
        """Execute or skip one stage.

        ``build(paths)`` computes the stage and writes the artifact
        files; ``load(paths)`` rehydrates a previous result. Both return
        the stage value.
        """
        self.chain = _hash_text(self.chain + _stable_json(config_slice))
        self.sequence.append(name)
        paths = [self.directory / a for a in artifacts]
        stamp = self.directory / f"{name}.stamp.json"
        if stamp.exists() and all(p.exists() for p in paths):
            try:
                recorded = json.loads(stamp.read_text())["hash"]
            except (json.JSONDecodeError, KeyError):
                recorded = None
            if recorded == self.chain:
                logger.info("stage %s: up to date, skipping", name)
                self.skipped.append(name)
                return load(paths)
        logger.info("stage %s: running", name)
        try:
            result = build(paths)
        except NlecalError as exc:
            exc.stage = name
            logger.error("stage %s failed: %s", name, exc)
            raise
        stamp.write_text(_stable_json({"stage": name, "hash": self.chain}))
        self.executed.append(name)
        return result


# ---------------------------------------------------------------------------
# External scoring service client


def external_score(endpoint: str, items: list[dict], *, timeout: float = 30.0, retry_budget: int = 2, session=None) -> list[float]:
    """Score a batch via the HTTP scoring service.

    Request: ``{"protocol": ..., "items": [{"id", "text_a", "text_b"?}]}``.
    Response: ``{"scores": [{"id", "score"}]}``, order-insensitive;
    missing ids are a protocol error. An empty batch never touches the
    network.
    """
    if not items:
        return []
    payload = {"protocol": SCORING_PROTOCOL, "items": items}
    http = session or requests
    last_error = None
    for _attempt in range(retry_budget + 1):
        try:
            response = http.post(endpoint, json=payload, timeout=timeout)
            break
        except requests.RequestException as exc:
            last_error = exc
    else:
        raise TransportError(f"scoring service unreachable: {last_error}")
    if response.status_code != 200:
        raise EndpointError(response.status_code, response.text[:200])
    try:
        rows = response.json()["scores"]
        by_id = {row["id"]: float(row["score"]) for row in rows}
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(f"malformed scoring response: {exc}")
    missing = [item["id"] for item in items if item["id"] not in by_id]
    if missing:
        raise ProtocolError("scoring response missing ids", missing_ids=missing)
    return [by_id[item["id"]] for item in items]


# ---------------------------------------------------------------------------
# Pipeline


@dataclass
class SeedOutcome:
    seed: int
    eval_report: EvalReport
    qpp_result: QppResult
    flags: list[str]
    stages: list[str]  # full ordered stage sequence of the method
    executed: list[str]  # the subset that actually ran (rest were cached)


@dataclass
class PipelineResult:
    config: ExperimentConfig
    outcomes: list[SeedOutcome]
    out_dir: Path
    report_files: dict = field(default_factory=dict)


@dataclass
class _Dataset:
    """Label/text lookups shared by every stage."""

    labels: dict[str, dict]  # split -> {(qid, did): grade}
    queries: dict[str, str]
    docs: dict[tuple[str, str], str]
    scale: tuple[int, int]

    def split_pairs(self, split: str) -> list[tuple[str, str]]:
        return sorted(self.labels.get(split, {}))


def _load_dataset(config: ExperimentConfig) -> _Dataset:
    scale_override = None
    if config["scale_max"] is not None:
        scale_override = (0, config["scale_max"])
    if config["pairs"]:
        splits = load_pair_splits(config["pairs"], scale=scale_override)
        labels = {s: dict(c.labels) for s, c in splits.items()}
        queries: dict[str, str] = {}
        docs: dict[tuple[str, str], str] = {}
        for c in splits.values():
            queries.update(c.queries)
            docs.update(c.docs)
        scale = next(iter(splits.values())).scale
        return _Dataset(labels=labels, queries=queries, docs=docs, scale=scale)
    if config["qrels"]:
        if config.method not in ("nc",):
            raise ConfigError(f"method {config.method} needs a pairs file (texts and splits)")
        judgments = load_qrels(config["qrels"])
        if not judgments:
            raise ValidationError("empty qrels")
        scale = scale_override or (0, max(judgments.values()))
        return _Dataset(labels={"test": judgments}, queries={}, docs={}, scale=scale)
    raise ConfigError("either pairs or qrels must be configured")


def _require_splits(dataset: _Dataset, needed: tuple[str, ...], method: str) -> None:
    missing = [s for s in needed if not dataset.labels.get(s)]
    if missing:
        raise ValidationError(f"method {method} needs non-empty splits {missing}")


def _scores_to_rows(scores: dict[tuple[str, str], float]) -> list[list]:
    return [[q, d, s] for (q, d), s in sorted(scores.items())]


def _rows_to_scores(rows) -> dict[tuple[str, str], float]:
    return {(q, d): float(s) for q, d, s in rows}


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1, ensure_ascii=False) + "\n", encoding="utf-8")


def _run_scores_map(records) -> dict[tuple[str, str], float]:
    return {(r.query_id, r.doc_id): r.score for r in records}


def _pair_key(qid: str, did: str) -> str:
    return f"{qid}::{did}"


class _SeedRun:
    """All stages of one (config, seed) execution."""

    def __init__(self, config: ExperimentConfig, dataset: _Dataset, sampler: Sampler, seed: int):
        self.config = config
        self.dataset = dataset
        self.sampler = sampler
        self.seed = seed
        self.flags: list[str] = []
        root = _stable_json(
            {
                "method": config.method,
                "seed": seed,
                "inputs": {
                    name: _hash_file(config[name])
                    for name in ("pairs", "qrels", "run", "rubric")
                    if config[name]
                },
            }
        )
        self.chain = StageChain(config.output_dir / f"seed={seed}", _hash_text(root))

    # -- score production ---------------------------------------------------

    def _scores_from_run(self) -> dict[str, dict]:
        if not self.config["run"]:
            raise ConfigError(f"method {self.config.method} needs a run file")
        records = load_run(self.config["run"])
        raw = _run_scores_map(records)
        needed = ("train", "test") if self.config.method == "pc" else ("test",)
        out: dict[str, dict] = {}
        for split in needed:
            split_scores = {}
            for key in self.dataset.split_pairs(split):
                if key in raw:
                    split_scores[key] = raw[key]
                else:
                    split_scores[key] = 0.0
                    self.flags.append(f"missing_run_score:{key[0]}:{key[1]}")
            out[split] = split_scores
        return out

    def _platt_calibrate(self, raw_scores: dict[str, dict], paths) -> dict[str, dict]:
        train_keys = self.dataset.split_pairs("train")
        labels = self.dataset.labels["train"]
        xs = [raw_scores["train"][k] for k in train_keys]
        ys = np.array([labels[k] for k in train_keys], dtype=float)
        params = platt_fit(xs, ys, self.config.platt_config(self.seed))
        fit_mse = float(((platt_apply(params, xs) - ys) ** 2).mean())
        _write_json(paths[0], params.to_dict(fit_mse=fit_mse, n_points=len(xs)))
        test_keys = self.dataset.split_pairs("test")
        calibrated = platt_apply(params, [raw_scores["test"][k] for k in test_keys])
        return {"test": dict(zip(test_keys, map(float, calibrated)))}

    def _generate_metas(self, paths) -> list[MetaNle]:
        config = self.config
        mode = "literal" if config.method == "nle_literal" else "conditional"
        params = config.aggregation_params()
        strategy = config.strategy()
        metas: list[MetaNle] = []
        for split in ("train", "validation", "test"):
            for qid, did in self.dataset.split_pairs(split):
                pair = _PairView(
                    qid, self.dataset.queries[qid], did, self.dataset.docs[(qid, did)],
                    self.dataset.labels[split][(qid, did)],
                )
                try:
                    selected, flags = select(
                        pair, strategy, self.sampler, params, mode=mode, scale=self.dataset.scale
                    )
                except EmptyMetaError:
                    self.flags.append(f"empty_meta:{qid}:{did}")
                    polarity = "literal" if mode == "literal" else "relevant"
                    selected = [_empty_meta(qid, did, polarity)]
                    if mode == "conditional":
                        selected.append(_empty_meta(qid, did, "nonrelevant"))
                self.flags.extend(flags)
                metas.extend(selected)
        save_metas(metas, params, paths[0])
        return metas

    def _meta_inputs(self, metas: list[MetaNle]) -> dict[tuple[str, str], object]:
        conditional = self.config.method == "nle_conditional"
        by_pair: dict[tuple[str, str], dict[str, MetaNle]] = {}
        for meta in metas:
            by_pair.setdefault((meta.query_id, meta.doc_id), {})[meta.polarity] = meta
        texts: dict[tuple[str, str], object] = {}
        for key, polarities in by_pair.items():
            if conditional:
                texts[key] = (polarities["relevant"], polarities["nonrelevant"])
            else:
                texts[key] = polarities["literal"]
        return texts

    def _fc_inputs(self) -> dict[tuple[str, str], str]:
        texts = {}
        for split_labels in self.dataset.labels.values():
            for qid, did in split_labels:
                texts[(qid, did)] = f"{self.dataset.queries[qid]} {self.dataset.docs[(qid, did)]}"
        return texts

    def _train_scorer(self, texts, mode: str, paths) -> Scorer:
        config = self.config
        collections = _as_collections(self.dataset)
        scorer = train(
            collections["train"],
            collections["validation"],
            texts,
            config.loss_kind(),
            spec=config.feature_spec(),
            hyper=config.train_config(self.seed),
            mode=mode,
        )
        paths[0].write_text(scorer.to_json(), encoding="utf-8")
        return scorer

    def _score_split(self, texts, scorer: Scorer | None, split: str) -> dict[tuple[str, str], float]:
        keys = self.dataset.split_pairs(split)
        if self.config["scorer.backend"] == "external_http":
            endpoint = self.config["scorer.endpoint"]
            if not endpoint:
                raise ConfigError("scorer.backend=external_http needs scorer.endpoint")
            items = []
            for qid, did in keys:
                if self.config.method == "fc":
                    # Raw texts: the service sees the query and document.
                    items.append(
                        {
                            "id": _pair_key(qid, did),
                            "text_a": self.dataset.queries[qid],
                            "text_b": self.dataset.docs[(qid, did)],
                        }
                    )
                    continue
                entry = texts[(qid, did)]
                if isinstance(entry, tuple):
                    items.append({"id": _pair_key(qid, did), "text_a": entry[0].text, "text_b": entry[1].text})
                else:
                    text = entry.text if isinstance(entry, MetaNle) else entry
                    items.append({"id": _pair_key(qid, did), "text_a": text})
            values = external_score(
                endpoint,
                items,
                timeout=self.config["sampler.request_timeout"],
                retry_budget=self.config["sampler.retry_budget"],
            )
            return dict(zip(keys, values))
        assert scorer is not None
        return {key: score(scorer, texts[key]) for key in keys}

    def _rubric_scores(self, paths) -> dict[str, dict]:
        rubric_path = self.config["rubric"]
        if not rubric_path:
            raise ConfigError("method pr needs a rubric file")
        rubric_text = Path(rubric_path).read_text(encoding="utf-8").strip()
        scale = self.dataset.scale
        midpoint = (scale[0] + scale[1]) / 2.0
        out = {}
        for qid, did in self.dataset.split_pairs("test"):
            prompt = build_prompt(
                PromptKind.rubric, self.dataset.queries[qid], self.dataset.docs[(qid, did)], rubric=rubric_text
            )
            record = self.sampler.sample_greedy(prompt, query_id=qid, doc_id=did, kind=PromptKind.rubric)
            try:
                out[(qid, did)] = float(parse_rubric_score(record.raw_text, scale))
            except UnparseableScoreError:
                out[(qid, did)] = midpoint
                self.flags.append(f"unparsed_rubric:{qid}:{did}")
        _write_json(paths[0], _scores_to_rows(out))
        return {"test": out}

    def _pl_confidences(self, paths) -> dict[str, dict]:
        n = self.config["pl.samples"]
        out: dict[str, dict] = {}
        for split in ("train", "test"):
            split_scores = {}
            for qid, did in self.dataset.split_pairs(split):
                prompt = build_prompt(PromptKind.binary, self.dataset.queries[qid], self.dataset.docs[(qid, did)])
                records = self.sampler.sample_records(prompt, n, query_id=qid, doc_id=did, kind=PromptKind.binary)
                try:
                    split_scores[(qid, did)] = pl_confidence(records, n=n)
                except UnparseablePairError:
                    split_scores[(qid, did)] = 0.5
                    self.flags.append(f"unparseable_pair:{qid}:{did}")
            out[split] = split_scores
        _write_json(paths[0], {s: _scores_to_rows(v) for s, v in out.items()})
        return out

    # -- stage graph ---------------------------------------------------------

    def produce_test_scores(self, stop_after: str | None = None) -> dict[tuple[str, str], float] | None:
        """Run method-specific stages up to score/calibrate; returns the
        test-split predictions (or None when stopped early)."""
        config = self.config
        method = config.method
        chain = self.chain

        def stopped(stage: str) -> bool:
            return stop_after == stage

        if method == "nc":
            scores = chain.run(
                "score",
                {"run": True},
                ["scores.json"],
                lambda paths: self._store_scores(self._scores_from_run(), paths),
                lambda paths: {"test": _rows_to_scores(json.loads(paths[0].read_text())["test"])},
            )
            return scores["test"]

        if method == "pc":
            raw = chain.run(
                "score",
                {"run": True, "splits": ["train", "test"]},
                ["scores.raw.json"],
                lambda paths: self._store_scores(self._scores_from_run(), paths),
                lambda paths: {s: _rows_to_scores(r) for s, r in json.loads(paths[0].read_text()).items()},
            )
            if stopped("score"):
                return None
            calibrated = chain.run(
                "calibrate",
                {"platt": [config["platt.lr"], config["platt.iterations"], self.seed]},
                ["platt.json", "scores.json"],
                lambda paths: self._store_scores(self._platt_calibrate(raw, paths), paths, index=1),
                lambda paths: {"test": _rows_to_scores(json.loads(paths[1].read_text())["test"])},
            )
            return calibrated["test"]

        if method == "pr":
            scores = chain.run(
                "generate",
                {"rubric": True, "sampler": config.sampler_config().to_dict(), "backend": config["sampler.backend"]},
                ["scores.json"],
                lambda paths: self._rubric_scores(paths),
                lambda paths: {"test": _rows_to_scores(json.loads(paths[0].read_text()))},
            )
            return scores["test"]

        if method == "pl":
            confidences = chain.run(
                "generate",
                {
                    "binary_samples": config["pl.samples"],
                    "sampler": config.sampler_config().to_dict(),
                    "backend": config["sampler.backend"],
                },
                ["confidences.json"],
                lambda paths: self._pl_confidences(paths),
                lambda paths: {s: _rows_to_scores(r) for s, r in json.loads(paths[0].read_text()).items()},
            )
            if stopped("generate"):
                return None
            calibrated = chain.run(
                "calibrate",
                {"platt": [config["platt.lr"], config["platt.iterations"], self.seed]},
                ["platt.json", "scores.json"],
                lambda paths: self._store_scores(self._platt_calibrate(confidences, paths), paths, index=1),
                lambda paths: {"test": _rows_to_scores(json.loads(paths[1].read_text())["test"])},
            )
            return calibrated["test"]

        if method == "fc":
            texts = self._fc_inputs()
            scorer = None
            if config["scorer.backend"] == "builtin_linear":
                scorer = chain.run(
                    "train",
                    {
                        "loss": config.loss_kind().to_dict(),
                        "feature": config.feature_spec().to_dict(),
                        "train": config.train_config(self.seed).to_dict(),
                    },
                    ["scorer.json"],
                    lambda paths: self._train_scorer(texts, MODE_SINGLE, paths),
                    lambda paths: Scorer.from_json(paths[0].read_text()),
                )
                if stopped("train"):
                    return None
            scores = chain.run(
                "score",
                {"backend": config["scorer.backend"]},
                ["scores.json"],
                lambda paths: self._store_scores({"test": self._score_split(texts, scorer, "test")}, paths),
                lambda paths: {"test": _rows_to_scores(json.loads(paths[0].read_text())["test"])},
            )
            return scores["test"]

        # nle_literal / nle_conditional: sampling and aggregation are one
        # fused stage (the aggregator drives the sampler lazily); the raw
        # generations live in the sample cache.
        agg_stage = "aggregate[literal]" if method == "nle_literal" else "aggregate[conditional]"
        metas = chain.run(
            agg_stage,
            {
                "mode": method,
                "agg": config.aggregation_params().to_dict(),
                "strategy": config.strategy().to_dict(),
                "sampler": config.sampler_config().to_dict(),
                "backend": config["sampler.backend"],
                "mock_seed": config["sampler.mock_seed"],
            },
            ["metas.jsonl"],
            lambda paths: self._generate_metas(paths),
            lambda paths: load_metas(paths[0]),
        )
        if stopped("generate") or stopped("aggregate"):
            return None
        texts = self._meta_inputs(metas)
        mode = MODE_PAIR if method == "nle_conditional" else MODE_SINGLE
        scorer = None
        if config["scorer.backend"] == "builtin_linear":
            scorer = chain.run(
                "train",
                {
                    "loss": config.loss_kind().to_dict(),
                    "feature": config.feature_spec().to_dict(),
                    "train": config.train_config(self.seed).to_dict(),
                },
                ["scorer.json"],
                lambda paths: self._train_scorer(texts, mode, paths),
                lambda paths: Scorer.from_json(paths[0].read_text()),
            )
            if stopped("train"):
                return None
        scores = chain.run(
            "score",
            {"backend": config["scorer.backend"]},
            ["scores.json", "test.run"],
            lambda paths: self._store_scores({"test": self._score_split(texts, scorer, "test")}, paths, run_path=paths[1]),
            lambda paths: {"test": _rows_to_scores(json.loads(paths[0].read_text())["test"])},
        )
        return scores["test"]

    def _store_scores(self, scores: dict[str, dict], paths, index: int = 0, run_path=None):
        _write_json(paths[index], {s: _scores_to_rows(v) for s, v in scores.items()})
        if run_path is not None and "test" in scores:
            save_run(run_from_scores(scores["test"], tag=self.config.method), run_path)
        return scores

    def evaluate_metrics(self, test_scores: dict[tuple[str, str], float]) -> EvalReport:
        config = self.config
        labels = self.dataset.labels["test"]
        return self.chain.run(
            "evaluate",
            {"bins": config["metrics.bins"], "k": config["metrics.k"], "gain": config["metrics.gain"]},
            ["eval.json"],
            lambda paths: self._build_eval(test_scores, labels, paths),
            lambda paths: EvalReport.from_dict(json.loads(paths[0].read_text())),
        )

    def evaluate_qpp_stage(self, test_scores: dict[tuple[str, str], float]) -> QppResult:
        labels = self.dataset.labels["test"]
        return self.chain.run(
            "qpp",
            {"k": self.config["metrics.k"]},
            ["qpp.json"],
            lambda paths: self._build_qpp(test_scores, labels, paths),
            lambda paths: _qpp_from_dict(json.loads(paths[0].read_text())),
        )

    def _build_eval(self, scores, labels, paths) -> EvalReport:
        report = evaluate_predictions(
            scores,
            labels,
            self.dataset.scale,
            bins=self.config["metrics.bins"],
            k=self.config["metrics.k"],
            gain=self.config["metrics.gain"],
        )
        _write_json(paths[0], report.to_dict())
        return report

    def _build_qpp(self, scores, labels, paths) -> QppResult:
        records = run_from_scores(scores, tag=self.config.method)
        result = evaluate_qpp(records, labels, k=self.config["metrics.k"])
        _write_json(paths[0], result.to_dict())
        return result


@dataclass(frozen=True)
class _PairView:
    query_id: str
    query: str
    doc_id: str
    text: str
    label: int | None


def _empty_meta(qid: str, did: str, polarity: str) -> MetaNle:
    return MetaNle(qid, did, polarity, (Sentence.from_text(EMPTY_META_TEXT),), 0)


def _as_collections(dataset: _Dataset) -> dict[str, JudgedCollection]:
    out = {}
    for split, labels in dataset.labels.items():
        if not labels:
            continue
        qids = {q for q, _ in labels}
        out[split] = JudgedCollection(
            queries={q: dataset.queries[q] for q in qids},
            docs={k: dataset.docs[k] for k in labels},
            labels=dict(labels),
            scale=dataset.scale,
            split=split,
        )
    return out


def _qpp_from_dict(obj: dict) -> QppResult:
    return QppResult(
        per_query=obj["per_query"],
        correlations=obj["correlations"],
        k=obj["k"],
        flags=obj.get("flags", []),
    )


def run_pipeline(config: ExperimentConfig, stop_after: str | None = None) -> PipelineResult:
    """Execute the configured experiment for every seed and emit reports.

    ``stop_after`` names a stage to stop at (for the stage-wise CLI
    subcommands); stages a method does not use are skipped naturally.
    """
    out_dir = config.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = _load_dataset(config)
    needed = {
        "nc": ("test",),
        "pr": ("test",),
        "pc": ("train", "test"),
        "pl": ("train", "test"),
        "fc": ("train", "validation", "test"),
        "nle_literal": ("train", "validation", "test"),
        "nle_conditional": ("train", "validation", "test"),
    }[config.method]
    _require_splits(dataset, needed, config.method)

    needs_sampler = config.method in ("pr", "pl", "nle_literal", "nle_conditional")
    sampler = None
    if needs_sampler:
        transport = make_transport(config["sampler.backend"], config.sampler_config(), config["sampler.mock_seed"])
        config.cache_path.parent.mkdir(parents=True, exist_ok=True)
        sampler = Sampler(config.sampler_config(), transport, SampleCache(config.cache_path))

    if stop_after == "ingest":
        _write_json(out_dir / "dataset.json", _dataset_summary(dataset))
        return PipelineResult(config=config, outcomes=[], out_dir=out_dir)

    outcomes: list[SeedOutcome] = []
    for seed in config.seeds:
        seed_run = _SeedRun(config, dataset, sampler, seed)
        test_scores = seed_run.produce_test_scores(stop_after=stop_after)
        if test_scores is None or stop_after in ("generate", "aggregate", "train", "score", "calibrate"):
            continue
        report = seed_run.evaluate_metrics(test_scores)
        seed_run.flags.extend(report.flags)
        if stop_after == "evaluate":
            continue
        qpp_result = seed_run.evaluate_qpp_stage(test_scores)
        seed_run.flags.extend(qpp_result.flags)
        outcomes.append(
            SeedOutcome(
                seed=seed,
                eval_report=report,
                qpp_result=qpp_result,
                flags=sorted(set(seed_run.flags)),
                stages=list(seed_run.chain.sequence),
                executed=list(seed_run.chain.executed),
            )
        )

    result = PipelineResult(config=config, outcomes=outcomes, out_dir=out_dir)
    _write_json(out_dir / "dataset.json", _dataset_summary(dataset))
    if stop_after is None or stop_after == "report":
        if outcomes:
            result.report_files = emit_report(outcomes, config, out_dir)
    return result


def _dataset_summary(dataset: _Dataset) -> dict:
    return {
        "scale": list(dataset.scale),
        "splits": {
            s: {"queries": len({q for q, _ in labels}), "pairs": len(labels)}
            for s, labels in dataset.labels.items()
        },
    }


# ---------------------------------------------------------------------------
# Reporting


def _headline(report: EvalReport) -> dict:
    return {
        "nDCG": report.ndcg,
        "nDCG@10": report.ndcg_at_10,
        "CB-ECE": report.cb_ece,
        "ECE": report.ece,
        "MSE": report.mse,
    }


def emit_report(outcomes: list[SeedOutcome], config: ExperimentConfig, out_dir: Path) -> dict:
    """Write report.json, summary.csv, reliability.csv, qpp.csv and the
    resolved config. Refuses to write without results."""
    if not outcomes:
        raise ValidationError("no results to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    method = config.method

    per_seed = []
    for o in outcomes:
        per_seed.append(
            {
                "seed": o.seed,
                "metrics": o.eval_report.to_dict(),
                "qpp": o.qpp_result.to_dict(),
                "flags": o.flags,
                "stages": o.stages,
            }
        )
    headlines = [_headline(o.eval_report) for o in outcomes]
    mean_row = {k: sum(h[k] for h in headlines) / len(headlines) for k in headlines[0]}
    report_obj = {
        "method": method,
        "seeds": list(config.seeds),
        "per_seed": per_seed,
        "mean": mean_row,
        "config": config.portable_resolved(),
        "notes": {
            "qpp_predictors": "WIG/NQC computed from the run alone: per-query candidate mean, no corpus statistics or length normalization",
            "similarity_normalization": "lowercase alphanumeric tokens; rule-based sentence splitting",
        },
    }
    report_path = out_dir / "report.json"
    report_path.write_text(json.dumps(report_obj, sort_keys=True, indent=1, ensure_ascii=False) + "\n", encoding="utf-8")

    summary_path = out_dir / "summary.csv"
    with open(summary_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_HEADER)
        for o, head in zip(outcomes, headlines):
            writer.writerow([f"{method}[seed={o.seed}]"] + [f"{head[k]:.6f}" for k in SUMMARY_HEADER[1:]])
        writer.writerow([f"{method}[mean]"] + [f"{mean_row[k]:.6f}" for k in SUMMARY_HEADER[1:]])

    reliability_path = out_dir / "reliability.csv"
    _write_reliability(outcomes[0].eval_report, reliability_path)
    for o in outcomes[1:]:
        _write_reliability(o.eval_report, out_dir / f"reliability_seed{o.seed}.csv")

    qpp_path = out_dir / "qpp.csv"
    rows = [(f"{method}[seed={o.seed}]", o.qpp_result) for o in outcomes]
    rows.append((f"{method}[mean]", _mean_qpp(outcomes)))
    write_qpp_csv(rows, qpp_path)

    config_path = out_dir / "config.resolved.json"
    resolved = config.resolved()
    resolved["prompt_templates"] = {k.value: v for k, v in PROMPT_TEMPLATES.items()}
    _write_json(config_path, resolved)

    return {
        "report": report_path,
        "summary": summary_path,
        "reliability": reliability_path,
        "qpp": qpp_path,
        "config": config_path,
    }


def _write_reliability(report: EvalReport, path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mean_prediction", "mean_label", "count"])
        for mp, ml, count in report.reliability.rows():
            writer.writerow([f"{mp:.6f}", f"{ml:.6f}", count])


def _mean_qpp(outcomes: list[SeedOutcome]) -> QppResult:
    correlations: dict[str, dict[str, float | None]] = {}
    for predictor in qpp_mod.PREDICTORS:
        correlations[predictor] = {}
        for stat in qpp_mod.CORRELATIONS:
            values = [o.qpp_result.correlations.get(predictor, {}).get(stat) for o in outcomes]
            if any(v is None for v in values):
                correlations[predictor][stat] = None
            else:
                correlations[predictor][stat] = sum(values) / len(values)
    return QppResult(per_query={}, correlations=correlations, k=outcomes[0].qpp_result.k)

import math

import numpy as np
import pytest

from nlecal.errors import ConfigError, NumericInputError, TrainingError, ValidationError
from nlecal.losses import (
    MODE_PAIR,
    FeatureSpec,
    LossKind,
    QueryBatch,
    Scorer,
    TrainConfig,
    featurize,
    featurize_text,
    hash_token,
    loss_value_grad,
    score,
    train,
)
from nlecal.aggregate import MetaNle
from nlecal.textsim import Sentence


def batch(s, y):
    return QueryBatch("q", np.asarray(s, float), np.asarray(y, float))


def random_batch(rng, kind):
    n = int(rng.integers(1, 9))
    s = rng.normal(0, 2, n)
    y = rng.integers(0, 4, n).astype(float)
    if kind.needs_positive_labels and y.sum() == 0:
        y[int(rng.integers(0, n))] = 1.0
    return batch(s, y)


ALL_KINDS = [LossKind.mse(), LossKind.softmax(), LossKind.multiobj(0.3), LossKind.calibrated_softmax(0.0)]


class TestLossValues:
    def test_mse_zero_at_fit(self):
        value, grad = loss_value_grad(LossKind.mse(), batch([1, 2, 3], [1, 2, 3]))
        assert value == 0.0
        assert np.allclose(grad, 0.0)

    def test_softmax_closed_form(self):
        value, grad = loss_value_grad(LossKind.softmax(), batch([1.0, 1.0], [1.0, 0.0]))
        assert value == pytest.approx(-math.log(0.5), abs=1e-12)
        assert np.allclose(grad, [-0.5, 0.5], atol=1e-12)

    def test_calibrated_softmax_anchor(self):
        v0, _ = loss_value_grad(LossKind.calibrated_softmax(0.0), batch([0.0], [1.0]))
        assert v0 == pytest.approx(-math.log(0.5), abs=1e-12)
        v1, _ = loss_value_grad(LossKind.calibrated_softmax(0.0), batch([1.0], [1.0]))
        assert v1 == pytest.approx(-math.log(math.e / (1 + math.e)), abs=1e-12)
        assert v1 < v0  # raising the score toward the anchor helps

    def test_non_finite_input_rejected(self):
        with pytest.raises(NumericInputError):
            loss_value_grad(LossKind.mse(), batch([np.inf, 1.0], [0.0, 1.0]))

    def test_all_zero_labels_rejected_for_softmax(self):
        with pytest.raises(ValidationError):
            loss_value_grad(LossKind.softmax(), batch([1.0, 2.0], [0.0, 0.0]))

    def test_unknown_loss_name(self):
        with pytest.raises(ConfigError):
            LossKind("hinge")


class TestGradients:
    @pytest.mark.parametrize("kind", ALL_KINDS, ids=lambda k: k.name)
    def test_matches_finite_differences(self, kind, rng):
        h = 1e-6
        for _ in range(25):
            b = random_batch(rng, kind)
            _, grad = loss_value_grad(kind, b)
            fd = np.zeros_like(grad)
            for i in range(b.scores.size):
                up, down = b.scores.copy(), b.scores.copy()
                up[i] += h
                down[i] -= h
                fd[i] = (
                    loss_value_grad(kind, batch(up, b.labels))[0]
                    - loss_value_grad(kind, batch(down, b.labels))[0]
                ) / (2 * h)
            rel = np.linalg.norm(grad - fd) / max(np.linalg.norm(grad), np.linalg.norm(fd), 1e-8)
            assert rel < 1e-5

    def test_softmax_translation_invariant(self, rng):
        for _ in range(20):
            b = random_batch(rng, LossKind.softmax())
            c = float(rng.uniform(-10, 10))
            v0, g0 = loss_value_grad(LossKind.softmax(), b)
            v1, g1 = loss_value_grad(LossKind.softmax(), batch(b.scores + c, b.labels))
            assert abs(v0 - v1) < 1e-9
            assert np.allclose(g0, g1, atol=1e-9)

    def test_calibrated_softmax_translation_sensitive(self, rng):
        kind = LossKind.calibrated_softmax(0.0)
        for _ in range(20):
            b = random_batch(rng, kind)
            v0, _ = loss_value_grad(kind, b)
            diffs = [abs(loss_value_grad(kind, batch(b.scores + c, b.labels))[0] - v0) for c in (1.0, -1.0)]
            assert max(diffs) > 1e-3

    def test_multiobj_endpoints(self, rng):
        for _ in range(10):
            b = random_batch(rng, LossKind.softmax())
            for alpha, reference in ((1.0, LossKind.mse()), (0.0, LossKind.softmax())):
                vm, gm = loss_value_grad(LossKind.multiobj(alpha), b)
                vr, gr = loss_value_grad(reference, b)
                assert abs(vm - vr) < 1e-12
                assert np.allclose(gm, gr, atol=1e-12)

    def test_losses_nonnegative(self, rng):
        for kind in ALL_KINDS:
            for _ in range(10):
                value, _ = loss_value_grad(kind, random_batch(rng, kind))
                assert value >= 0.0


class TestFeaturize:
    SPEC = FeatureSpec(dimension=8, seed=0)

    def test_empty_text_zero_vector(self):
        assert np.all(featurize_text("", self.SPEC) == 0.0)

    def test_identical_texts_identical_vectors(self):
        a = featurize_text("some words here", self.SPEC)
        b = featurize_text("some words here", self.SPEC)
        assert np.array_equal(a, b)

    def test_unit_norm(self):
        v = featurize_text("three word text", self.SPEC)
        assert np.linalg.norm(v) == pytest.approx(1.0)

    def test_pinned_bucket_indices(self):
        # Regression fixture: indices computed once with the keyed-blake2b
        # hash and frozen. dimension=8, seed=0.
        assert [hash_token(t, 0, 8) for t in ("alpha", "beta", "gamma")] == [7, 6, 2]

    def test_dimension_must_be_power_of_two(self):
        with pytest.raises(ConfigError):
            FeatureSpec(dimension=12)

    def test_conditional_blocks(self):
        rel = MetaNle("q", "d", "relevant", (Sentence.from_text("alpha beta"),), 1)
        non = MetaNle("q", "d", "nonrelevant", (Sentence.from_text("gamma delta"),), 1)
        v = featurize((rel, non), self.SPEC)
        assert v.size == 16
        assert np.allclose(v[:8], featurize_text("alpha beta", self.SPEC))
        assert np.allclose(v[8:], featurize_text("gamma delta", self.SPEC))

    def test_seed_changes_layout(self):
        a = featurize_text("alpha beta gamma", FeatureSpec(dimension=64, seed=0))
        b = featurize_text("alpha beta gamma", FeatureSpec(dimension=64, seed=1))
        assert not np.array_equal(a, b)


class TestTrain:
    SPEC = FeatureSpec(dimension=64, seed=0)

    def test_separable_toy_converges(self, toy_separable):
        train_col, val_col, texts = toy_separable
        scorer = train(
            train_col, val_col, texts, LossKind.mse(), spec=self.SPEC,
            hyper=TrainConfig(learning_rate=0.5, epochs=200, seed=0),
        )
        val_mse = np.mean(
            [(score(scorer, texts[key]) - label) ** 2 for key, label in val_col.labels.items()]
        )
        assert val_mse < 0.1
        assert score(scorer, "good match") > score(scorer, "bad match")

    def test_zero_epochs_returns_zero_init(self, toy_separable):
        train_col, val_col, texts = toy_separable
        scorer = train(train_col, val_col, texts, LossKind.mse(), spec=self.SPEC, hyper=TrainConfig(epochs=0))
        assert np.all(scorer.weights == 0.0)
        assert scorer.bias == 0.0
        assert score(scorer, "anything at all") == 0.0

    def test_same_seed_bit_identical(self, toy_separable):
        train_col, val_col, texts = toy_separable
        hyper = TrainConfig(learning_rate=0.5, epochs=50, seed=11)
        a = train(train_col, val_col, texts, LossKind.mse(), spec=self.SPEC, hyper=hyper)
        b = train(train_col, val_col, texts, LossKind.mse(), spec=self.SPEC, hyper=hyper)
        assert np.array_equal(a.weights, b.weights)
        assert a.bias == b.bias

    def test_divergence_reports_last_finite_epoch(self, toy_separable):
        train_col, val_col, texts = toy_separable
        with pytest.raises(TrainingError):
            train(
                train_col, val_col, texts, LossKind.mse(), spec=self.SPEC,
                hyper=TrainConfig(learning_rate=1e6, epochs=500, seed=0),
            )

    def test_scorer_json_round_trip(self, toy_separable):
        train_col, val_col, texts = toy_separable
        scorer = train(train_col, val_col, texts, LossKind.calibrated_softmax(), spec=self.SPEC,
                       hyper=TrainConfig(epochs=3))
        clone = Scorer.from_json(scorer.to_json())
        assert np.array_equal(clone.weights, scorer.weights)
        assert clone.bias == scorer.bias
        assert clone.mode == scorer.mode
        assert clone.loss_kind == scorer.loss_kind


class TestScore:
    def test_zero_weights_zero_score(self):
        scorer = Scorer.zeros(FeatureSpec(dimension=8, seed=0))
        assert score(scorer, "any words") == 0.0

    def test_arity_mismatch(self):
        scorer = Scorer.zeros(FeatureSpec(dimension=8, seed=0))
        rel = MetaNle("q", "d", "relevant", (Sentence.from_text("x"),), 1)
        with pytest.raises(ConfigError):
            score(scorer, (rel, rel))
        pair_scorer = Scorer.zeros(FeatureSpec(dimension=8, seed=0), mode=MODE_PAIR)
        with pytest.raises(ConfigError):
            score(pair_scorer, rel)

    def test_linear_in_blocks(self):
        spec = FeatureSpec(dimension=16, seed=0)
        rng = np.random.default_rng(0)
        weights = rng.normal(size=32)
        scorer = Scorer(weights, 0.25, spec, mode=MODE_PAIR)
        rel = MetaNle("q", "d", "relevant", (Sentence.from_text("alpha beta"),), 1)
        non = MetaNle("q", "d", "nonrelevant", (Sentence.from_text("gamma delta"),), 1)
        total = score(scorer, (rel, non))
        block_a = float(weights[:16] @ featurize_text("alpha beta", spec))
        block_b = float(weights[16:] @ featurize_text("gamma delta", spec))
        assert total == pytest.approx(block_a + block_b + 0.25, abs=1e-12)

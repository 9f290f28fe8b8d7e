import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nlecal.corpus import RunRecord, run_from_scores
from nlecal.errors import InsufficientDataError
from nlecal.qpp import evaluate_qpp, nqc, wig, write_qpp_csv


class TestWig:
    def test_constant_scores(self):
        assert wig([2.0, 2.0, 2.0], k=2) == 0.0

    def test_worked_example(self):
        # mean = 2; ((4-2) + (2-2)) / 2 = 1
        assert wig([4.0, 2.0, 0.0], k=2) == pytest.approx(1.0)

    def test_k_larger_than_list(self):
        assert wig([3.0, 1.0], k=10) == pytest.approx(0.0)

    @given(
        scores=st.lists(st.floats(-100, 100), min_size=1, max_size=30),
        shift=st.floats(-50, 50),
        scale=st.floats(0.1, 10),
    )
    @settings(max_examples=100)
    def test_shift_invariant_and_scale_equivariant(self, scores, shift, scale):
        s = sorted(scores, reverse=True)
        base = wig(s, k=10)
        assert wig([v + shift for v in s], k=10) == pytest.approx(base, abs=1e-9)
        assert wig([v * scale for v in s], k=10) == pytest.approx(scale * base, abs=1e-7)


class TestNqc:
    def test_constant_top_k(self):
        assert nqc([1.0, 1.0, 1.0, 0.0], k=3) == 0.0

    def test_worked_example(self):
        # std([3, 1]) = 1 (population), mean of all = 1.5 -> 1 / 1.5
        assert nqc([3.0, 1.0, 1.0, 1.0], k=2) == pytest.approx(2 / 3, abs=1e-12)

    def test_zero_mean_guard(self):
        value = nqc([1.0, -1.0], k=2)
        assert np.isfinite(value)
        assert value == pytest.approx(1.0 / 1e-9)

    def test_translation_sensitive(self):
        s = [3.0, 1.0, 1.0, 1.0]
        assert nqc(s, k=2) != pytest.approx(nqc([v + 5 for v in s], k=2))

    def test_single_doc(self):
        assert nqc([2.0], k=10) == 0.0


def monotone_fixture():
    """Eight queries where a larger top-k mean implies a larger nDCG@10
    by construction."""
    scores = {}
    qrels = {}
    for qi in range(8):
        qid = f"q{qi}"
        n_docs = 12
        for di in range(n_docs):
            did = f"d{di:02d}"
            scores[(qid, did)] = (n_docs - di) * (1.0 + qi) * 0.1
        # Five grade-3 documents placed deeper for low qi, shallower for
        # high qi: nDCG@10 strictly increases with qi.
        start = 7 - qi
        for di in range(start, start + 5):
            qrels[(qid, f"d{di:02d}")] = 3
        for di in range(n_docs):
            qrels.setdefault((qid, f"d{di:02d}"), 0)
    return run_from_scores(scores), qrels


class TestEvaluateQpp:
    def test_perfect_predictor_self_correlation(self):
        records, qrels = monotone_fixture()
        result = evaluate_qpp(records, qrels, k=10)
        actual = [result.per_query[q]["actual"] for q in sorted(result.per_query)]
        assert len(set(actual)) > 1  # the fixture really varies

    def test_monotone_fixture_positive_kendall(self):
        records, qrels = monotone_fixture()
        result = evaluate_qpp(records, qrels, k=10)
        assert result.correlations["wig"]["kendall"] > 0

    def test_constant_predictor_surfaces_undefined_slot(self):
        scores = {}
        qrels = {}
        for qi in range(4):
            qid = f"q{qi}"
            for di in range(3):
                scores[(qid, f"d{di}")] = 1.0  # all equal: WIG = NQC = 0
                qrels[(qid, f"d{di}")] = di % 2
        result = evaluate_qpp(run_from_scores(scores), qrels, k=10)
        assert result.correlations["wig"]["pearson"] is None
        assert any(f.startswith("undefined_correlation:wig") for f in result.flags)

    def test_insufficient_shared_queries(self):
        records = [RunRecord("q1", "d1", 1, 1.0)]
        with pytest.raises(InsufficientDataError):
            evaluate_qpp(records, {("q1", "d1"): 1}, k=10)

    def test_unjudged_docs_count_as_zero(self):
        records = run_from_scores({("q1", "dA"): 2.0, ("q1", "dB"): 1.0, ("q2", "dA"): 2.0, ("q2", "dB"): 1.0})
        qrels = {("q1", "dA"): 3, ("q2", "dB"): 3}  # dB/dA unjudged per query
        result = evaluate_qpp(records, qrels, k=10)
        assert result.per_query["q1"]["actual"] == pytest.approx(1.0)
        assert result.per_query["q2"]["actual"] < 1.0

    def test_csv_shape(self, tmp_path):
        records, qrels = monotone_fixture()
        result = evaluate_qpp(records, qrels, k=10)
        path = tmp_path / "qpp.csv"
        write_qpp_csv([("methodA", result), ("methodB", result)], path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "method,wig_pearson,wig_kendall,nqc_pearson,nqc_kendall"
        assert len(lines) == 3
        assert lines[1].startswith("methodA,")

    def test_csv_leaves_undefined_slots_empty(self, tmp_path):
        from nlecal.qpp import QppResult

        result = QppResult(
            per_query={},
            correlations={"wig": {"pearson": None, "kendall": 0.5}, "nqc": {"pearson": 0.1, "kendall": None}},
        )
        path = tmp_path / "qpp.csv"
        write_qpp_csv([("m", result)], path)
        assert path.read_text().strip().splitlines()[1] == "m,,0.500000,0.100000,"

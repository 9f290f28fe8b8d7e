import numpy as np
import pytest

from nlecal.corpus import JudgedCollection


def make_collection(split: str, spec: dict[str, dict[str, int]], scale=(0, 3)) -> JudgedCollection:
    """Build a collection from {qid: {did: label}} with boilerplate texts."""
    queries = {qid: f"query text {qid}" for qid in spec}
    docs = {}
    labels = {}
    for qid, doc_map in spec.items():
        for did, label in doc_map.items():
            docs[(qid, did)] = f"document text {did}"
            labels[(qid, did)] = label
    return JudgedCollection(queries=queries, docs=docs, labels=labels, scale=scale, split=split)


@pytest.fixture
def toy_separable():
    """Two-query fixture that a linear scorer can fit exactly."""
    train = make_collection("train", {"tq1": {"d1": 3}, "tq2": {"d2": 0}})
    val = make_collection("validation", {"vq1": {"d1": 3}, "vq2": {"d2": 0}})
    texts = {}
    for col in (train, val):
        for (qid, did), label in col.labels.items():
            texts[(qid, did)] = "good match" if label == 3 else "bad match"
    return train, val, texts


@pytest.fixture
def rng():
    return np.random.default_rng(42)

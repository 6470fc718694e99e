import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ticket_triage import tfidf
from ticket_triage.errors import EmptyCorpus, EmptyVocabulary, ModelFormatError
from ticket_triage.tfidf import SparseVector, TfidfConfig

UNI = TfidfConfig(min_df=1, max_features=None, ngram_range=(1, 1), sublinear_tf=False)


def brute_force(corpus, doc, config):
    """Direct evaluation of the smoothed idf and (sublinear) tf formulas."""
    lo, hi = config.ngram_range

    def grams(d):
        return [" ".join(d[i:i + n]) for n in range(lo, hi + 1) for i in range(len(d) - n + 1)]

    N = len(corpus)
    df = Counter(t for d in corpus for t in set(grams(d)))
    terms = sorted((t for t, c in df.items() if c >= config.min_df),
                   key=lambda t: (-df[t], t))
    if config.max_features is not None:
        terms = terms[:config.max_features]
    terms = sorted(terms)
    idf = {t: math.log((1 + N) / (1 + df[t])) + 1 for t in terms}
    counts = Counter(g for g in grams(doc) if g in idf)
    w = {t: ((1 + math.log(c)) if config.sublinear_tf else c) * idf[t] for t, c in counts.items()}
    norm = math.sqrt(sum(v * v for v in w.values()))
    return terms, idf, {t: v / norm for t, v in w.items()} if norm else {}


def test_idf_hand_values():
    m = tfidf.fit([["a", "b"], ["a", "c"]], UNI)
    assert m.vocabulary == {"a": 0, "b": 1, "c": 2}
    assert m.idf[0] == pytest.approx(1.0, abs=1e-12)
    assert m.idf[1] == pytest.approx(math.log(1.5) + 1, abs=1e-12)
    assert m.idf[1] == pytest.approx(1.405465, abs=1e-6)


def test_transform_hand_values():
    m = tfidf.fit([["a", "b"], ["a", "c"]], UNI)
    v = m.transform(["a", "b"])
    assert list(v.indices) == [0, 1]
    idf_b = math.log(1.5) + 1
    norm = math.sqrt(1 + idf_b ** 2)
    assert norm == pytest.approx(1.724915, abs=1e-6)
    assert v.values[0] == pytest.approx(1 / norm, abs=1e-12)
    assert v.values[0] == pytest.approx(0.579739, abs=1e-6)
    # 1.405465 / 1.724915; the unit-norm partner of 0.579739
    assert v.values[1] == pytest.approx(idf_b / norm, abs=1e-12)
    assert v.values[1] == pytest.approx(0.814802, abs=1e-6)


def test_zero_vectors():
    m = tfidf.fit([["a", "b"], ["a", "c"]], UNI)
    assert len(m.transform([])) == 0
    assert len(m.transform(["zzz"])) == 0


def test_errors():
    with pytest.raises(EmptyCorpus):
        tfidf.fit([], UNI)
    with pytest.raises(EmptyVocabulary):
        tfidf.fit([["a"]], TfidfConfig(min_df=2))
    with pytest.raises(ValueError):
        TfidfConfig(min_df=0)
    with pytest.raises(ValueError):
        TfidfConfig(ngram_range=(2, 1))


def test_identical_documents_idf_one():
    m = tfidf.fit([["x", "y", "x"]] * 4, TfidfConfig(min_df=1))
    assert np.allclose(m.idf, 1.0)


def test_max_features_tie_break():
    corpus = [["b", "a", "c"], ["b", "a"], ["d"]]
    m = tfidf.fit(corpus, TfidfConfig(min_df=1, max_features=2, ngram_range=(1, 1)))
    # a and b both have df 2; c, d have df 1
    assert m.vocabulary == {"a": 0, "b": 1}
    m = tfidf.fit(corpus, TfidfConfig(min_df=1, max_features=3, ngram_range=(1, 1)))
    assert set(m.vocabulary) == {"a", "b", "c"}


docs = st.lists(st.lists(st.sampled_from("abcdefg"), max_size=8), min_size=1, max_size=10)


@settings(max_examples=60, deadline=None)
@given(docs, st.integers(1, 2), st.booleans(), st.integers(1, 2), st.one_of(st.none(), st.integers(1, 6)))
def test_oracle(corpus, min_df, sublinear, hi, max_features):
    cfg = TfidfConfig(min_df=min_df, max_features=max_features, ngram_range=(1, hi),
                      sublinear_tf=sublinear)
    terms, idf, _ = brute_force(corpus, [], cfg)
    if not terms:
        with pytest.raises(EmptyVocabulary):
            tfidf.fit(corpus, cfg)
        return
    m = tfidf.fit(corpus, cfg)
    assert list(m.vocabulary) == terms or sorted(m.vocabulary) == terms
    assert all(m.vocabulary[t] == i for i, t in enumerate(terms))
    for t, i in m.vocabulary.items():
        assert abs(m.idf[i] - idf[t]) <= 1e-9
    for doc in corpus:
        _, _, want = brute_force(corpus, doc, cfg)
        v = m.transform(doc)
        got = {terms[i]: x for i, x in zip(v.indices, v.values)}
        assert got.keys() == want.keys()
        for t in want:
            assert abs(got[t] - want[t]) <= 1e-9
        assert np.all(np.diff(v.indices) > 0)
        assert v.norm() == 0 or abs(v.norm() - 1) <= 1e-9


@settings(max_examples=30, deadline=None)
@given(docs, st.randoms(use_true_random=False))
def test_fit_order_invariant(corpus, rnd):
    cfg = TfidfConfig(min_df=1)
    shuffled = list(corpus)
    rnd.shuffle(shuffled)
    if not any(corpus):
        return
    assert tfidf.fit(corpus, cfg) == tfidf.fit(shuffled, cfg)


def test_transform_many_matches_single():
    corpus = [["a", "b", "a"], ["b", "c"], ["c", "a", "d"]]
    m = tfidf.fit(corpus, TfidfConfig(min_df=1))
    X = m.transform_many(corpus + [["q"]])
    for r, d in enumerate(corpus):
        assert np.array_equal(X[r].toarray().ravel(), m.transform(d).to_dense(m.n_features))
    assert X[3].nnz == 0


def test_serialization_round_trip():
    corpus = [["a", "b", "a"], ["b", "c"], ["c", "a", "d"], ["tabé", "x"]]
    m = tfidf.fit(corpus, TfidfConfig(min_df=1))
    text = tfidf.dumps(m)
    assert text.startswith("tfidf-model 1 ")
    m2 = tfidf.loads(text)
    assert m2 == m
    assert np.array_equal(m2.idf, m.idf)
    for d in corpus:
        a, b = m.transform(d), m2.transform(d)
        assert np.array_equal(a.indices, b.indices) and np.array_equal(a.values, b.values)


def test_loader_rejects_bad_input():
    m = tfidf.fit([["a", "b"], ["a", "c"]], UNI)
    lines = tfidf.dumps(m).splitlines()
    with pytest.raises(ModelFormatError):
        tfidf.loads("nonsense\n")
    with pytest.raises(ModelFormatError):
        tfidf.loads("\n".join(lines[:-1]) + "\n")
    dup = lines[:-1] + [lines[-2]]
    with pytest.raises(ModelFormatError):
        tfidf.loads("\n".join(dup) + "\n")


def test_sparse_vector_invariants():
    with pytest.raises(ValueError):
        SparseVector(np.array([2, 1]), np.array([1.0, 1.0]))
    with pytest.raises(ValueError):
        SparseVector(np.array([1]), np.array([0.0]))
    v = SparseVector.from_dense([0, 3.0, 0, 4.0])
    assert list(v.indices) == [1, 3] and v.norm() == 5.0


def test_fingerprint_content_and_count():
    a = tfidf.corpus_fingerprint([["a"], ["b"]])
    assert a == tfidf.corpus_fingerprint([["b"], ["a"]])
    assert a != tfidf.corpus_fingerprint([["a"], ["c"]])
    assert a.endswith(":2")

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ticket_triage import fasttext
from ticket_triage.errors import DegenerateLabels, ModelFormatError, ShapeMismatch
from ticket_triage.fasttext import FastTextModel, FtConfig

from oracles import central_diff, np_softmax, rel_err

SMALL = FtConfig(dim=8, buckets=1 << 12, epochs=25, lr0=0.5, seed=3)


def toy():
    docs = [["refund", "bad"]] * 50 + [["listing", "boost"]] * 50
    labels = ["owner"] * 50 + ["broker"] * 50
    return docs, labels


def test_fnv1a_vectors():
    assert fasttext.hash_feature("", 2 ** 32) == 2166136261
    # published FNV-1a 32-bit test vectors
    assert fasttext.hash_feature("a", 2 ** 32) == 0xE40C292C
    assert fasttext.hash_feature("foobar", 2 ** 32) == 0xBF9CF968


@given(st.text())
def test_hash_modulo_one(s):
    assert fasttext.hash_feature(s, 1) == 0


def test_hash_rejects_zero_buckets():
    with pytest.raises(ValueError):
        fasttext.hash_feature("x", 0)


def test_feature_extraction():
    cfg = FtConfig(char_ngrams=(3, 3))
    feats = fasttext.extract_features(["ab", "c"], cfg)
    assert feats[:3] == ["w|ab", "w|c", "w|</s>"]
    assert "b|ab c" in feats and "b|c </s>" in feats
    assert "c|<ab" in feats and "c|ab>" in feats and "c|<c>" in feats
    no_char = fasttext.extract_features(["ab"], FtConfig(word_ngrams=1, char_ngrams=None))
    assert no_char == ["w|ab", "w|</s>"]


def test_embed_empty_is_zero():
    m = fasttext.train(*toy(), config=FtConfig(dim=8, buckets=64, epochs=3))
    assert fasttext.extract_features([], m.config) == []
    assert np.array_equal(fasttext.embed(m, []), np.zeros(8))
    assert np.allclose(fasttext.predict_proba(m, []), 0.5)


def test_embed_is_mean_of_rows():
    cfg = FtConfig(dim=4, buckets=1 << 10, word_ngrams=1, char_ngrams=None, epochs=1)
    m = fasttext.train(*toy(), config=cfg)
    feats = fasttext.extract_features(["refund"], cfg)
    rows = [m.embedding_rows(np.array([fasttext.hash_feature(f, cfg.buckets)]))[0] for f in feats]
    assert np.allclose(fasttext.embed(m, ["refund"]), np.mean(rows, axis=0), atol=1e-15)


def test_unseen_rows_match_seeded_init():
    cfg = FtConfig(dim=4, buckets=1 << 10, epochs=1, seed=11)
    m = fasttext.train(*toy(), config=cfg)
    unseen = next(b for b in range(cfg.buckets) if b not in set(m.row_buckets.tolist()))
    row = m.embedding_rows(np.array([unseen]))[0]
    assert np.array_equal(row, fasttext.init_row(unseen, cfg))
    assert np.all(np.abs(row) <= 1 / cfg.dim)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    dim = int(rng.integers(1, 9))
    k = int(rng.integers(2, 5))
    n = int(rng.integers(1, 6))
    E = rng.normal(size=(n, dim))
    W = rng.normal(size=(k, dim))
    y = int(rng.integers(0, k))
    loss, dW, dR = fasttext.loss_and_grads(E, W, y)
    assert loss == pytest.approx(-np.log(np_softmax(W @ E.mean(axis=0))[y]), rel=1e-12)
    assert rel_err(dW, central_diff(lambda w: fasttext.loss_and_grads(E, w, y)[0], W)) < 1e-4
    assert rel_err(dR, central_diff(lambda e: fasttext.loss_and_grads(e, W, y)[0], E)) < 1e-4


def test_toy_corpus_separates():
    docs, labels = toy()
    losses = []
    m = fasttext.train(docs, labels, SMALL, epoch_losses=losses)
    acc = np.mean([fasttext.predict(m, d)[0] == l for d, l in zip(docs, labels)])
    assert acc == 1.0
    assert all(b <= a for a, b in zip(losses[:6], losses[1:6]))


def test_step_loss_decreases_for_small_lr():
    docs, labels = toy()
    seen = []
    fasttext.train(docs, labels, FtConfig(dim=8, buckets=1 << 12, epochs=1, lr0=0.05),
                   step_hook=lambda s, i, before, after: seen.append(after < before))
    assert all(seen[:100])


def test_errors():
    with pytest.raises(DegenerateLabels):
        fasttext.train([["a"], ["b"]], ["x", "x"], SMALL)
    with pytest.raises(ShapeMismatch):
        fasttext.train([["a"]], ["x", "y"], SMALL)
    with pytest.raises(ValueError):
        FtConfig(word_ngrams=3)


def test_zero_output_weights_uniform():
    cfg = FtConfig(dim=4, buckets=16)
    m = FastTextModel(cfg, ("b", "a2", "c"), np.zeros((3, 4)), np.empty(0, np.int64),
                      np.empty((0, 4)))
    p = fasttext.predict_proba(m, ["x"])
    assert np.allclose(p, 1 / 3)
    assert fasttext.predict(m, ["x"])[0] == "b"


def test_predict_matches_direct_softmax():
    docs, labels = toy()
    m = fasttext.train(docs, labels, FtConfig(dim=8, buckets=1 << 12, epochs=3))
    rng = np.random.default_rng(0)
    words = ["refund", "bad", "listing", "boost", "other", "x"]
    for _ in range(10):
        toks = list(rng.choice(words, size=int(rng.integers(0, 5))))
        want = np_softmax(m.output_weights @ fasttext.embed(m, toks))
        got = fasttext.predict_proba(m, toks)
        assert np.allclose(got, want, atol=1e-12)
        assert abs(got.sum() - 1) < 1e-9
        assert fasttext.predict(m, toks)[0] == m.label_names[int(np.argmax(want))]


def test_deterministic_and_round_trip():
    docs, labels = toy()
    cfg = FtConfig(dim=8, buckets=1 << 12, epochs=2, seed=5)
    a = fasttext.train(docs, labels, cfg)
    b = fasttext.train(docs, labels, cfg)
    assert fasttext.dumps(a) == fasttext.dumps(b)
    c = fasttext.loads(fasttext.dumps(a))
    for d in (["refund"], ["listing", "boost", "zz"], []):
        assert np.array_equal(fasttext.predict_proba(a, d), fasttext.predict_proba(c, d))


def test_loader_validates_dimensions():
    docs, labels = toy()
    text = fasttext.dumps(fasttext.train(docs, labels, FtConfig(dim=4, buckets=64, epochs=1)))
    lines = text.splitlines()
    broken = [l if not l.startswith("W") else l.rsplit(" ", 1)[0] for l in lines]
    with pytest.raises(ModelFormatError):
        fasttext.loads("\n".join(broken) + "\n")
    with pytest.raises(ModelFormatError):
        fasttext.loads("not a model\n")

"""TF-IDF vocabulary fitting and sparse, L2-normalized document vectors."""

from __future__ import annotations

import hashlib
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import EmptyCorpus, EmptyVocabulary, ModelFormatError

FORMAT_NAME = "tfidf-model"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class TfidfConfig:
    min_df: int = 2
    max_features: int | None = 50_000
    ngram_range: tuple[int, int] = (1, 2)
    sublinear_tf: bool = True

    def __post_init__(self):
        lo, hi = self.ngram_range
        if self.min_df < 1:
            raise ValueError("min_df must be >= 1")
        if not 1 <= lo <= hi <= 2:
            raise ValueError("ngram_range must satisfy 1 <= lo <= hi <= 2")
        if self.max_features is not None and self.max_features < 1:
            raise ValueError("max_features must be positive or None")


@dataclass(frozen=True)
class SparseVector:
    """Sorted index/value pairs with no explicit zeros."""

    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        val = np.asarray(self.values, dtype=np.float64)
        if idx.shape != val.shape or idx.ndim != 1:
            raise ValueError("indices and values must be 1-D and equal length")
        if idx.size > 1 and np.any(np.diff(idx) <= 0):
            raise ValueError("indices must be strictly increasing")
        if np.any(val == 0) or not np.all(np.isfinite(val)):
            raise ValueError("values must be finite and nonzero")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)

    @classmethod
    def zero(cls) -> "SparseVector":
        return cls(np.empty(0, np.int64), np.empty(0, np.float64))

    @classmethod
    def from_dense(cls, dense: Sequence[float]) -> "SparseVector":
        arr = np.asarray(dense, dtype=np.float64)
        nz = np.flatnonzero(arr)
        return cls(nz, arr[nz])

    def to_dense(self, size: int) -> np.ndarray:
        out = np.zeros(size)
        out[self.indices] = self.values
        return out

    def norm(self) -> float:
        return float(np.sqrt(np.dot(self.values, self.values)))

    def __len__(self) -> int:
        return int(self.indices.size)


def to_csr(vectors: Sequence[SparseVector], n_features: int) -> sp.csr_matrix:
    indptr = np.zeros(len(vectors) + 1, dtype=np.int64)
    for i, v in enumerate(vectors):
        indptr[i + 1] = indptr[i] + len(v)
    indices = (np.concatenate([v.indices for v in vectors])
               if vectors else np.empty(0, np.int64))
    data = (np.concatenate([v.values for v in vectors])
            if vectors else np.empty(0))
    return sp.csr_matrix((data, indices, indptr), shape=(len(vectors), n_features))


def ngrams(tokens: Sequence[str], ngram_range: tuple[int, int]) -> list[str]:
    lo, hi = ngram_range
    out: list[str] = []
    for n in range(lo, hi + 1):
        out.extend(" ".join(tokens[i:i + n]) for i in range(len(tokens) - n + 1))
    return out


def corpus_fingerprint(corpus: Iterable[Sequence[str]]) -> str:
    """Order-independent content hash of a tokenized corpus, suffixed with its size."""
    digests = sorted(hashlib.sha256("\x1f".join(doc).encode("utf-8")).hexdigest()
                     for doc in corpus)
    h = hashlib.sha256("\n".join(digests).encode("ascii")).hexdigest()
    return f"{h[:32]}:{len(digests)}"


@dataclass(frozen=True)
class TfidfModel:
    vocabulary: dict[str, int]
    idf: np.ndarray
    config: TfidfConfig
    n_documents: int
    fingerprint: str
    _terms: tuple[str, ...] = field(default=(), repr=False, compare=False)

    @property
    def n_features(self) -> int:
        return len(self.vocabulary)

    def transform(self, doc: Sequence[str]) -> SparseVector:
        return transform(self, doc)

    def transform_many(self, docs: Sequence[Sequence[str]]) -> sp.csr_matrix:
        return to_csr([transform(self, d) for d in docs], self.n_features)

    def __eq__(self, other):
        if not isinstance(other, TfidfModel):
            return NotImplemented
        return (self.vocabulary == other.vocabulary
                and np.array_equal(self.idf, other.idf)
                and self.config == other.config
                and self.n_documents == other.n_documents
                and self.fingerprint == other.fingerprint)

    __hash__ = None


def fit(corpus: Sequence[Sequence[str]], config: TfidfConfig | None = None) -> TfidfModel:
    config = config or TfidfConfig()
    n_docs = len(corpus)
    if n_docs == 0:
        raise EmptyCorpus("cannot fit TF-IDF on an empty corpus")

    df: Counter[str] = Counter()
    for doc in corpus:
        df.update(set(ngrams(doc, config.ngram_range)))

    kept = [(t, c) for t, c in df.items() if c >= config.min_df]
    if not kept:
        raise EmptyVocabulary(f"no term reaches min_df={config.min_df}")
    if config.max_features is not None and len(kept) > config.max_features:
        kept.sort(key=lambda tc: (-tc[1], tc[0]))
        kept = kept[:config.max_features]

    terms = sorted(t for t, _ in kept)
    vocabulary = {t: i for i, t in enumerate(terms)}
    idf = np.array([math.log((1 + n_docs) / (1 + df[t])) + 1.0 for t in terms])
    return TfidfModel(vocabulary, idf, config, n_docs, corpus_fingerprint(corpus),
                      tuple(terms))


def transform(model: TfidfModel, doc: Sequence[str]) -> SparseVector:
    counts: Counter[int] = Counter()
    for term in ngrams(doc, model.config.ngram_range):
        j = model.vocabulary.get(term)
        if j is not None:
            counts[j] += 1
    if not counts:
        return SparseVector.zero()

    idx = np.array(sorted(counts), dtype=np.int64)
    tf = np.array([counts[j] for j in idx], dtype=np.float64)
    if model.config.sublinear_tf:
        tf = 1.0 + np.log(tf)
    w = tf * model.idf[idx]
    return SparseVector(idx, w / np.sqrt(np.dot(w, w)))


# -- serialization -----------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def dumps(model: TfidfModel) -> str:
    c = model.config
    header = " ".join([
        FORMAT_NAME, str(FORMAT_VERSION),
        f"V={model.n_features}", f"N={model.n_documents}",
        f"min_df={c.min_df}",
        f"max_features={'none' if c.max_features is None else c.max_features}",
        f"ngram_range={c.ngram_range[0]},{c.ngram_range[1]}",
        f"sublinear_tf={int(c.sublinear_tf)}",
        f"fingerprint={model.fingerprint}",
    ])
    terms = sorted(model.vocabulary, key=model.vocabulary.__getitem__)
    lines = [header]
    lines += [f"{t}\t{model.vocabulary[t]}\t{_fmt(model.idf[model.vocabulary[t]])}"
              for t in terms]
    return "\n".join(lines) + "\n"


def loads(text: str) -> TfidfModel:
    lines = text.rstrip("\n").split("\n")
    head = lines[0].split(" ")
    if head[:2] != [FORMAT_NAME, str(FORMAT_VERSION)]:
        raise ModelFormatError(f"not a {FORMAT_NAME} v{FORMAT_VERSION} document")
    try:
        kv = dict(item.split("=", 1) for item in head[2:])
        V, N = int(kv["V"]), int(kv["N"])
        lo, hi = (int(p) for p in kv["ngram_range"].split(","))
        mf = kv["max_features"]
        config = TfidfConfig(
            min_df=int(kv["min_df"]),
            max_features=None if mf == "none" else int(mf),
            ngram_range=(lo, hi),
            sublinear_tf=kv["sublinear_tf"] == "1",
        )
        fingerprint = kv["fingerprint"]
    except (KeyError, ValueError) as exc:
        raise ModelFormatError(f"bad tfidf header: {exc}") from exc

    if len(lines) - 1 != V:
        raise ModelFormatError(f"expected {V} terms, found {len(lines) - 1}")
    vocabulary: dict[str, int] = {}
    idf = np.zeros(V)
    for line_no, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != 3:
            raise ModelFormatError(f"line {line_no}: expected term, index, idf")
        j = int(parts[1])
        if not 0 <= j < V or parts[0] in vocabulary:
            raise ModelFormatError(f"line {line_no}: bad or duplicate entry")
        vocabulary[parts[0]] = j
        idf[j] = float(parts[2])
    if sorted(vocabulary.values()) != list(range(V)):
        raise ModelFormatError("vocabulary indices are not a bijection onto 0..V-1")
    terms = tuple(sorted(vocabulary, key=vocabulary.__getitem__))
    return TfidfModel(vocabulary, idf, config, N, fingerprint, terms)

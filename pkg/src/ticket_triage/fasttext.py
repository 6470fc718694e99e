"""Hashed n-gram linear classifier in the fastText family (user-type model).

Word unigrams, word bigrams and character n-grams are hashed with 32-bit
FNV-1a into a fixed bucket range. The bucket rows are averaged into one dense
vector, and a linear softmax head is applied to it. Training is plain
per-example SGD with a linearly decaying learning rate.

The embedding table is logically ``buckets x dim``, but rows are only
materialized once a training document touches them. Every other row keeps
its seeded initial value, which is regenerated on demand, so a 2**20-bucket
table does not have to be allocated.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .errors import DegenerateLabels, ModelFormatError, ShapeMismatch

FORMAT_NAME = "fasttext-model"
FORMAT_VERSION = 1

FNV_OFFSET = 2166136261
FNV_PRIME = 16777619
EOS = "</s>"


@dataclass(frozen=True)
class FtConfig:
    dim: int = 64
    buckets: int = 2 ** 20
    word_ngrams: int = 2
    char_ngrams: tuple[int, int] | None = (3, 5)
    epochs: int = 25
    lr0: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1 or self.buckets < 1:
            raise ValueError("dim and buckets must be >= 1")
        if self.word_ngrams not in (1, 2):
            raise ValueError("word_ngrams must be 1 or 2")
        if self.char_ngrams is not None:
            lo, hi = self.char_ngrams
            if not 1 <= lo <= hi:
                raise ValueError("char_ngrams must satisfy 1 <= lo <= hi")
        if self.epochs < 1 or self.lr0 <= 0:
            raise ValueError("epochs must be >= 1 and lr0 > 0")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@lru_cache(maxsize=1 << 18)
def fnv1a_32(s: str) -> int:
    h = FNV_OFFSET
    for byte in s.encode("utf-8"):
        h ^= byte
        h = (h * FNV_PRIME) & 0xFFFFFFFF
    return h


def hash_feature(s: str, buckets: int) -> int:
    """32-bit FNV-1a of the UTF-8 bytes of ``s``, modulo ``buckets``."""
    if buckets < 1:
        raise ValueError("buckets must be >= 1")
    return fnv1a_32(s) % buckets


def extract_features(tokens: Sequence[str], config: FtConfig) -> list[str]:
    """Feature strings for a token sequence, duplicates retained.

    Kinds are namespaced (``w|``, ``b|``, ``c|``) so a short word cannot share
    a bucket string with an identical character n-gram.
    """
    if not tokens:
        return []
    words = list(tokens) + [EOS]
    feats = [f"w|{w}" for w in words]
    if config.word_ngrams >= 2:
        feats += [f"b|{a} {b}" for a, b in zip(words, words[1:])]
    if config.char_ngrams is not None:
        lo, hi = config.char_ngrams
        for tok in tokens:
            wrapped = f"<{tok}>"
            for n in range(lo, hi + 1):
                feats += [f"c|{wrapped[i:i + n]}" for i in range(len(wrapped) - n + 1)]
    return feats


def feature_buckets(tokens: Sequence[str], config: FtConfig) -> np.ndarray:
    return np.array([hash_feature(f, config.buckets)
                     for f in extract_features(tokens, config)], dtype=np.int64)


def init_row(bucket: int, config: FtConfig) -> np.ndarray:
    """Seeded initial value of one embedding row, uniform in [-1/dim, 1/dim]."""
    rng = np.random.default_rng([config.seed, int(bucket)])
    bound = 1.0 / config.dim
    return rng.uniform(-bound, bound, config.dim)


@dataclass(frozen=True)
class FastTextModel:
    config: FtConfig
    label_names: tuple[str, ...]
    output_weights: np.ndarray          # K x dim
    row_buckets: np.ndarray             # sorted bucket ids with materialized rows
    rows: np.ndarray                    # len(row_buckets) x dim

    def __post_init__(self):
        if len(set(self.label_names)) != len(self.label_names):
            raise ValueError("label names must be unique")

    def embedding_rows(self, buckets: np.ndarray) -> np.ndarray:
        out = np.empty((len(buckets), self.config.dim))
        pos = np.searchsorted(self.row_buckets, buckets)
        for i, (b, p) in enumerate(zip(buckets, pos)):
            if p < self.row_buckets.size and self.row_buckets[p] == b:
                out[i] = self.rows[p]
            else:
                out[i] = init_row(b, self.config)
        return out


# -- forward / backward ------------------------------------------------------

def _softmax(s):
    e = np.exp(s - s.max())
    return e / e.sum()


def loss_and_grads(E_rows: np.ndarray, W: np.ndarray, label: int):
    """Cross-entropy of one example given its feature rows (with multiplicity).

    Returns ``(loss, dW, dRows)`` where ``dRows[i]`` is the gradient with
    respect to ``E_rows[i]``; a bucket appearing twice gets two slots.
    """
    n = E_rows.shape[0]
    v = E_rows.mean(axis=0) if n else np.zeros(W.shape[1])
    s = W @ v
    p = _softmax(s)
    loss = float(np.log(np.exp(s - s.max()).sum()) + s.max() - s[label])
    gs = p.copy()
    gs[label] -= 1.0
    dW = np.outer(gs, v)
    dv = W.T @ gs
    dRows = np.tile(dv / n, (n, 1)) if n else np.zeros((0, W.shape[1]))
    return loss, dW, dRows


def embed(model: FastTextModel, tokens: Sequence[str]) -> np.ndarray:
    buckets = feature_buckets(tokens, model.config)
    if buckets.size == 0:
        return np.zeros(model.config.dim)
    return model.embedding_rows(buckets).mean(axis=0)


def predict_proba(model: FastTextModel, tokens: Sequence[str]) -> np.ndarray:
    return _softmax(model.output_weights @ embed(model, tokens))


def predict(model: FastTextModel, tokens: Sequence[str]) -> tuple[str, float]:
    """Top label and its probability; ties go to the lexicographically smallest label."""
    p = predict_proba(model, tokens)
    # label_names is sorted, so the first maximal index is the smallest name
    k = int(np.argmax(p))
    return model.label_names[k], float(p[k])


# -- training ----------------------------------------------------------------

def train(docs: Sequence[Sequence[str]], labels: Sequence[str],
          config: FtConfig | None = None, epoch_losses: list | None = None,
          step_hook=None) -> FastTextModel:
    """Per-example SGD on the full softmax.

    ``epoch_losses`` (if given) receives the mean training loss over the
    whole corpus before the first epoch and after each epoch. ``step_hook``
    is called as ``step_hook(step, doc_index, loss_before, loss_after)`` and
    is meant for diagnostics only, since it doubles the cost of each step.
    """
    config = config or FtConfig()
    if len(docs) != len(labels):
        raise ShapeMismatch(f"{len(docs)} documents but {len(labels)} labels")
    names = tuple(sorted(set(labels)))
    if len(docs) < 2 or len(names) < 2:
        raise DegenerateLabels("need at least two distinct labels")

    label_idx = {name: k for k, name in enumerate(names)}
    y = np.array([label_idx[l] for l in labels], dtype=np.int64)
    doc_buckets = [feature_buckets(d, config) for d in docs]
    used = np.unique(np.concatenate(doc_buckets)) if doc_buckets else np.empty(0, np.int64)
    E = np.array([init_row(b, config) for b in used]).reshape(used.size, config.dim)
    local = [np.searchsorted(used, b) for b in doc_buckets]
    W = np.zeros((len(names), config.dim))

    def corpus_loss():
        return float(np.mean([loss_and_grads(E[ix], W, y[i])[0]
                              for i, ix in enumerate(local)]))

    if epoch_losses is not None:
        epoch_losses.append(corpus_loss())

    rng = np.random.default_rng(config.seed)
    total = config.epochs * len(docs)
    step = 0
    for _ in range(config.epochs):
        for i in rng.permutation(len(docs)):
            lr = config.lr0 * (1.0 - step / total)
            ix = local[i]
            loss, dW, dRows = loss_and_grads(E[ix], W, y[i])
            W -= lr * dW
            if ix.size:
                np.add.at(E, ix, -lr * dRows)
            if step_hook is not None:
                after = loss_and_grads(E[ix], W, y[i])[0]
                step_hook(step, int(i), loss, after)
            step += 1
        if epoch_losses is not None:
            epoch_losses.append(corpus_loss())

    return FastTextModel(config, names, W, used, E)


# -- serialization -----------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def dumps(model: FastTextModel) -> str:
    c = model.config
    cn = "none" if c.char_ngrams is None else f"{c.char_ngrams[0]},{c.char_ngrams[1]}"
    lines = [
        f"{FORMAT_NAME} {FORMAT_VERSION} dim={c.dim} buckets={c.buckets} "
        f"K={len(model.label_names)} rows={model.row_buckets.size} "
        f"word_ngrams={c.word_ngrams} char_ngrams={cn} epochs={c.epochs} "
        f"lr0={_fmt(c.lr0)} seed={c.seed}",
        "labels\t" + "\t".join(model.label_names),
    ]
    for k in range(len(model.label_names)):
        lines.append("W " + " ".join(_fmt(x) for x in model.output_weights[k]))
    for b, row in zip(model.row_buckets, model.rows):
        lines.append(f"E {b} " + " ".join(_fmt(x) for x in row))
    return "\n".join(lines) + "\n"


def loads(text: str) -> FastTextModel:
    lines = text.rstrip("\n").split("\n")
    try:
        head = lines[0].split()
        if head[:2] != [FORMAT_NAME, str(FORMAT_VERSION)]:
            raise ModelFormatError(f"not a {FORMAT_NAME} v{FORMAT_VERSION} document")
        kv = dict(t.split("=", 1) for t in head[2:])
        cn = kv["char_ngrams"]
        config = FtConfig(
            dim=int(kv["dim"]), buckets=int(kv["buckets"]),
            word_ngrams=int(kv["word_ngrams"]),
            char_ngrams=None if cn == "none" else tuple(int(p) for p in cn.split(",")),
            epochs=int(kv["epochs"]), lr0=float(kv["lr0"]), seed=int(kv["seed"]),
        )
        K, n_rows = int(kv["K"]), int(kv["rows"])
        label_line = lines[1].split("\t")
        if label_line[0] != "labels" or len(label_line) - 1 != K:
            raise ModelFormatError("label line does not match K")
        names = tuple(label_line[1:])
        if len(lines) != 2 + K + n_rows:
            raise ModelFormatError(f"expected {2 + K + n_rows} lines, found {len(lines)}")
        W = np.array([[float(x) for x in lines[2 + k].split()[1:]] for k in range(K)])
        buckets = np.empty(n_rows, dtype=np.int64)
        E = np.empty((n_rows, config.dim))
        for r in range(n_rows):
            parts = lines[2 + K + r].split()
            if parts[0] != "E" or len(parts) != 2 + config.dim:
                raise ModelFormatError(f"line {3 + K + r}: bad embedding row")
            buckets[r] = int(parts[1])
            E[r] = [float(x) for x in parts[2:]]
    except ModelFormatError:
        raise
    except (IndexError, KeyError, ValueError) as exc:
        raise ModelFormatError(f"malformed fasttext model: {exc}") from exc
    if W.shape != (K, config.dim):
        raise ModelFormatError(f"output weights must be {K}x{config.dim}")
    if n_rows and (np.any(np.diff(buckets) <= 0) or buckets[0] < 0
                   or buckets[-1] >= config.buckets):
        raise ModelFormatError("embedding bucket ids must be sorted and in range")
    if not (np.all(np.isfinite(W)) and np.all(np.isfinite(E))):
        raise ModelFormatError("non-finite weights")
    return FastTextModel(config, names, W, buckets, E)

"""Gradient-boosted decision trees over sparse features.

Second-order boosting with exact greedy split search. Absent (zero) feature
values are routed by a per-split default direction learned from the data,
which suits the mostly-empty TF-IDF rows fed in by the triage models.

Two heads are supported: ``binary_logistic`` (one tree per round) and
``softmax`` (K trees per round, all grown from the same start-of-round
probabilities).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import (DegenerateLabels, FeatureOutOfRange, ModelFormatError,
                     ShapeMismatch)
from .tfidf import SparseVector, to_csr

FORMAT_NAME = "gbdt-model"
FORMAT_VERSION = 1

BINARY = "binary_logistic"
SOFTMAX = "softmax"

_PRIOR_FLOOR = 1e-6


@dataclass(frozen=True)
class GbdtConfig:
    n_rounds: int = 200
    learning_rate: float = 0.1
    max_depth: int = 6
    reg_lambda: float = 1.0
    gamma: float = 0.0
    min_child_hessian: float = 1.0
    objective: str = SOFTMAX
    n_classes: int | None = None  # softmax only; defaults to max(label) + 1

    def __post_init__(self):
        if self.n_rounds < 1:
            raise ValueError("n_rounds must be >= 1")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ValueError("learning_rate must be in (0, 1]")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.reg_lambda < 0 or self.gamma < 0 or self.min_child_hessian < 0:
            raise ValueError("reg_lambda, gamma and min_child_hessian must be >= 0")
        if self.objective not in (BINARY, SOFTMAX):
            raise ValueError(f"unknown objective {self.objective!r}")


@dataclass(frozen=True)
class Tree:
    """Node arena in preorder; node 0 is the root.

    Leaves have ``feature == -1`` and ``left == right == -1``.
    """

    feature: np.ndarray
    threshold: np.ndarray
    default_left: np.ndarray
    left: np.ndarray
    right: np.ndarray
    weight: np.ndarray

    @property
    def n_nodes(self) -> int:
        return int(self.feature.size)

    @cached_property
    def _py(self):
        return (self.feature.tolist(), self.threshold.tolist(),
                self.default_left.tolist(), self.left.tolist(),
                self.right.tolist(), self.weight.tolist())

    def value(self, x: dict[int, float]) -> float:
        """Leaf weight reached by a sparse row given as {feature: value}."""
        feat, thr, dl, left, right, weight = self._py
        i = 0
        while feat[i] >= 0:
            v = x.get(feat[i], 0.0)
            if v == 0.0:
                i = left[i] if dl[i] else right[i]
            else:
                i = left[i] if v < thr[i] else right[i]
        return weight[i]

    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())


@dataclass(frozen=True)
class GbdtModel:
    trees: list[tuple[int, int, Tree]]
    base_score: np.ndarray
    n_classes: int
    config: GbdtConfig
    feature_count: int

    @property
    def n_outputs(self) -> int:
        """Number of margins: 1 for the binary head, K for softmax."""
        return 1 if self.config.objective == BINARY else self.n_classes


# -- losses ------------------------------------------------------------------

def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(margins):
    m = np.asarray(margins, dtype=np.float64)
    e = np.exp(m - m.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def logistic_loss(margin, y) -> float:
    """Summed binary log-loss for margins and 0/1 labels."""
    z = np.asarray(margin, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return float(np.sum(np.logaddexp(0.0, z) - y * z))


def logistic_grad_hess(margin, y):
    p = sigmoid(margin)
    return p - np.asarray(y, dtype=np.float64), p * (1.0 - p)


def softmax_loss(margins, y) -> float:
    m = np.asarray(margins, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    mx = m.max(axis=1)
    lse = mx + np.log(np.exp(m - mx[:, None]).sum(axis=1))
    return float(np.sum(lse - m[np.arange(len(y)), y]))


def softmax_grad_hess(margins, y):
    """Per-class gradient and diagonal hessian of the softmax cross-entropy."""
    p = softmax(margins)
    onehot = np.zeros_like(p)
    onehot[np.arange(len(y)), np.asarray(y, dtype=np.int64)] = 1.0
    return p - onehot, p * (1.0 - p)


# -- split search ------------------------------------------------------------

@dataclass
class Split:
    gain: float
    feature: int
    threshold: float
    default_left: bool


class _SortedEntries:
    """Nonzero entries of X sorted by (column, value, row)."""

    def __init__(self, X: sp.csr_matrix):
        coo = X.tocoo()
        keep = coo.data != 0
        row, col, val = coo.row[keep], coo.col[keep], coo.data[keep]
        order = np.lexsort((row, val, col))
        self.row = row[order].astype(np.int64)
        self.col = col[order].astype(np.int64)
        self.val = val[order].astype(np.float64)


def _leaf_gain_term(G, H, lam):
    return G * G / (H + lam)


def find_best_split(entries: _SortedEntries, P: np.ndarray, n_rows: int,
                    G: float, H: float, g: np.ndarray, h: np.ndarray,
                    reg_lambda: float, gamma: float,
                    min_child_hessian: float) -> Split | None:
    """Best split of a node holding ``n_rows`` examples.

    ``P`` indexes the node's nonzero entries (kept in sorted order) and
    ``G``/``H`` are the node's gradient and hessian totals. Candidate
    thresholds are midpoints between consecutive distinct values of each
    dense column (absent entries count as 0); absent entries are tried on
    both sides. Ties on gain go to the smallest (feature, threshold) and
    then to default-left.
    """
    if P.size == 0:
        return None
    rows = entries.row[P]
    col = entries.col[P]
    val = entries.val[P]
    gg = g[rows]
    hh = h[rows]

    m = P.size
    new_seg = np.empty(m, dtype=bool)
    new_seg[0] = True
    np.not_equal(col[1:], col[:-1], out=new_seg[1:])
    starts = np.flatnonzero(new_seg)
    ends = np.append(starts[1:], m) - 1
    seg_id = np.cumsum(new_seg) - 1

    cg = np.cumsum(gg)
    ch = np.cumsum(hh)
    off_g = np.concatenate(([0.0], cg))[starts]
    off_h = np.concatenate(([0.0], ch))[starts]
    left_g = cg - off_g[seg_id]          # nonzero entries up to and including p
    left_h = ch - off_h[seg_id]
    left_n = np.arange(m) - starts[seg_id] + 1

    tot_g = left_g[ends]
    tot_h = left_h[ends]
    seg_n = ends - starts + 1
    zero_n = n_rows - seg_n
    zero_g = G - tot_g
    zero_h = H - tot_h

    # split after entry p (entries 0..p of the column go left)
    is_end = np.zeros(m, dtype=bool)
    is_end[ends] = True
    nxt = np.append(val[1:], np.inf)
    has_zero = zero_n[seg_id] > 0
    valid_b = np.where(is_end, has_zero & (val < 0), val < nxt)
    straddle = has_zero & (val < 0) & (nxt > 0)
    thr_b = np.where(is_end | straddle, val / 2.0, (val + nxt) / 2.0)
    # split before the first entry (all nonzeros go right, zeros < first value)
    first_val = val[starts]
    valid_a = (zero_n > 0) & (first_val > 0)

    cand_seg = np.concatenate((seg_id[valid_b], np.flatnonzero(valid_a)))
    if cand_seg.size == 0:
        return None
    cand_thr = np.concatenate((thr_b[valid_b], first_val[valid_a] / 2.0))
    cand_lg = np.concatenate((left_g[valid_b], np.zeros(int(valid_a.sum()))))
    cand_lh = np.concatenate((left_h[valid_b], np.zeros(int(valid_a.sum()))))
    cand_ln = np.concatenate((left_n[valid_b], np.zeros(int(valid_a.sum()), np.int64)))

    zn = zero_n[cand_seg]
    zg = zero_g[cand_seg]
    zh = zero_h[cand_seg]

    # default-left variant; with no absent rows the natural side of 0 is used
    dl_flag = np.where(zn > 0, True, cand_thr > 0)
    gl_l = cand_lg + np.where(dl_flag, zg, 0.0)
    hl_l = cand_lh + np.where(dl_flag, zh, 0.0)
    nl_l = cand_ln + np.where(dl_flag, zn, 0)
    # default-right variant, only meaningful when the node has absent rows
    gl_r, hl_r, nl_r = cand_lg, cand_lh, cand_ln
    right_ok = zn > 0

    feats = np.concatenate((col[valid_b], col[starts[valid_a]]))

    parent = _leaf_gain_term(G, H, reg_lambda)

    def gains(GL, HL, NL, ok):
        GR = G - GL
        HR = H - HL
        NR = n_rows - NL
        gain = 0.5 * (_leaf_gain_term(GL, HL, reg_lambda)
                      + _leaf_gain_term(GR, HR, reg_lambda) - parent) - gamma
        ok = ok & (NL >= 1) & (NR >= 1) & (HL >= min_child_hessian) \
            & (HR >= min_child_hessian)
        return np.where(ok, gain, -np.inf)

    gain_l = gains(gl_l, hl_l, nl_l, np.ones(cand_seg.size, dtype=bool))
    gain_r = gains(gl_r, hl_r, nl_r, right_ok)

    all_gain = np.concatenate((gain_l, gain_r))
    all_feat = np.concatenate((feats, feats))
    all_thr = np.concatenate((cand_thr, cand_thr))
    all_dl = np.concatenate((dl_flag, np.zeros(cand_seg.size, dtype=bool)))

    best = all_gain.max()
    if not np.isfinite(best):
        return None
    tied = np.flatnonzero(all_gain == best)
    if tied.size > 1:
        order = np.lexsort((~all_dl[tied], all_thr[tied], all_feat[tied]))
        pick = tied[order[0]]
    else:
        pick = tied[0]
    return Split(float(best), int(all_feat[pick]), float(all_thr[pick]),
                 bool(all_dl[pick]))


def split_gain(GL, HL, GR, HR, reg_lambda, gamma) -> float:
    """Structure-score gain of splitting a node into (GL, HL) and (GR, HR)."""
    G, H = GL + GR, HL + HR
    return 0.5 * (GL * GL / (HL + reg_lambda) + GR * GR / (HR + reg_lambda)
                  - G * G / (H + reg_lambda)) - gamma


def leaf_weight(G, H, reg_lambda, learning_rate=1.0) -> float:
    return -G / (H + reg_lambda) * learning_rate


# -- tree growing ------------------------------------------------------------

class _TreeBuilder:
    def __init__(self, entries, n_rows, g, h, config: GbdtConfig):
        self.e = entries
        self.n_rows = n_rows
        self.g = g
        self.h = h
        self.cfg = config
        self.nodes: list[list] = []
        self.go_left = np.zeros(n_rows, dtype=bool)
        self.delta = np.zeros(n_rows)
        self.splits: list[Split] = []

    def grow(self, P, R, depth) -> int:
        node_id = len(self.nodes)
        self.nodes.append([-1, 0.0, False, -1, -1, 0.0])
        G = float(np.sum(self.g[R]))
        H = float(np.sum(self.h[R]))
        cfg = self.cfg
        split = None
        if depth < cfg.max_depth:
            split = find_best_split(self.e, P, R.size, G, H, self.g, self.h,
                                    cfg.reg_lambda, cfg.gamma, cfg.min_child_hessian)
        if split is None or split.gain <= 0:
            w = leaf_weight(G, H, cfg.reg_lambda, cfg.learning_rate)
            self.nodes[node_id][5] = w
            self.delta[R] = w
            return node_id

        self.splits.append(split)
        gl = self.go_left
        gl[R] = split.default_left
        in_feat = P[self.e.col[P] == split.feature]
        gl[self.e.row[in_feat]] = self.e.val[in_feat] < split.threshold
        R_left, R_right = R[gl[R]], R[~gl[R]]
        p_left = gl[self.e.row[P]]
        P_left, P_right = P[p_left], P[~p_left]

        left = self.grow(P_left, R_left, depth + 1)
        right = self.grow(P_right, R_right, depth + 1)
        self.nodes[node_id][:5] = [split.feature, split.threshold,
                                   split.default_left, left, right]
        return node_id

    def tree(self) -> Tree:
        cols = list(zip(*self.nodes))
        return Tree(
            feature=np.array(cols[0], dtype=np.int64),
            threshold=np.array(cols[1], dtype=np.float64),
            default_left=np.array(cols[2], dtype=bool),
            left=np.array(cols[3], dtype=np.int64),
            right=np.array(cols[4], dtype=np.int64),
            weight=np.array(cols[5], dtype=np.float64),
        )


def build_tree(X: sp.csr_matrix, g: np.ndarray, h: np.ndarray,
               config: GbdtConfig, entries: _SortedEntries | None = None):
    """Grow one regression tree on (g, h); returns (tree, per-row leaf values, splits)."""
    entries = entries or _SortedEntries(X)
    n = X.shape[0]
    b = _TreeBuilder(entries, n, np.asarray(g, np.float64),
                     np.asarray(h, np.float64), config)
    b.grow(np.arange(entries.row.size), np.arange(n), 0)
    return b.tree(), b.delta, b.splits


def _as_csr(X, n_features=None) -> sp.csr_matrix:
    if sp.issparse(X):
        return sp.csr_matrix(X, dtype=np.float64)
    if n_features is None:
        n_features = max((int(v.indices[-1]) + 1 for v in X if len(v)), default=0)
    return to_csr(X, n_features)


def _base_score(y: np.ndarray, n_classes: int, objective: str) -> np.ndarray:
    counts = np.bincount(y, minlength=n_classes).astype(np.float64)
    prior = np.clip(counts / counts.sum(), _PRIOR_FLOOR, 1.0 - _PRIOR_FLOOR)
    if objective == BINARY:
        return np.array([np.log(prior[1] / (1.0 - prior[1]))])
    return np.log(prior)


def train(X, y: Sequence[int], config: GbdtConfig | None = None,
          n_features: int | None = None, history: list | None = None) -> GbdtModel:
    """Fit a boosted ensemble.

    ``X`` is a list of SparseVector or a scipy sparse matrix. When given, the
    training loss before each round and after the last is appended to
    ``history``.
    """
    config = config or GbdtConfig()
    y = np.asarray(y, dtype=np.int64)
    n_rows = X.shape[0] if sp.issparse(X) else len(X)
    if n_rows != y.size:
        raise ShapeMismatch(f"{n_rows} feature rows but {y.size} labels")
    if y.size < 2 or np.unique(y).size < 2:
        raise DegenerateLabels("need at least two distinct labels")
    if y.min() < 0:
        raise ValueError("labels must be non-negative class ids")

    X = _as_csr(X, n_features)
    feature_count = X.shape[1] if n_features is None else n_features
    if config.objective == BINARY:
        if y.max() > 1:
            raise ValueError("binary_logistic needs 0/1 labels")
        K = 2
    else:
        K = config.n_classes or int(y.max()) + 1
        if y.max() >= K:
            raise ValueError(f"label {y.max()} outside 0..{K - 1}")

    base = _base_score(y, K, config.objective)
    entries = _SortedEntries(X)
    trees: list[tuple[int, int, Tree]] = []

    if config.objective == BINARY:
        margin = np.full(n_rows, base[0])
        for rnd in range(config.n_rounds):
            if history is not None:
                history.append(logistic_loss(margin, y))
            g, h = logistic_grad_hess(margin, y)
            tree, delta, _ = build_tree(X, g, h, config, entries)
            trees.append((rnd, 0, tree))
            margin = margin + delta
        if history is not None:
            history.append(logistic_loss(margin, y))
    else:
        margins = np.tile(base, (n_rows, 1))
        for rnd in range(config.n_rounds):
            if history is not None:
                history.append(softmax_loss(margins, y))
            G, Hs = softmax_grad_hess(margins, y)
            deltas = np.zeros_like(margins)
            for k in range(K):
                tree, delta, _ = build_tree(X, G[:, k], Hs[:, k], config, entries)
                trees.append((rnd, k, tree))
                deltas[:, k] = delta
            margins = margins + deltas
        if history is not None:
            history.append(softmax_loss(margins, y))

    return GbdtModel(trees, base, K, config, feature_count)


# -- prediction --------------------------------------------------------------

def _tree_values(tree: Tree, Xd: np.ndarray) -> np.ndarray:
    node = np.zeros(Xd.shape[0], dtype=np.int64)
    rows = np.arange(Xd.shape[0])
    while True:
        feat = tree.feature[node]
        active = feat >= 0
        if not active.any():
            return tree.weight[node]
        r = rows[active]
        nd = node[active]
        v = Xd[r, feat[active]]
        go_left = np.where(v == 0, tree.default_left[nd], v < tree.threshold[nd])
        node[active] = np.where(go_left, tree.left[nd], tree.right[nd])


def predict_margins(model: GbdtModel, X, chunk: int = 512) -> np.ndarray:
    """Raw margins, shape (n, n_outputs)."""
    if not sp.issparse(X):
        for x in X:
            _check_range(model, x)
    X = _as_csr(X, model.feature_count)
    if X.shape[1] > model.feature_count and X.nnz and X.indices.max() >= model.feature_count:
        raise FeatureOutOfRange(
            f"feature {X.indices.max()} >= feature_count {model.feature_count}")
    n = X.shape[0]
    out = np.tile(model.base_score, (n, 1))
    if n <= 4:
        # per-row tree walk; same summation order as the vectorized path
        for r in range(n):
            lo, hi = X.indptr[r], X.indptr[r + 1]
            row = dict(zip(X.indices[lo:hi].tolist(), X.data[lo:hi].tolist()))
            acc = out[r].tolist()
            for _, k, tree in model.trees:
                acc[k] += tree.value(row)
            out[r] = acc
        return out
    for lo in range(0, n, chunk):
        Xd = X[lo:lo + chunk].toarray()
        if Xd.shape[1] < model.feature_count:
            Xd = np.pad(Xd, ((0, 0), (0, model.feature_count - Xd.shape[1])))
        block = out[lo:lo + chunk]
        for _, k, tree in model.trees:
            block[:, k] += _tree_values(tree, Xd)
    return out


def _check_range(model: GbdtModel, x: SparseVector):
    if len(x) and (x.indices[-1] >= model.feature_count or x.indices[0] < 0):
        raise FeatureOutOfRange(
            f"feature index {int(x.indices[-1])} outside 0..{model.feature_count - 1}")


def proba_from_margins(model: GbdtModel, margins: np.ndarray) -> np.ndarray:
    if model.config.objective == BINARY:
        p = sigmoid(margins[:, 0])
        return np.column_stack((1.0 - p, p))
    return softmax(margins)


def predict_proba_many(model: GbdtModel, X) -> np.ndarray:
    return proba_from_margins(model, predict_margins(model, X))


def predict_proba(model: GbdtModel, x: SparseVector) -> np.ndarray:
    _check_range(model, x)
    return predict_proba_many(model, [x])[0]


def argmax_smallest(p: np.ndarray) -> int:
    # np.argmax already returns the first maximal index
    return int(np.argmax(p))


def predict(model: GbdtModel, x: SparseVector) -> int:
    return argmax_smallest(predict_proba(model, x))


def predict_many(model: GbdtModel, X) -> np.ndarray:
    return np.argmax(predict_proba_many(model, X), axis=1)


def constant_model(n_classes: int, feature_count: int, label: int = 0,
                   config: GbdtConfig | None = None) -> GbdtModel:
    """Zero-tree softmax model that always puts probability 1 on ``label``."""
    base = np.full(n_classes, -np.inf) if n_classes > 1 else np.zeros(1)
    base[label] = 0.0
    cfg = config or GbdtConfig(objective=SOFTMAX, n_classes=n_classes)
    return GbdtModel([], base, n_classes, cfg, feature_count)


# -- serialization -----------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def dumps(model: GbdtModel) -> str:
    c = model.config
    lines = [
        f"{FORMAT_NAME} {FORMAT_VERSION} objective={c.objective} K={model.n_classes} "
        f"rounds={c.n_rounds} feature_count={model.feature_count} trees={len(model.trees)}",
        f"config learning_rate={_fmt(c.learning_rate)} max_depth={c.max_depth} "
        f"lambda={_fmt(c.reg_lambda)} gamma={_fmt(c.gamma)} "
        f"min_child_hessian={_fmt(c.min_child_hessian)} "
        f"n_classes={c.n_classes if c.n_classes is not None else 'none'}",
        "base_score " + " ".join(_fmt(b) for b in model.base_score),
    ]
    for rnd, k, t in model.trees:
        lines.append(f"tree {rnd} {k} {t.n_nodes}")
        for i in range(t.n_nodes):
            if t.feature[i] >= 0:
                lines.append(f"{i} split {t.feature[i]} {_fmt(t.threshold[i])} "
                             f"{int(t.default_left[i])} {t.left[i]} {t.right[i]} -")
            else:
                lines.append(f"{i} leaf - - - - - {_fmt(t.weight[i])}")
    return "\n".join(lines) + "\n"


def _kv(tokens):
    return dict(t.split("=", 1) for t in tokens)


def loads(text: str) -> GbdtModel:
    lines = text.rstrip("\n").split("\n")
    try:
        head = lines[0].split()
        if head[:2] != [FORMAT_NAME, str(FORMAT_VERSION)]:
            raise ModelFormatError(f"not a {FORMAT_NAME} v{FORMAT_VERSION} document")
        hk = _kv(head[2:])
        ck = _kv(lines[1].split()[1:])
        n_classes_cfg = None if ck["n_classes"] == "none" else int(ck["n_classes"])
        config = GbdtConfig(
            n_rounds=int(hk["rounds"]), learning_rate=float(ck["learning_rate"]),
            max_depth=int(ck["max_depth"]), reg_lambda=float(ck["lambda"]),
            gamma=float(ck["gamma"]), min_child_hessian=float(ck["min_child_hessian"]),
            objective=hk["objective"], n_classes=n_classes_cfg,
        )
        K = int(hk["K"])
        feature_count = int(hk["feature_count"])
        base = np.array([float(v) for v in lines[2].split()[1:]])
        n_trees = int(hk["trees"])
        trees = []
        pos = 3
        for _ in range(n_trees):
            _, rnd, k, n_nodes = lines[pos].split()
            n_nodes = int(n_nodes)
            pos += 1
            arr = [[-1] * n_nodes, [0.0] * n_nodes, [False] * n_nodes,
                   [-1] * n_nodes, [-1] * n_nodes, [0.0] * n_nodes]
            for i in range(n_nodes):
                parts = lines[pos + i].split()
                if int(parts[0]) != i:
                    raise ModelFormatError(f"line {pos + i + 1}: node ids out of order")
                if parts[1] == "split":
                    arr[0][i] = int(parts[2])
                    arr[1][i] = float(parts[3])
                    arr[2][i] = parts[4] == "1"
                    arr[3][i] = int(parts[5])
                    arr[4][i] = int(parts[6])
                else:
                    arr[5][i] = float(parts[7])
            pos += n_nodes
            trees.append((int(rnd), int(k), Tree(
                np.array(arr[0], np.int64), np.array(arr[1], np.float64),
                np.array(arr[2], bool), np.array(arr[3], np.int64),
                np.array(arr[4], np.int64), np.array(arr[5], np.float64))))
    except ModelFormatError:
        raise
    except (IndexError, KeyError, ValueError) as exc:
        raise ModelFormatError(f"malformed gbdt model: {exc}") from exc
    n_out = 1 if config.objective == BINARY else K
    if base.size != n_out:
        raise ModelFormatError(f"expected {n_out} base scores, found {base.size}")
    return GbdtModel(trees, base, K, config, feature_count)

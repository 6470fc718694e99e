"""Independent reference implementations used by the tests.

Each one is written from the formulas directly and shares no code with the
package beyond the data it is handed.
"""

import math

import numpy as np


# -- gbdt --------------------------------------------------------------------

def structure_gain(GL, HL, GR, HR, lam, gamma):
    return 0.5 * (GL ** 2 / (HL + lam) + GR ** 2 / (HR + lam)
                  - (GL + GR) ** 2 / (HL + HR + lam)) - gamma


def brute_best_gain(Xd, rows, g, h, lam, gamma, min_child_hessian):
    """Max gain over every (feature, midpoint, default direction) split of ``rows``.

    Absent (zero) values follow the default direction; nonzero values go left
    when below the threshold. Returns -inf when no split is valid.
    """
    best = -math.inf
    for f in range(Xd.shape[1]):
        x = Xd[rows, f]
        vals = sorted(set(x.tolist()))
        zero = x == 0
        for a, b in zip(vals, vals[1:]):
            t = (a + b) / 2
            for default_left in (True, False):
                left = (~zero & (x < t)) | (zero & default_left)
                nl = int(left.sum())
                if nl == 0 or nl == len(rows):
                    continue
                GL, HL = g[rows][left].sum(), h[rows][left].sum()
                GR, HR = g[rows][~left].sum(), h[rows][~left].sum()
                if HL < min_child_hessian or HR < min_child_hessian:
                    continue
                best = max(best, structure_gain(GL, HL, GR, HR, lam, gamma))
    return best


def route(tree, node, Xd, rows):
    f, t = tree.feature[node], tree.threshold[node]
    v = Xd[rows, f]
    left = np.where(v == 0, tree.default_left[node], v < t)
    return rows[left], rows[~left]


def check_tree_optimal(tree, Xd, g, h, cfg, tol=1e-9):
    """Walk a fitted tree; every split must reach the brute-force max gain and
    every leaf above max depth must have no positive-gain split left."""
    checked = 0

    def visit(node, rows, depth):
        nonlocal checked
        best = brute_best_gain(Xd, rows, g, h, cfg.reg_lambda, cfg.gamma,
                               cfg.min_child_hessian) if depth < cfg.max_depth else -math.inf
        if tree.feature[node] < 0:
            assert best <= tol, f"leaf at depth {depth} left gain {best} on the table"
            return
        L, R = route(tree, node, Xd, rows)
        got = structure_gain(g[L].sum(), h[L].sum(), g[R].sum(), h[R].sum(),
                             cfg.reg_lambda, cfg.gamma)
        assert abs(got - best) <= tol * max(1.0, abs(best)), (got, best)
        checked += 1
        visit(tree.left[node], L, depth + 1)
        visit(tree.right[node], R, depth + 1)

    visit(0, np.arange(Xd.shape[0]), 0)
    return checked


# -- finite differences ------------------------------------------------------

def central_diff(f, x, eps=1e-6):
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        out[i] = (f(xp) - f(xm)) / (2 * eps)
    return out


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))


def np_softmax(s):
    e = np.exp(s - np.max(s))
    return e / e.sum()


# -- metrics -----------------------------------------------------------------

def brute_metrics(pred, gold):
    labels = sorted(set(pred) | set(gold))
    out = {}
    for l in labels:
        tp = sum(1 for p, g in zip(pred, gold) if p == l and g == l)
        fp = sum(1 for p, g in zip(pred, gold) if p == l and g != l)
        fn = sum(1 for p, g in zip(pred, gold) if p != l and g == l)
        pr = tp / (tp + fp) if tp + fp else 0.0
        rc = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * pr * rc / (pr + rc) if pr + rc else 0.0
        out[l] = (pr, rc, f1, tp + fn)
    macro = sum(v[2] for v in out.values()) / len(out) if out else 0.0
    cm = [[sum(1 for p, g in zip(pred, gold) if g == a and p == b) for b in labels]
          for a in labels]
    return labels, out, macro, cm

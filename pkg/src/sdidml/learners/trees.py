"""CART regression trees, bagged forests and gradient boosting.

Splits maximize the reduction in squared error. Candidate thresholds are
midpoints between consecutive distinct feature values; among equal gains the
lowest feature index, then the lowest threshold, wins. Feature subsampling at
a node draws from a random stream keyed on the node's path from the root, so
a deeper tree always refines the shallower tree grown from the same seed.
"""

import numpy as np
from numba import njit

from ..errors import InsufficientData


@njit(cache=True, nogil=True)
def _mix(z):
    z = z + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit(cache=True, nogil=True)
def _choose_features(p, mtry, key):
    perm = np.arange(p)
    state = key
    for i in range(mtry):
        state = _mix(state)
        j = i + np.int64(state % np.uint64(p - i))
        tmp = perm[i]
        perm[i] = perm[j]
        perm[j] = tmp
    return np.sort(perm[:mtry])


@njit(cache=True, nogil=True)
def build_tree(X, y, sample_idx, max_depth, min_leaf, mtry, seed):
    """Grow one tree on rows ``sample_idx`` (repeats allowed).

    Every feature is sorted once at the root; each split stable-partitions
    the sorted lists, so a node's segment stays sorted without re-sorting.
    Returns arrays (feature, threshold, left, right, value); leaves have
    feature -1.
    """
    n, p = X.shape
    m_all = sample_idx.shape[0]
    cap = 2 * m_all + 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros(cap)

    # xs[f, k] and ys[k]: feature and target of the k-th drawn sample
    xs = np.empty((p, m_all))
    ys = np.empty(m_all)
    for k in range(m_all):
        r = sample_idx[k]
        ys[k] = y[r]
        for f in range(p):
            xs[f, k] = X[r, f]
    order = np.empty((p, m_all), dtype=np.int64)
    for f in range(p):
        order[f] = np.argsort(xs[f])
    goes_left = np.zeros(m_all, dtype=np.bool_)
    buf = np.empty(m_all, dtype=np.int64)

    st_node = np.empty(cap, dtype=np.int64)
    st_start = np.empty(cap, dtype=np.int64)
    st_end = np.empty(cap, dtype=np.int64)
    st_depth = np.empty(cap, dtype=np.int64)
    st_key = np.empty(cap, dtype=np.uint64)
    st_node[0] = 0
    st_start[0] = 0
    st_end[0] = m_all
    st_depth[0] = 0
    st_key[0] = seed
    top = 1
    n_nodes = 1

    while top > 0:
        top -= 1
        node = st_node[top]
        start = st_start[top]
        end = st_end[top]
        depth = st_depth[top]
        key = st_key[top]
        m = end - start
        seg = order[0]

        s = 0.0
        for i in range(start, end):
            s += ys[seg[i]]
        mean = s / m
        value[node] = mean
        if depth >= max_depth or m < 2 * min_leaf:
            continue
        sse = 0.0
        for i in range(start, end):
            d = ys[seg[i]] - mean
            sse += d * d
        if sse <= 0.0:
            continue

        feats = _choose_features(p, mtry, key)
        parent_score = s * s / m
        best_score = parent_score
        best_feat = -1
        best_thr = 0.0
        for fi in range(feats.shape[0]):
            f = feats[fi]
            of = order[f]
            xf = xs[f]
            sl = 0.0
            for i in range(1, m - min_leaf + 1):
                sl += ys[of[start + i - 1]]
                if i < min_leaf:
                    continue
                lo = xf[of[start + i - 1]]
                hi = xf[of[start + i]]
                if lo < hi:
                    sr = s - sl
                    score = sl * sl / i + sr * sr / (m - i)
                    if score > best_score:
                        best_score = score
                        best_feat = f
                        best_thr = 0.5 * (lo + hi)
        if best_feat < 0 or best_score - parent_score <= 1e-12 * sse:
            continue

        n_left = 0
        for i in range(start, end):
            k = order[0, i]
            goes_left[k] = xs[best_feat, k] <= best_thr
            if goes_left[k]:
                n_left += 1
        if n_left == 0 or n_left == m:
            continue
        mid = start + n_left
        for f in range(p):
            of = order[f]
            a = start
            b = 0
            for i in range(start, end):
                k = of[i]
                if goes_left[k]:
                    of[a] = k
                    a += 1
                else:
                    buf[b] = k
                    b += 1
            for i in range(b):
                of[mid + i] = buf[i]
        feature[node] = best_feat
        threshold[node] = best_thr
        lnode = n_nodes
        rnode = n_nodes + 1
        n_nodes += 2
        left[node] = lnode
        right[node] = rnode
        # right pushed first so the left subtree is expanded first
        st_node[top] = rnode
        st_start[top] = mid
        st_end[top] = end
        st_depth[top] = depth + 1
        st_key[top] = _mix(key ^ np.uint64(2))
        top += 1
        st_node[top] = lnode
        st_start[top] = start
        st_end[top] = mid
        st_depth[top] = depth + 1
        st_key[top] = _mix(key ^ np.uint64(1))
        top += 1

    return (
        feature[:n_nodes].copy(),
        threshold[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
        value[:n_nodes].copy(),
    )


@njit(cache=True, nogil=True)
def predict_tree(X, feature, threshold, left, right, value):
    out = np.empty(X.shape[0])
    for r in range(X.shape[0]):
        node = 0
        while feature[node] >= 0:
            if X[r, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[r] = value[node]
    return out


@njit(cache=True, nogil=True)
def predict_ensemble(X, offsets, feature, threshold, left, right, value):
    """Sum of per-tree predictions, accumulated in tree order."""
    total = np.zeros(X.shape[0])
    for t in range(offsets.shape[0] - 1):
        a = offsets[t]
        b = offsets[t + 1]
        total += predict_tree(X, feature[a:b], threshold[a:b], left[a:b], right[a:b], value[a:b])
    return total


class TreeEnsemble:
    """Trees stored back to back in flat arrays."""

    def __init__(self, trees):
        sizes = [len(t[0]) for t in trees]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        if trees:
            self.arrays = tuple(np.concatenate([t[k] for t in trees]) for k in range(5))
        else:
            self.arrays = (
                np.zeros(0, np.int64), np.zeros(0), np.zeros(0, np.int64),
                np.zeros(0, np.int64), np.zeros(0),
            )

    @property
    def n_trees(self):
        return len(self.offsets) - 1

    def tree(self, t):
        a, b = self.offsets[t], self.offsets[t + 1]
        return tuple(arr[a:b] for arr in self.arrays)

    def sum_predictions(self, X):
        return predict_ensemble(np.ascontiguousarray(X, dtype=float), self.offsets, *self.arrays)


def _tree_seed(rng):
    return np.uint64(rng.integers(0, 2**63 - 1))


def fit_forest(X, y, n_trees, max_depth, mtry, min_leaf, bootstrap, seed):
    n, p = X.shape
    if n < 2 * min_leaf and max_depth > 0:
        raise InsufficientData(f"{n} rows is fewer than 2 * min_leaf = {2 * min_leaf}")
    X = np.ascontiguousarray(X, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    trees = []
    for t in range(n_trees):
        rng = np.random.default_rng([seed, t])
        idx = rng.integers(0, n, n) if bootstrap else np.arange(n)
        trees.append(build_tree(X, y, idx.astype(np.int64), max_depth, min_leaf, mtry, _tree_seed(rng)))
    return TreeEnsemble(trees)


def fit_boosting(X, y, learning_rate, max_rounds, early_stop_rounds, max_depth, min_leaf, seed,
                 holdout=0.2):
    """Least-squares gradient boosting with early stopping on a seeded holdout.

    Returns ``(baseline, ensemble, history)`` where ``history`` lists the
    validation MSE after each round; the ensemble is cut at the best round.
    """
    n, p = X.shape
    if n < 5:
        raise InsufficientData("boosting needs at least 5 rows")
    X = np.ascontiguousarray(X, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    rng = np.random.default_rng([seed, 0])
    perm = rng.permutation(n)
    n_val = max(1, int(round(holdout * n)))
    val, train = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    Xt, yt, Xv, yv = X[train], y[train], X[val], y[val]
    base = float(yt.mean())
    ft = np.full(len(train), base)
    fv = np.full(len(val), base)
    all_rows = np.arange(len(train), dtype=np.int64)
    trees = []
    history = []
    best_mse = float(np.mean((yv - fv) ** 2))
    best_round = 0
    for r in range(1, max_rounds + 1):
        resid = yt - ft
        tree = build_tree(Xt, resid, all_rows, max_depth, min_leaf, p, _tree_seed(rng))
        trees.append(tree)
        ft += learning_rate * predict_tree(Xt, *tree)
        fv += learning_rate * predict_tree(Xv, *tree)
        mse = float(np.mean((yv - fv) ** 2))
        history.append(mse)
        if mse < best_mse:
            best_mse, best_round = mse, r
        elif r - best_round >= early_stop_rounds:
            break
    return base, TreeEnsemble(trees[:best_round]), history

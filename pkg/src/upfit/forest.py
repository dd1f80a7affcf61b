"""Multi-output regression forests built from scratch.

Trees greedily choose axis-aligned threshold splits that maximize variance
reduction of the (vector) target, with candidate thresholds taken from
per-feature quantile bins so whole tree levels train in a few vectorized
passes.  Leaves store the mean target vector.  Training is deterministic
given the seed.
"""

import dataclasses

import numpy as np


@dataclasses.dataclass(frozen=True)
class ForestParams:
    n_trees: int = 40
    max_depth: int = 12
    min_leaf: int = 5
    feature_subsample: float = 1.0  # fraction of features considered per tree
    row_subsample: float = 1.0  # fraction of rows per tree (without replacement)
    n_bins: int = 64  # quantile bins providing candidate thresholds

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclasses.dataclass
class _TreeArrays:
    feature: np.ndarray  # (n_nodes,) int32, -1 at leaves
    threshold: np.ndarray  # (n_nodes,) float64, go left when x < threshold
    left: np.ndarray  # (n_nodes,) int32
    right: np.ndarray  # (n_nodes,) int32
    value: np.ndarray  # (n_nodes, D) leaf means (internal nodes hold means too)


class RegressionForest:
    """Bagged ensemble of threshold trees; predictions average tree leaves."""

    def __init__(self, trees, n_features, target_dim, params):
        self.trees = trees
        self.n_features = n_features
        self.target_dim = target_dim
        self.params = params

    def predict(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        out = np.zeros((X.shape[0], self.target_dim))
        for tree in self.trees:
            out += _tree_predict(tree, X)
        return out / len(self.trees)


def _tree_predict(tree, X):
    idx = np.zeros(X.shape[0], dtype=np.int64)
    while True:
        feat = tree.feature[idx]
        internal = feat >= 0
        if not internal.any():
            break
        rows = np.nonzero(internal)[0]
        f = feat[rows]
        go_left = X[rows, f] < tree.threshold[idx[rows]]
        nxt = np.where(go_left, tree.left[idx[rows]], tree.right[idx[rows]])
        idx[rows] = nxt
    return tree.value[idx]


def _quantile_edges(col, n_bins):
    qs = np.linspace(0.0, 1.0, n_bins + 1)[1:-1]
    edges = np.unique(np.quantile(col, qs))
    return edges


def train_forest(X, Y, params=None, seed=0):
    """Fit a forest to rows of (features X, targets Y)."""
    params = params or ForestParams()
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    n, d = X.shape
    if Y.shape[0] != n:
        raise ValueError("X and Y row counts differ")
    if n == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(seed)
    trees = []
    for _ in range(params.n_trees):
        if params.row_subsample < 1.0:
            m = max(1, int(round(params.row_subsample * n)))
            rows = rng.choice(n, size=m, replace=False)
        else:
            rows = np.arange(n)
        if params.feature_subsample < 1.0:
            k = max(1, int(round(params.feature_subsample * d)))
            feats = np.sort(rng.choice(d, size=k, replace=False))
        else:
            feats = np.arange(d)
        trees.append(_build_tree(X[rows], Y[rows], feats, params))
    return RegressionForest(trees, n_features=d, target_dim=Y.shape[1], params=params)


def _build_tree(X, Y, feats, params):
    n, _ = X.shape
    D = Y.shape[1]
    edges = [_quantile_edges(X[:, f], params.n_bins) for f in feats]
    codes = np.empty((n, len(feats)), dtype=np.int64)
    for j, f in enumerate(feats):
        codes[:, j] = np.searchsorted(edges[j], X[:, f], side="right")

    root_mean = Y.mean(axis=0)
    feature = [-1]
    threshold = [0.0]
    left = [-1]
    right = [-1]

    node_of_row = np.zeros(n, dtype=np.int64)
    active = [0]

    for depth in range(params.max_depth):
        if not active:
            break
        node_ids = np.asarray(active, dtype=np.int64)
        n_active = node_ids.size
        # dense rank lookup: node ids grow monotonically, so a map array works
        rank_of = np.full(node_ids.max() + 1, -1, dtype=np.int64)
        rank_of[node_ids] = np.arange(n_active)
        row_rank_all = np.where(node_of_row <= node_ids.max(), rank_of[np.minimum(node_of_row, node_ids.max())], -1)
        rows = np.nonzero(row_rank_all >= 0)[0]
        if rows.size == 0:
            break
        row_rank = row_rank_all[rows]

        counts_parent = np.bincount(row_rank, minlength=n_active).astype(float)
        sums_parent = np.zeros((n_active, D))
        for dim in range(D):
            sums_parent[:, dim] = np.bincount(row_rank, weights=Y[rows, dim],
                                              minlength=n_active)
        parent_score = (sums_parent ** 2).sum(axis=1) / np.maximum(counts_parent, 1)

        best_gain = np.full(n_active, 1e-10)
        best_feat = np.full(n_active, -1, dtype=np.int64)
        best_bin = np.zeros(n_active, dtype=np.int64)

        for j in range(len(feats)):
            m = len(edges[j])
            if m == 0:
                continue
            key = row_rank * (m + 1) + codes[rows, j]
            cnt = np.bincount(key, minlength=n_active * (m + 1)).reshape(n_active, m + 1)
            cum_cnt = cnt.cumsum(axis=1)[:, :-1].astype(float)  # left counts per split bin
            left_sums = np.zeros((n_active, m, D))
            for dim in range(D):
                s = np.bincount(key, weights=Y[rows, dim],
                                minlength=n_active * (m + 1)).reshape(n_active, m + 1)
                left_sums[:, :, dim] = s.cumsum(axis=1)[:, :-1]
            right_cnt = counts_parent[:, None] - cum_cnt
            ok = (cum_cnt >= params.min_leaf) & (right_cnt >= params.min_leaf)
            if not ok.any():
                continue
            right_sums = sums_parent[:, None, :] - left_sums
            score = ((left_sums ** 2).sum(axis=2) / np.maximum(cum_cnt, 1e-12)
                     + (right_sums ** 2).sum(axis=2) / np.maximum(right_cnt, 1e-12))
            score = np.where(ok, score, -np.inf)
            gain = score.max(axis=1) - parent_score
            bins = score.argmax(axis=1)
            better = gain > best_gain
            best_gain = np.where(better, gain, best_gain)
            best_feat = np.where(better, j, best_feat)
            best_bin = np.where(better, bins, best_bin)

        # materialize child nodes for every split
        jarr = np.full(n_active, -1, dtype=np.int64)
        barr = np.zeros(n_active, dtype=np.int64)
        lidarr = np.full(n_active, -1, dtype=np.int64)
        ridarr = np.full(n_active, -1, dtype=np.int64)
        next_active = []
        for i, nid in enumerate(node_ids):
            if best_feat[i] < 0:
                continue
            j = int(best_feat[i])
            b = int(best_bin[i])
            lid = len(feature)
            rid = lid + 1
            feature.extend((-1, -1))
            threshold.extend((0.0, 0.0))
            left.extend((-1, -1))
            right.extend((-1, -1))
            feature[nid] = int(feats[j])
            threshold[nid] = float(edges[j][b])
            left[nid] = lid
            right[nid] = rid
            jarr[i], barr[i] = j, b
            lidarr[i], ridarr[i] = lid, rid
            if depth + 1 < params.max_depth:
                next_active.extend((lid, rid))

        split_mask = jarr[row_rank] >= 0
        if split_mask.any():
            srows = rows[split_mask]
            sranks = row_rank[split_mask]
            go_left = codes[srows, jarr[sranks]] <= barr[sranks]
            node_of_row[srows] = np.where(go_left, lidarr[sranks], ridarr[sranks])
        active = next_active

    n_nodes = len(feature)
    sums = np.zeros((n_nodes, D))
    for dim in range(D):
        sums[:, dim] = np.bincount(node_of_row, weights=Y[:, dim], minlength=n_nodes)
    cnts = np.bincount(node_of_row, minlength=n_nodes).astype(float)
    value_arr = np.where(cnts[:, None] > 0, sums / np.maximum(cnts[:, None], 1.0),
                         root_mean[None, :])
    return _TreeArrays(feature=np.array(feature, dtype=np.int32),
                       threshold=np.array(threshold, dtype=float),
                       left=np.array(left, dtype=np.int32),
                       right=np.array(right, dtype=np.int32),
                       value=value_arr)


def forest_to_arrays(forest, prefix):
    """Flatten a forest into named arrays for container storage."""
    offsets = [0]
    for tree in forest.trees:
        offsets.append(offsets[-1] + tree.feature.size)
    return {
        f"{prefix}_feature": np.concatenate([t.feature for t in forest.trees]),
        f"{prefix}_threshold": np.concatenate([t.threshold for t in forest.trees]),
        f"{prefix}_left": np.concatenate([t.left for t in forest.trees]),
        f"{prefix}_right": np.concatenate([t.right for t in forest.trees]),
        f"{prefix}_value": np.concatenate([t.value for t in forest.trees], axis=0),
        f"{prefix}_offsets": np.array(offsets, dtype=np.int64),
        f"{prefix}_shape": np.array([forest.n_features, forest.target_dim], dtype=np.int64),
    }


def forest_from_arrays(arrays, prefix, params):
    offsets = arrays[f"{prefix}_offsets"]
    trees = []
    for i in range(offsets.size - 1):
        a, b = int(offsets[i]), int(offsets[i + 1])
        trees.append(_TreeArrays(
            feature=np.asarray(arrays[f"{prefix}_feature"][a:b], dtype=np.int32),
            threshold=np.asarray(arrays[f"{prefix}_threshold"][a:b], dtype=float),
            left=np.asarray(arrays[f"{prefix}_left"][a:b], dtype=np.int32),
            right=np.asarray(arrays[f"{prefix}_right"][a:b], dtype=np.int32),
            value=np.asarray(arrays[f"{prefix}_value"][a:b], dtype=float),
        ))
    n_features, target_dim = (int(v) for v in arrays[f"{prefix}_shape"])
    return RegressionForest(trees, n_features=n_features, target_dim=target_dim,
                            params=params)

"""Gradient-boosted decision trees for binary fault classification.

Trees are grown leaf-wise (best-first) on exact gradient/hessian split
statistics under the logistic loss; predictions live in margin
(log-odds) space so downstream attribution sums are exact. Training is
fully deterministic: exact split enumeration over all ten features with
a strict tie-break (lowest feature index, then lowest threshold), no
histograms, no subsampling.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .features import FEATURE_NAMES, N_FEATURES, FeatureVector

PROBABILITY_CLIP = 1e-9


@dataclass
class TreeNode:
    """Internal node (left/right set) or leaf (value set).

    Evaluation descends left iff feature value <= threshold; ties at the
    threshold always go left.
    """

    feature_index: int = -1
    threshold: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    value: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    def to_dict(self) -> dict:
        if self.is_leaf:
            return {"leaf": self.value}
        return {
            "feat": self.feature_index,
            "thr": self.threshold,
            "left": self.left.to_dict(),
            "right": self.right.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TreeNode":
        if "leaf" in d:
            return cls(value=float(d["leaf"]))
        return cls(
            feature_index=int(d["feat"]),
            threshold=float(d["thr"]),
            left=cls.from_dict(d["left"]),
            right=cls.from_dict(d["right"]),
        )

    def depth(self) -> int:
        if self.is_leaf:
            return 0
        return 1 + max(self.left.depth(), self.right.depth())

    def n_leaves(self) -> int:
        if self.is_leaf:
            return 1
        return self.left.n_leaves() + self.right.n_leaves()


def _sigmoid(m):
    return expit(np.asarray(m, dtype=np.float64))


def _tree_value(node: TreeNode, x: np.ndarray) -> float:
    while not node.is_leaf:
        node = node.left if x[node.feature_index] <= node.threshold else node.right
    return node.value


def _tree_values_batch(node: TreeNode, X: np.ndarray, out: np.ndarray, idx: np.ndarray) -> None:
    if node.is_leaf:
        out[idx] += node.value
        return
    go_left = X[idx, node.feature_index] <= node.threshold
    _tree_values_batch(node.left, X, out, idx[go_left])
    _tree_values_batch(node.right, X, out, idx[~go_left])


@dataclass
class TreeEnsemble:
    """Additive tree model in margin space: base_score + lr * sum of leaf values."""

    base_score: float
    learning_rate: float
    trees: list[TreeNode] = field(default_factory=list)
    feature_names: tuple[str, ...] = FEATURE_NAMES

    def predict_margin(self, x) -> float:
        x = _as_feature_array(x)
        total = self.base_score
        for tree in self.trees:
            total += self.learning_rate * _tree_value(tree, x)
        return float(total)

    def predict_margin_batch(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2:
            raise ValueError("expected a 2-D feature matrix")
        out = np.zeros(X.shape[0], dtype=np.float64)
        idx = np.arange(X.shape[0])
        for tree in self.trees:
            _tree_values_batch(tree, X, out, idx)
        return self.base_score + self.learning_rate * out

    def predict_proba(self, x) -> float:
        return float(_sigmoid(self.predict_margin(x)))

    def predict_proba_batch(self, X) -> np.ndarray:
        return _sigmoid(self.predict_margin_batch(X))

    def to_dict(self) -> dict:
        return {
            "base_score": self.base_score,
            "learning_rate": self.learning_rate,
            "feature_names": list(self.feature_names),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TreeEnsemble":
        return cls(
            base_score=float(d["base_score"]),
            learning_rate=float(d["learning_rate"]),
            trees=[TreeNode.from_dict(t) for t in d["trees"]],
            feature_names=tuple(d["feature_names"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), sort_keys=True), encoding="utf-8"
        )

    @classmethod
    def load(cls, path) -> "TreeEnsemble":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class TrainConfig:
    n_trees: int = 100
    learning_rate: float = 0.1
    max_leaves: int = 31
    min_samples_leaf: int = 20
    l2_leaf_penalty: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if min(self.learning_rate, self.l2_leaf_penalty) <= 0:
            raise ValueError("learning_rate and l2_leaf_penalty must be positive")
        if self.max_leaves < 2 or self.min_samples_leaf < 1:
            raise ValueError("max_leaves >= 2 and min_samples_leaf >= 1 required")


def _as_feature_array(x) -> np.ndarray:
    if isinstance(x, FeatureVector):
        return x.to_array()
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape != (N_FEATURES,):
        raise ValueError(f"expected {N_FEATURES} features, got shape {arr.shape}")
    return arr


def _as_training_matrix(features) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for fv, label in features:
        xs.append(_as_feature_array(fv))
        if isinstance(label, str):
            ys.append(1.0 if label == "Abnormal" else 0.0)
        else:
            ys.append(float(label))
    X = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    return X, y


def _best_split(X, g, h, idx, sort_order, config):
    """Exact best split of one leaf: (gain, feature, threshold, go_left mask).

    sort_order[f] holds idx's positions sorted by feature f. Ties in gain
    resolve to the lowest feature index, then the lowest threshold, so the
    result is independent of evaluation order.
    """
    lam = config.l2_leaf_penalty
    min_leaf = config.min_samples_leaf
    n = idx.size
    if n < 2 * min_leaf:
        return None
    g_tot = g[idx].sum()
    h_tot = h[idx].sum()
    parent_score = g_tot * g_tot / (h_tot + lam)

    best = None
    for f in range(X.shape[1]):
        order = sort_order[f]
        vals = X[idx[order], f]
        gs = np.cumsum(g[idx[order]])[:-1]
        hs = np.cumsum(h[idx[order]])[:-1]
        # candidate split after position k: left = first k+1 sorted samples
        counts = np.arange(1, n)
        valid = (vals[1:] > vals[:-1]) & (counts >= min_leaf) & (n - counts >= min_leaf)
        if not valid.any():
            continue
        gl, hl = gs[valid], hs[valid]
        gr, hr = g_tot - gl, h_tot - hl
        gains = 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent_score)
        lo = vals[:-1][valid]
        hi = vals[1:][valid]
        thr = lo + (hi - lo) / 2.0
        # keep thresholds strictly below the right-side value (ties go left)
        thr = np.where(thr >= hi, lo, thr)
        k = int(np.argmax(gains))
        gain = float(gains[k])
        if gain <= 0.0:
            continue
        if best is None or gain > best[0]:
            best = (gain, f, float(thr[k]))
    if best is None:
        return None
    gain, f, threshold = best
    return gain, f, threshold


def _build_tree(X, g, h, config) -> TreeNode:
    """Grow one tree leaf-wise: always split the leaf with the largest gain."""
    lam = config.l2_leaf_penalty

    def leaf_value(idx):
        return -g[idx].sum() / (h[idx].sum() + lam)

    def make_sort_order(idx):
        return [np.argsort(X[idx, f], kind="stable") for f in range(X.shape[1])]

    all_idx = np.arange(X.shape[0])
    root = TreeNode(value=leaf_value(all_idx))
    heap = []
    counter = 0  # insertion order breaks equal-gain ties deterministically
    cand = _best_split(X, g, h, all_idx, make_sort_order(all_idx), config)
    if cand is not None:
        heapq.heappush(heap, (-cand[0], counter, root, all_idx, cand))
        counter += 1
    n_leaves = 1
    while heap and n_leaves < config.max_leaves:
        _, _, node, idx, (gain, f, thr) = heapq.heappop(heap)
        go_left = X[idx, f] <= thr
        left_idx, right_idx = idx[go_left], idx[~go_left]
        node.feature_index = f
        node.threshold = thr
        node.left = TreeNode(value=leaf_value(left_idx))
        node.right = TreeNode(value=leaf_value(right_idx))
        node.value = 0.0
        n_leaves += 1
        for child, child_idx in ((node.left, left_idx), (node.right, right_idx)):
            c = _best_split(X, g, h, child_idx, make_sort_order(child_idx), config)
            if c is not None:
                heapq.heappush(heap, (-c[0], counter, child, child_idx, c))
                counter += 1
    return root


def train(features, config: TrainConfig = TrainConfig()) -> TreeEnsemble:
    """Fit a boosted ensemble with logistic loss.

    ``features`` is a sequence of (FeatureVector | array, label) pairs where
    label is "Normal"/"Abnormal" or 0/1. A single-class input yields a
    base-score-only model at the clipped prior log-odds.
    """
    X, y = _as_training_matrix(features)
    if X.shape[0] == 0:
        raise ValueError("training set is empty")
    if X.shape[0] < 2:
        raise ValueError("training requires at least 2 samples")
    if not np.all(np.isfinite(X)):
        raise ValueError("NaN or infinite feature value in training set")

    prior = float(np.clip(y.mean(), PROBABILITY_CLIP, 1.0 - PROBABILITY_CLIP))
    base_score = float(np.log(prior / (1.0 - prior)))
    model = TreeEnsemble(base_score=base_score, learning_rate=config.learning_rate)
    if y.min() == y.max():
        return model

    margins = np.full(X.shape[0], base_score, dtype=np.float64)
    for _ in range(config.n_trees):
        p = _sigmoid(margins)
        grad = p - y
        hess = p * (1.0 - p)
        tree = _build_tree(X, grad, hess, config)
        model.trees.append(tree)
        delta = np.zeros(X.shape[0], dtype=np.float64)
        _tree_values_batch(tree, X, delta, np.arange(X.shape[0]))
        margins += config.learning_rate * delta
    return model


def log_loss(y_true, probabilities) -> float:
    """Mean negative log-likelihood with probabilities clipped away from {0,1}."""
    y = np.asarray(y_true, dtype=np.float64)
    p = np.clip(np.asarray(probabilities, dtype=np.float64),
                PROBABILITY_CLIP, 1.0 - PROBABILITY_CLIP)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))

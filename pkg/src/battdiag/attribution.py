"""Exact per-feature Shapley attribution for tree-ensemble margins.

Attributions use the interventional game: the value of a feature subset
S is the ensemble margin with features in S pinned to the explained
input and the rest drawn from a background row, averaged over the
background. For a tree ensemble this game decomposes over leaves: a
leaf is reached by a given (input, background-row) pair iff every
feature interval along its path is satisfied either by the input (the
feature must then be in S) or by the background row (the feature must
be out of S). Each leaf therefore induces a unanimity-style game whose
Shapley values have a closed form in the counts of input-only and
background-only path features, which is what `TreeShapExplainer`
evaluates; `brute_force_shap` recomputes the same quantity by full
subset enumeration and exists as the correctness oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .features import FEATURE_NAMES, N_FEATURES
from .gbdt import TreeEnsemble, TreeNode, _as_feature_array

BACKGROUND_CAP = 512


@dataclass(frozen=True)
class TopContributor:
    feature: str
    phi: float
    weight: float


@dataclass(frozen=True)
class Attribution:
    """Margin-space Shapley decomposition of one prediction.

    base_value + phi.sum() equals the model margin (local accuracy);
    weights are |phi| normalized over all features.
    """

    base_value: float
    phi: np.ndarray
    weights: np.ndarray = field(default=None)
    top_k: tuple[TopContributor, ...] = ()
    feature_names: tuple[str, ...] = FEATURE_NAMES

    def __post_init__(self):
        phi = np.asarray(self.phi, dtype=np.float64)
        phi.setflags(write=False)
        object.__setattr__(self, "phi", phi)
        if self.weights is None:
            object.__setattr__(self, "weights", normalized_weights(phi))
        w = np.asarray(self.weights, dtype=np.float64)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    def to_dict(self) -> dict:
        return {
            "base_value": float(self.base_value),
            "phi": [float(v) for v in self.phi],
            "weights": [float(v) for v in self.weights],
            "top_k": [
                {"feature": t.feature, "phi": float(t.phi), "weight": float(t.weight)}
                for t in self.top_k
            ],
        }


def normalized_weights(phi: np.ndarray) -> np.ndarray:
    total = np.abs(phi).sum()
    if total <= 0.0:
        return np.zeros_like(phi)
    return np.abs(phi) / total


def select_top_k(attr: Attribution, k: int) -> Attribution:
    """Rank features by |phi| descending (ties to the lower index), keep k.

    Weights stay normalized over all features, not just the selected ones.
    """
    if not 0 < k <= attr.phi.size:
        raise ValueError(f"k must be in 1..{attr.phi.size}")
    order = sorted(range(attr.phi.size), key=lambda j: (-abs(attr.phi[j]), j))
    top = tuple(
        TopContributor(attr.feature_names[j], float(attr.phi[j]), float(attr.weights[j]))
        for j in order[:k]
    )
    return replace(attr, top_k=top)


def subsample_background(background: np.ndarray, cap: int = BACKGROUND_CAP) -> np.ndarray:
    """Deterministic stride subsample down to at most cap rows."""
    m = background.shape[0]
    if m <= cap:
        return background
    stride = -(-m // cap)
    return background[::stride]


def _as_background_matrix(background) -> np.ndarray:
    rows = [_as_feature_array(r) for r in background] if not (
        isinstance(background, np.ndarray) and background.ndim == 2
    ) else background
    B = np.asarray(rows, dtype=np.float64)
    if B.ndim != 2 or B.shape[0] == 0:
        raise ValueError("background must be a non-empty set of feature rows")
    return B


# Closed-form Shapley weight of a leaf's unanimity game, indexed by
# (p, q) = (# input-side path features, # background-side path features):
#   feature on the input side gains  +v * (p-1)! q! / (p+q)!
#   feature on the background side   -v * p! (q-1)! / (p+q)!
def _weight_tables(max_feats: int) -> tuple[np.ndarray, np.ndarray]:
    size = max_feats + 1
    pos = np.zeros((size, size))
    neg = np.zeros((size, size))
    for p in range(size):
        for q in range(size):
            if p + q > max_feats:
                continue
            if p >= 1:
                pos[p, q] = (
                    math.factorial(p - 1) * math.factorial(q) / math.factorial(p + q)
                )
            if q >= 1:
                neg[p, q] = (
                    math.factorial(p) * math.factorial(q - 1) / math.factorial(p + q)
                )
    return pos, neg


_W_POS, _W_NEG = _weight_tables(N_FEATURES)


def _collect_leaf_paths(tree: TreeNode):
    """Yield (leaf_value, {feature: (lo, hi]}) for every leaf of a tree."""
    out = []

    def walk(node: TreeNode, bounds: dict[int, tuple[float, float]]):
        if node.is_leaf:
            out.append((node.value, dict(bounds)))
            return
        f, thr = node.feature_index, node.threshold
        lo, hi = bounds.get(f, (-np.inf, np.inf))
        bounds[f] = (lo, min(hi, thr))
        walk(node.left, bounds)
        bounds[f] = (max(lo, thr), hi)
        walk(node.right, bounds)
        if lo == -np.inf and hi == np.inf:
            del bounds[f]
        else:
            bounds[f] = (lo, hi)

    walk(tree, {})
    return out


class TreeShapExplainer:
    """Exact interventional Shapley attribution against a fixed background.

    Precomputes, per leaf, which background rows satisfy each path
    interval, so explaining one input costs a handful of vectorized
    passes over a (leaves x path-features x background) tensor.
    """

    def __init__(self, model: TreeEnsemble, background, background_cap: int = BACKGROUND_CAP):
        self.model = model
        B = subsample_background(_as_background_matrix(background), background_cap)
        self.background = B
        self.base_value = float(np.mean(model.predict_margin_batch(B)))
        self._build_tables(B)

    def _build_tables(self, B: np.ndarray) -> None:
        values, fids, los, his = [], [], [], []
        width = 0
        paths = []
        for tree in self.model.trees:
            for value, bounds in _collect_leaf_paths(tree):
                paths.append((value * self.model.learning_rate, sorted(bounds.items())))
                width = max(width, len(bounds))
        self.n_leaves = len(paths)
        if not paths:
            return
        for value, items in paths:
            values.append(value)
            f = [fid for fid, _ in items]
            lo = [b[0] for _, b in items]
            hi = [b[1] for _, b in items]
            pad = width - len(items)
            # padded slots carry an infinite interval: satisfied by every
            # row, so they never count toward p, q, or a dead reference
            fids.append(f + [0] * pad)
            los.append(lo + [-np.inf] * pad)
            his.append(hi + [np.inf] * pad)
        self.leaf_values = np.asarray(values)                       # (L,)
        self.fids = np.asarray(fids, dtype=np.intp)                 # (L, K)
        self.lo = np.asarray(los)                                   # (L, K)
        self.hi = np.asarray(his)                                   # (L, K)
        # r_ok[l, k, j]: background row j satisfies path interval k of leaf l
        bvals = B[:, self.fids.ravel()].T.reshape(self.fids.shape + (B.shape[0],))
        self.r_ok = (bvals > self.lo[:, :, None]) & (bvals <= self.hi[:, :, None])

    def explain(self, x) -> Attribution:
        x = _as_feature_array(x)
        phi = np.zeros(N_FEATURES)
        if self.n_leaves:
            xv = x[self.fids]
            x_ok = (xv > self.lo) & (xv <= self.hi)                 # (L, K)
            x_only = x_ok[:, :, None] & ~self.r_ok                  # (L, K, m)
            r_only = ~x_ok[:, :, None] & self.r_ok
            dead = (~x_ok[:, :, None] & ~self.r_ok).any(axis=1)     # (L, m)
            p = x_only.sum(axis=1)                                  # (L, m)
            q = r_only.sum(axis=1)
            alive = ~dead
            v = self.leaf_values[:, None]
            w_pos = np.where(alive, v * _W_POS[p, q], 0.0)          # (L, m)
            w_neg = np.where(alive, v * _W_NEG[p, q], 0.0)
            contrib = (
                (x_only * w_pos[:, None, :]).sum(axis=2)
                - (r_only * w_neg[:, None, :]).sum(axis=2)
            )                                                       # (L, K)
            np.add.at(phi, self.fids.ravel(), contrib.ravel())
            phi /= self.background.shape[0]
        return Attribution(base_value=self.base_value, phi=phi,
                           feature_names=self.model.feature_names)


def tree_shap(model: TreeEnsemble, x, background) -> Attribution:
    """One-shot exact interventional attribution (see TreeShapExplainer)."""
    return TreeShapExplainer(model, background).explain(x)


def brute_force_shap(
    model: TreeEnsemble, x, background, background_cap: int = BACKGROUND_CAP
) -> Attribution:
    """Shapley values by full subset enumeration with factorial weights.

    Testing oracle for `tree_shap`: same interventional expectation, but
    the 2^10 subset games are evaluated directly through the model.
    """
    x = _as_feature_array(x)
    B = subsample_background(_as_background_matrix(background), background_cap)
    m = B.shape[0]
    n = N_FEATURES
    n_subsets = 1 << n

    subset_bits = (np.arange(n_subsets)[:, None] >> np.arange(n)) & 1  # (S, n)
    v = np.empty(n_subsets)
    chunk = max(1, (1 << 16) // m)
    for start in range(0, n_subsets, chunk):
        stop = min(start + chunk, n_subsets)
        masks = subset_bits[start:stop].astype(bool)                # (c, n)
        Z = np.where(masks[:, None, :], x[None, None, :], B[None, :, :])
        margins = model.predict_margin_batch(Z.reshape(-1, n))
        v[start:stop] = margins.reshape(stop - start, m).mean(axis=1)

    sizes = subset_bits.sum(axis=1)
    fact = [math.factorial(i) for i in range(n + 1)]
    size_w = np.array([fact[s] * fact[n - 1 - s] / fact[n] for s in range(n)])

    phi = np.zeros(n)
    subset_ids = np.arange(n_subsets)
    for i in range(n):
        without = subset_ids[(subset_ids >> i) & 1 == 0]
        w = size_w[sizes[without]]
        phi[i] = float(np.sum(w * (v[without | (1 << i)] - v[without])))
    return Attribution(base_value=float(v[0]), phi=phi,
                       feature_names=model.feature_names)

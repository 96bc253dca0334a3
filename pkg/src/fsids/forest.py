"""Random forest over embedding features: bootstrapped CART trees with Gini
impurity and majority voting.

Deterministic throughout: per-tree generators are seeded with root seed +
tree index, candidate thresholds are midpoints between consecutive distinct
sorted values, and every tie (split choice, leaf vote, ensemble vote) breaks
toward the lowest index.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ContractError
from .numcore.rng import make_rng


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    max_depth: int | None = None
    min_samples_leaf: int = 1
    features_per_split: int | str = "sqrt"  # "sqrt" or an explicit count
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ContractError(f"n_trees must be >= 1, got {self.n_trees}")
        if self.min_samples_leaf < 1:
            raise ContractError(f"min_samples_leaf must be >= 1, got {self.min_samples_leaf}")

    def resolve_features(self, n_features: int) -> int:
        if self.features_per_split == "sqrt":
            return max(1, int(np.sqrt(n_features)))
        k = int(self.features_per_split)
        if not 1 <= k <= n_features:
            raise ContractError(
                f"features_per_split {k} outside [1, {n_features}]")
        return k


@dataclass
class TreeNode:
    """Internal node (feature, threshold, children) or leaf (class histogram)."""

    feature: int | None = None
    threshold: float | None = None
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    histogram: np.ndarray | None = None

    @property
    def is_leaf(self) -> bool:
        return self.histogram is not None


@dataclass
class ForestModel:
    config: ForestConfig
    classes: np.ndarray
    n_features: int
    trees: list = field(default_factory=list)
    oob_indices: list = field(default_factory=list)  # per tree, rows left out


class Split(NamedTuple):
    feature: int
    threshold: float
    impurity_decrease: float


def gini(class_counts) -> float:
    """Gini impurity 1 - sum((n_i/n)^2) of a class histogram."""
    counts = np.asarray(class_counts, dtype=np.float64)
    total = counts.sum()
    if total < 1:
        raise ContractError("gini of an empty histogram")
    p = counts / total
    return float(1.0 - np.dot(p, p))


def best_split(x: np.ndarray, y: np.ndarray, feature_subset,
               n_classes: int, min_samples_leaf: int = 1) -> Split | None:
    """Best (feature, midpoint threshold) by Gini decrease over the subset.

    Ties break toward the lowest feature index, then the lowest threshold.
    Returns None when no candidate strictly decreases impurity.
    """
    n = len(y)
    if n < 2:
        return None
    feature_subset = sorted(int(f) for f in feature_subset)
    if not feature_subset:
        raise ContractError("empty feature subset")
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y] = 1.0
    total = onehot.sum(axis=0)
    parent = 1.0 - np.dot(total / n, total / n)
    best = None
    for f in feature_subset:
        order = np.argsort(x[:, f], kind="stable")
        xs = x[order, f]
        prefix = np.cumsum(onehot[order], axis=0)
        boundaries = np.flatnonzero(xs[1:] > xs[:-1]) + 1  # split before index b
        for b in boundaries:
            if b < min_samples_leaf or n - b < min_samples_leaf:
                continue
            left = prefix[b - 1]
            right = total - left
            gl = 1.0 - np.dot(left / b, left / b)
            gr = 1.0 - np.dot(right / (n - b), right / (n - b))
            weighted = (b * gl + (n - b) * gr) / n
            decrease = parent - weighted
            if decrease > 0.0 and (best is None or decrease > best.impurity_decrease):
                threshold = (xs[b - 1] + xs[b]) / 2.0
                best = Split(f, float(threshold), float(decrease))
    return best


def _grow(x, y, idx, rng, cfg, n_classes, n_subset, depth) -> TreeNode:
    counts = np.bincount(y[idx], minlength=n_classes)
    if (len(idx) < 2 * cfg.min_samples_leaf or len(idx) < 2
            or (cfg.max_depth is not None and depth >= cfg.max_depth)
            or counts.max() == len(idx)):
        return TreeNode(histogram=counts)
    n_features = x.shape[1]
    subset = np.sort(rng.choice(n_features, size=n_subset, replace=False))
    split = best_split(x[idx], y[idx], subset, n_classes, cfg.min_samples_leaf)
    if split is None:
        return TreeNode(histogram=counts)
    go_left = x[idx, split.feature] <= split.threshold
    left = _grow(x, y, idx[go_left], rng, cfg, n_classes, n_subset, depth + 1)
    right = _grow(x, y, idx[~go_left], rng, cfg, n_classes, n_subset, depth + 1)
    return TreeNode(feature=split.feature, threshold=split.threshold, left=left, right=right)


def _build_tree(x, y, cfg, n_classes, n_subset, tree_index):
    rng = make_rng(cfg.seed + tree_index)
    n = len(y)
    if cfg.bootstrap:
        sample = np.sort(rng.integers(0, n, size=n))
        oob = np.setdiff1d(np.arange(n), sample)
    else:
        sample = np.arange(n)
        oob = np.array([], dtype=np.intp)
    root = _grow(x, y, sample, rng, cfg, n_classes, n_subset, depth=0)
    return root, oob


def fit(features: np.ndarray, labels: np.ndarray, cfg: ForestConfig,
        n_jobs: int = 1) -> ForestModel:
    """Grow the configured ensemble; bitwise deterministic for a fixed seed
    regardless of n_jobs."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if x.ndim != 2 or len(x) != len(y):
        raise ContractError(f"features {x.shape} and labels {y.shape} do not align")
    if len(y) < 2:
        raise ContractError("need at least 2 training rows")
    classes = np.unique(y)
    if len(classes) < 2:
        raise ContractError(f"need at least 2 classes, got only {classes.tolist()}")
    class_pos = {c: i for i, c in enumerate(classes)}
    y_enc = np.array([class_pos[v] for v in y])
    n_subset = cfg.resolve_features(x.shape[1])

    model = ForestModel(config=cfg, classes=classes, n_features=x.shape[1])
    if n_jobs <= 1:
        built = [_build_tree(x, y_enc, cfg, len(classes), n_subset, t)
                 for t in range(cfg.n_trees)]
    else:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            built = list(pool.map(
                lambda t: _build_tree(x, y_enc, cfg, len(classes), n_subset, t),
                range(cfg.n_trees)))
    for root, oob in built:
        model.trees.append(root)
        model.oob_indices.append(oob)
    return model


def _tree_votes(root: TreeNode, x: np.ndarray) -> np.ndarray:
    """Leaf-histogram argmax per row (ties -> lowest class index)."""
    out = np.empty(len(x), dtype=np.intp)
    stack = [(root, np.arange(len(x)))]
    while stack:
        node, idx = stack.pop()
        if len(idx) == 0:
            continue
        if node.is_leaf:
            out[idx] = int(node.histogram.argmax())
            continue
        go_left = x[idx, node.feature] <= node.threshold
        stack.append((node.left, idx[go_left]))
        stack.append((node.right, idx[~go_left]))
    return out


def predict(model: ForestModel, feature_row: np.ndarray):
    """Majority vote of the ensemble on one row -> (class, vote_fractions)."""
    row = np.asarray(feature_row, dtype=np.float64).reshape(1, -1)
    if row.shape[1] != model.n_features:
        raise ContractError(
            f"row has {row.shape[1]} features, model was trained on {model.n_features}")
    votes = np.zeros(len(model.classes))
    for tree in model.trees:
        votes[_tree_votes(tree, row)[0]] += 1
    fractions = votes / len(model.trees)
    return model.classes[int(votes.argmax())], fractions


def predict_batch(model: ForestModel, features: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.shape[1] != model.n_features:
        raise ContractError(
            f"rows have {x.shape[1]} features, model was trained on {model.n_features}")
    votes = np.zeros((len(x), len(model.classes)))
    for tree in model.trees:
        v = _tree_votes(tree, x)
        votes[np.arange(len(x)), v] += 1
    return model.classes[votes.argmax(axis=1)]


class OobResult(NamedTuple):
    accuracy: float
    n_scored: int
    n_skipped: int


def oob_score(model: ForestModel, features: np.ndarray, labels: np.ndarray) -> OobResult:
    """Accuracy of votes restricted, per row, to trees that never saw it."""
    if not model.config.bootstrap:
        raise ContractError("out-of-bag scoring requires bootstrap sampling")
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    votes = np.zeros((len(x), len(model.classes)))
    for tree, oob in zip(model.trees, model.oob_indices):
        if len(oob) == 0:
            continue
        v = _tree_votes(tree, x[oob])
        votes[oob, v] += 1
    covered = votes.sum(axis=1) > 0
    n_scored = int(covered.sum())
    n_skipped = len(x) - n_scored
    if n_scored == 0:
        return OobResult(accuracy=0.0, n_scored=0, n_skipped=n_skipped)
    pred = model.classes[votes[covered].argmax(axis=1)]
    return OobResult(accuracy=float((pred == y[covered]).mean()),
                     n_scored=n_scored, n_skipped=n_skipped)


# --- checkpoint serialization (preorder walk) -------------------------------

def tree_to_jsonable(node: TreeNode):
    """Preorder encoding: leaves carry counts, internals carry (f, t, l, r)."""
    if node.is_leaf:
        return {"counts": [int(v) for v in node.histogram]}
    return {"f": int(node.feature), "t": float(node.threshold),
            "l": tree_to_jsonable(node.left), "r": tree_to_jsonable(node.right)}


def tree_from_jsonable(obj) -> TreeNode:
    if "counts" in obj:
        return TreeNode(histogram=np.asarray(obj["counts"], dtype=np.int64))
    return TreeNode(feature=obj["f"], threshold=obj["t"],
                    left=tree_from_jsonable(obj["l"]),
                    right=tree_from_jsonable(obj["r"]))


def forest_to_jsonable(model: ForestModel):
    return {
        "config": {
            "n_trees": model.config.n_trees,
            "max_depth": model.config.max_depth,
            "min_samples_leaf": model.config.min_samples_leaf,
            "features_per_split": model.config.features_per_split,
            "bootstrap": model.config.bootstrap,
            "seed": model.config.seed,
        },
        "classes": [int(c) for c in model.classes],
        "n_features": model.n_features,
        "trees": [tree_to_jsonable(t) for t in model.trees],
        "oob": [[int(i) for i in o] for o in model.oob_indices],
    }


def forest_from_jsonable(obj) -> ForestModel:
    cfg = ForestConfig(**obj["config"])
    model = ForestModel(config=cfg, classes=np.asarray(obj["classes"]),
                        n_features=obj["n_features"])
    model.trees = [tree_from_jsonable(t) for t in obj["trees"]]
    model.oob_indices = [np.asarray(o, dtype=np.intp) for o in obj["oob"]]
    return model

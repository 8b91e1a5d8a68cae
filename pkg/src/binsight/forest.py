"""CART random forest (Gini impurity) trained on CNN embeddings."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import List, Optional, Union

import numpy as np

from .errors import DimensionMismatch, FormatVersionError, SingleClassInput

FORMAT_VERSION = 1


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    max_depth: int = 12
    min_leaf: int = 2
    features_per_split: int = 16
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.max_depth < 0 or self.min_leaf < 1 or self.features_per_split < 1:
            raise ValueError("max_depth >= 0, min_leaf >= 1 and features_per_split >= 1 required")


@dataclass(frozen=True)
class Leaf:
    positive_fraction: float


@dataclass(frozen=True)
class Split:
    feature: int
    threshold: float
    left: "TreeNode"
    right: "TreeNode"


TreeNode = Union[Leaf, Split]


@dataclass(frozen=True)
class Forest:
    trees: tuple
    config: ForestConfig
    n_features: int


def split_score(pos_left, n_left, pos_right, n_right):
    """Sum over children of (p^2 + q^2) / n, where p/q are class counts.

    Maximizing this is equivalent to minimizing the size-weighted Gini
    impurity of the two children.
    """
    neg_left = n_left - pos_left
    neg_right = n_right - pos_right
    return (pos_left * pos_left + neg_left * neg_left) / n_left + (
        pos_right * pos_right + neg_right * neg_right
    ) / n_right


def gini(pos: float, n: float) -> float:
    p = pos / n
    return 1.0 - p * p - (1.0 - p) * (1.0 - p)


def best_split(x: np.ndarray, y: np.ndarray, features, min_leaf: int):
    """Exhaustive threshold search over ``features`` (in the given order).

    Candidate thresholds are midpoints between consecutive distinct values.
    Returns ``(feature, threshold)`` of the highest :func:`split_score`,
    first one found on ties, or None when no split leaves ``min_leaf``
    samples on both sides.
    """
    n = len(y)
    best = None
    best_score = -np.inf
    for f in features:
        order = np.argsort(x[:, f], kind="stable")
        xs = x[order, f]
        ys = y[order].astype(np.float64)
        n_left = np.arange(1, n, dtype=np.float64)
        valid = (xs[1:] != xs[:-1]) & (n_left >= min_leaf) & (n - n_left >= min_leaf)
        if not valid.any():
            continue
        pos_left = np.cumsum(ys)[:-1]
        pos_right = ys.sum() - pos_left
        scores = split_score(pos_left, n_left, pos_right, n - n_left)
        scores[~valid] = -np.inf
        i = int(np.argmax(scores))
        if scores[i] > best_score:
            best_score = scores[i]
            best = (int(f), float((xs[i] + xs[i + 1]) / 2.0))
    return best


def _grow(x, y, depth, cfg: ForestConfig, rng) -> TreeNode:
    n = len(y)
    pos = int(y.sum())
    if depth >= cfg.max_depth or pos == 0 or pos == n or n < 2 * cfg.min_leaf:
        return Leaf(pos / n)
    n_features = x.shape[1]
    k = min(cfg.features_per_split, n_features)
    if k < n_features:
        features = np.sort(rng.choice(n_features, size=k, replace=False))
    else:
        features = range(n_features)
    found = best_split(x, y, features, cfg.min_leaf)
    if found is None:
        return Leaf(pos / n)
    f, thr = found
    go_left = x[:, f] <= thr
    return Split(
        f,
        thr,
        _grow(x[go_left], y[go_left], depth + 1, cfg, rng),
        _grow(x[~go_left], y[~go_left], depth + 1, cfg, rng),
    )


def fit_tree(x: np.ndarray, y: np.ndarray, cfg: ForestConfig, rng: Optional[np.random.Generator] = None) -> TreeNode:
    return _grow(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.int64), 0, cfg,
                 rng or np.random.default_rng(cfg.seed))


def fit_forest(embeddings, labels, config: ForestConfig = ForestConfig()) -> Forest:
    """Each tree sees its own bootstrap sample and random feature subsets."""
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or len(x) != len(y):
        raise DimensionMismatch("embeddings must be (n_samples, n_features) matching labels")
    if len(y) < 2 or len(np.unique(y)) < 2:
        raise SingleClassInput("forest training needs at least two samples of each class present")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    trees = []
    for seq in np.random.SeedSequence(config.seed).spawn(config.n_trees):
        rng = np.random.default_rng(seq)
        if config.bootstrap:
            idx = rng.integers(0, len(y), size=len(y))
            xb, yb = x[idx], y[idx]
        else:
            xb, yb = x, y
        trees.append(_grow(xb, yb, 0, config, rng))
    return Forest(tuple(trees), config, x.shape[1])


def tree_predict(node: TreeNode, row: np.ndarray) -> float:
    while isinstance(node, Split):
        node = node.left if row[node.feature] <= node.threshold else node.right
    return node.positive_fraction


def predict_forest(forest: Forest, embedding) -> Union[float, np.ndarray]:
    """Mean leaf positive fraction; accepts one vector or a 2-D batch."""
    x = np.asarray(embedding, dtype=np.float64)
    single = x.ndim == 1
    rows = x[None] if single else x
    if rows.ndim != 2 or rows.shape[1] != forest.n_features:
        raise DimensionMismatch(f"expected {forest.n_features} features, got shape {x.shape}")
    out = np.array([np.mean([tree_predict(t, r) for t in forest.trees]) for r in rows])
    return float(out[0]) if single else out


def _node_to_json(node: TreeNode):
    if isinstance(node, Leaf):
        return [node.positive_fraction]
    return [node.feature, node.threshold, _node_to_json(node.left), _node_to_json(node.right)]


def _node_from_json(doc) -> TreeNode:
    if len(doc) == 1:
        return Leaf(float(doc[0]))
    return Split(int(doc[0]), float(doc[1]), _node_from_json(doc[2]), _node_from_json(doc[3]))


def forest_to_dict(forest: Forest) -> dict:
    """Trees as nested arrays: ``[fraction]`` for leaves, ``[feature, threshold, left, right]`` for splits."""
    return {
        "format_version": FORMAT_VERSION,
        "config": asdict(forest.config),
        "n_features": forest.n_features,
        "trees": [_node_to_json(t) for t in forest.trees],
    }


def forest_from_dict(doc: dict) -> Forest:
    if doc.get("format_version") != FORMAT_VERSION:
        raise FormatVersionError(f"unsupported forest format_version {doc.get('format_version')!r}")
    return Forest(
        tuple(_node_from_json(t) for t in doc["trees"]),
        ForestConfig(**doc["config"]),
        int(doc["n_features"]),
    )


def tree_depth(node: TreeNode) -> int:
    if isinstance(node, Leaf):
        return 0
    return 1 + max(tree_depth(node.left), tree_depth(node.right))


def leaves(node: TreeNode) -> List[Leaf]:
    if isinstance(node, Leaf):
        return [node]
    return leaves(node.left) + leaves(node.right)

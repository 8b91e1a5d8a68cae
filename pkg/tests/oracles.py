"""Independent reference implementations used as test oracles.

Each one is written the slow, obvious way (pure Python loops, exact
fractions where ties matter) and shares no code with the package.
"""

import math
from collections import Counter
from fractions import Fraction
from itertools import product

import numpy as np


def entropy_oracle(chunk: bytes) -> float:
    n = len(chunk)
    return -sum(c / n * math.log2(c / n) for c in Counter(chunk).values())


def hit_oracle(data: bytes, offset: int, window: int = 64) -> int:
    """Red/blue value at ``offset``: entropy of the clamped centered window, scaled to 0..255."""
    n = len(data)
    if window >= n:
        chunk = data
    else:
        start = min(max(offset - window // 2, 0), n - window)
        chunk = data[start:start + window]
    return math.floor(255 * entropy_oracle(chunk) / 8 + 0.5)


def naive_box(px: np.ndarray, side: int = 64) -> np.ndarray:
    """Area-weighted mean of each fractional source rectangle, double loop."""
    h, w = px.shape
    out = np.zeros((side, side))
    for i in range(side):
        y0, y1 = i * h / side, (i + 1) * h / side
        for j in range(side):
            x0, x1 = j * w / side, (j + 1) * w / side
            total = 0.0
            for y in range(int(math.floor(y0)), int(math.ceil(y1))):
                wy = min(y1, y + 1) - max(y0, y)
                for x in range(int(math.floor(x0)), int(math.ceil(x1))):
                    total += wy * (min(x1, x + 1) - max(x0, x)) * px[y, x]
            out[i, j] = total / ((y1 - y0) * (x1 - x0))
    return out / 255.0


# -- metrics ------------------------------------------------------------------

def metrics_oracle(tp, fp, tn, fn):
    """Hand formulas with exact fractions; empty denominators give 0."""
    total = tp + fp + tn + fn
    acc = Fraction(tp + tn, total)
    prec = Fraction(tp, tp + fp) if tp + fp else Fraction(0)
    rec = Fraction(tp, tp + fn) if tp + fn else Fraction(0)
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else Fraction(0)
    return tuple(float(v) for v in (acc, prec, rec, f1))


# -- gradients ----------------------------------------------------------------

def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def numeric_gradient(loss_fn, params: dict, name: str, idx, eps: float = 1e-5) -> float:
    """Central difference of ``loss_fn()`` w.r.t. ``params[name][idx]``."""
    arr = params[name]
    keep = arr[idx]
    arr[idx] = keep + eps
    up = loss_fn()
    arr[idx] = keep - eps
    down = loss_fn()
    arr[idx] = keep
    return (up - down) / (2 * eps)


# -- trees --------------------------------------------------------------------

def _weighted_gini(labels):
    """n * Gini as an exact fraction."""
    n = len(labels)
    if n == 0:
        return Fraction(0)
    p = sum(labels)
    return Fraction(n) - Fraction(p * p + (n - p) * (n - p), n)


def _candidates(rows, n_features):
    for f in range(n_features):
        values = sorted({r[f] for r, _ in rows})
        for a, b in zip(values, values[1:]):
            yield f, (a + b) / 2.0


def cart_oracle(rows, depth, max_depth, min_leaf=1):
    """Recursive CART by brute force: every feature, every midpoint, exact Gini.

    ``rows`` is a list of (feature tuple, label). Ties keep the lowest
    feature index, then the lowest threshold. Nodes are ('leaf', fraction)
    or ('split', f, thr, left, right).
    """
    labels = [y for _, y in rows]
    n, pos = len(labels), sum(labels)
    if depth >= max_depth or pos in (0, n) or n < 2 * min_leaf:
        return ("leaf", pos / n)
    best, best_cost = None, None
    for f, thr in _candidates(rows, len(rows[0][0])):
        left = [y for r, y in rows if r[f] <= thr]
        right = [y for r, y in rows if r[f] > thr]
        if len(left) < min_leaf or len(right) < min_leaf:
            continue
        cost = _weighted_gini(left) + _weighted_gini(right)
        if best_cost is None or cost < best_cost:
            best, best_cost = (f, thr), cost
    if best is None:
        return ("leaf", pos / n)
    f, thr = best
    return ("split", f, thr,
            cart_oracle([r for r in rows if r[0][f] <= thr], depth + 1, max_depth, min_leaf),
            cart_oracle([r for r in rows if r[0][f] > thr], depth + 1, max_depth, min_leaf))


def oracle_predict(node, row):
    while node[0] == "split":
        node = node[3] if row[node[1]] <= node[2] else node[4]
    return node[1]


def optimal_stump_cost(rows):
    """Globally minimal n*Gini over all trees of depth <= 1 (leaf or any single split)."""
    labels = [y for _, y in rows]
    best = _weighted_gini(labels)
    for f, thr in _candidates(rows, len(rows[0][0])):
        left = [y for r, y in rows if r[f] <= thr]
        right = [y for r, y in rows if r[f] > thr]
        best = min(best, _weighted_gini(left) + _weighted_gini(right))
    return best


def tree_cost(node_predict_leaves, rows):
    """n*Gini summed over the leaves a tree routes ``rows`` into."""
    groups = {}
    for r, y in rows:
        groups.setdefault(node_predict_leaves(r), []).append(y)
    return sum((_weighted_gini(g) for g in groups.values()), Fraction(0))


def tree_battery(count: int = 200, seed: int = 2024):
    """Fixed battery of small instances: <= 64 samples, <= 4 features, both classes present."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        k = len(out)
        n = int(rng.integers(4, 65))
        d = int(rng.integers(1, 5))
        if k % 3 == 0:
            x = rng.integers(0, 6, (n, d)).astype(float)  # many ties
        else:
            x = np.round(rng.random((n, d)), 3)
        if k % 2 == 0:  # noisy threshold rule
            y = ((x[:, 0] + (x[:, -1] if d > 1 else 0)) > np.median(x[:, 0]) * 1.5).astype(int)
            flip = rng.random(n) < 0.1
            y = np.where(flip, 1 - y, y)
        else:
            y = rng.integers(0, 2, n)
        if 0 < y.sum() < n:
            out.append((x, y))
    return out


def _activation_pattern(cache) -> bytes:
    """ReLU on/off masks and max-pool winners of one forward pass."""
    parts = [np.packbits(cache.dense_pre > 0).tobytes()]
    for blk in cache.blocks:
        parts.append(np.packbits(blk["pre"] > 0).tobytes())
        parts.append(np.asarray(blk["arg"]).tobytes())
    return b"".join(parts)


def gradient_check(nn, model, x, y, mask=None, n_weights: int = 200, seed: int = 0, eps: float = 1e-5):
    """Max relative error between backprop and central differences over sampled weights.

    Weights are drawn evenly across every parameter tensor so each layer type
    is covered. A draw whose +-eps probes change the activation pattern (a
    ReLU or max-pool switch inside the interval) is not differentiable there,
    so it is replaced by a fresh draw from the same tensor.
    Returns ``(max_error, per_tensor_max, skipped)``.
    """
    _, grads = nn.loss_and_gradients(model, x, y, mask)
    xb = np.asarray(x, dtype=np.float64)

    def probe():
        _, cache = nn.forward(model, xb)
        return nn.bce_with_logits(cache.logits, y, mask), _activation_pattern(cache)

    _, base_pattern = probe()
    rng = np.random.default_rng(seed)
    names = sorted(model.params)
    per = {}
    skipped = 0
    for k in range(n_weights):
        name = names[k % len(names)]
        arr = model.params[name]
        while True:
            idx = tuple(int(rng.integers(0, s)) for s in arr.shape)
            keep = arr[idx]
            arr[idx] = keep + eps
            up, pat_up = probe()
            arr[idx] = keep - eps
            down, pat_down = probe()
            arr[idx] = keep
            if pat_up == base_pattern and pat_down == base_pattern:
                break
            skipped += 1
        num = (up - down) / (2 * eps)
        per[name] = max(per.get(name, 0.0), relative_error(float(grads[name][idx]), num))
    return max(per.values()), per, skipped

"""A small convolutional network with hand-written forward and backward passes.

Architecture (fixed block count, configurable filter widths)::

    input (C, 64, 64)
    3 x [conv 3x3 same-size (zero border by default) -> ReLU -> max-pool 2x2]
    flatten (8 * 8 * filters[-1])
    dense -> ReLU            (256-dim embedding)
    dense -> sigmoid         (one score per head)

Activations are kept channels-last (NHWC) internally; public inputs are
channels-first ``(C, H, W)`` or batched ``(N, C, H, W)`` float arrays.
All arithmetic is float64.
"""

from __future__ import annotations

import base64
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    DivergenceDetected,
    FormatVersionError,
    HeadCountMismatch,
    ShapeMismatch,
)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
INPUT_SIDE = 64
EMBEDDING_DIM = 256
N_BLOCKS = 3
PADDING_MODES = ("edge", "zero")


@dataclass(frozen=True)
class CnnConfig:
    input_channels: int = 1
    filters: Tuple[int, int, int] = (8, 16, 32)
    kernel: int = 3
    embedding_dim: int = EMBEDDING_DIM
    heads: int = 1
    seed: int = 0
    padding: str = "zero"

    def __post_init__(self):
        object.__setattr__(self, "filters", tuple(int(f) for f in self.filters))
        if self.input_channels not in (1, 3):
            raise ValueError("input_channels must be 1 or 3")
        if len(self.filters) != N_BLOCKS or min(self.filters) < 1:
            raise ValueError(f"exactly {N_BLOCKS} conv blocks with >= 1 filter are required")
        if self.kernel != 3:
            raise ValueError("only 3x3 kernels are supported")
        if self.embedding_dim != EMBEDDING_DIM:
            raise ValueError(f"embedding_dim must be {EMBEDDING_DIM}")
        if self.heads not in (1, 2):
            raise ValueError("heads must be 1 or 2")
        if self.padding not in PADDING_MODES:
            raise ValueError(f"padding must be one of {PADDING_MODES}")

    @property
    def feature_side(self) -> int:
        return INPUT_SIDE >> N_BLOCKS

    @property
    def flat_dim(self) -> int:
        return self.feature_side ** 2 * self.filters[-1]

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes = {}
        c = self.input_channels
        for i, f in enumerate(self.filters, start=1):
            shapes[f"conv{i}.w"] = (f, c, self.kernel, self.kernel)
            shapes[f"conv{i}.b"] = (f,)
            c = f
        shapes["dense.w"] = (self.flat_dim, self.embedding_dim)
        shapes["dense.b"] = (self.embedding_dim,)
        shapes["head.w"] = (self.embedding_dim, self.heads)
        shapes["head.b"] = (self.heads,)
        return shapes


@dataclass
class CnnModel:
    config: CnnConfig
    params: Dict[str, np.ndarray]
    trained_epochs: int = 0

    def copy(self) -> "CnnModel":
        return CnnModel(self.config, {k: v.copy() for k, v in self.params.items()}, self.trained_epochs)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    # stop as soon as an epoch's mean loss drops below this
    target_loss: Optional[float] = None

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class ActivationCache:
    """Per-layer tensors from one forward pass, in layer order."""

    x: np.ndarray
    blocks: List[dict] = field(default_factory=list)
    flat: Optional[np.ndarray] = None
    dense_pre: Optional[np.ndarray] = None
    embedding: Optional[np.ndarray] = None
    logits: Optional[np.ndarray] = None
    scores: Optional[np.ndarray] = None

    @property
    def last_conv(self) -> np.ndarray:
        """Post-activation, post-pool maps of the last conv block, NHWC."""
        return self.blocks[-1]["pooled"]


def init_model(config: CnnConfig) -> CnnModel:
    """He-uniform weights, zero biases, drawn from a generator seeded by ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in config.param_shapes().items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if name.startswith("conv") else shape[0]
            limit = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-limit, limit, size=shape)
    return CnnModel(config, params)


def zero_model(config: CnnConfig) -> CnnModel:
    return CnnModel(config, {k: np.zeros(s) for k, s in config.param_shapes().items()})


# -- layers -----------------------------------------------------------------

def _im2col(x: np.ndarray, k: int, padding: str) -> np.ndarray:
    n, h, w, c = x.shape
    p = k // 2
    mode = "edge" if padding == "edge" else "constant"
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)), mode=mode)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))  # n,h,w,c,k,k
    return win.reshape(n * h * w, c * k * k)


def _col2im(dcols: np.ndarray, shape, k: int, padding: str) -> np.ndarray:
    n, h, w, c = shape
    p = k // 2
    d = dcols.reshape(n, h, w, c, k, k)
    dxp = np.zeros((n, h + 2 * p, w + 2 * p, c))
    for di in range(k):
        for dj in range(k):
            dxp[:, di:di + h, dj:dj + w, :] += d[..., di, dj]
    if padding == "edge":
        # replicated border cells route their gradient back to the edge pixel
        dxp[:, p] += dxp[:, :p].sum(axis=1)
        dxp[:, p + h - 1] += dxp[:, p + h:].sum(axis=1)
        dxp[:, :, p] += dxp[:, :, :p].sum(axis=2)
        dxp[:, :, p + w - 1] += dxp[:, :, p + w:].sum(axis=2)
    return dxp[:, p:p + h, p:p + w, :]


def _pool_forward(x: np.ndarray):
    n, h, w, c = x.shape
    blocks = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    arg = blocks.argmax(axis=-1)
    pooled = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return pooled, arg


def _pool_backward(dpooled: np.ndarray, arg: np.ndarray, shape) -> np.ndarray:
    n, h, w, c = shape
    d = np.zeros(dpooled.shape + (4,))
    np.put_along_axis(d, arg[..., None], dpooled[..., None], axis=-1)
    return d.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _as_batch(model: CnnModel, inputs) -> Tuple[np.ndarray, bool]:
    x = np.asarray(inputs, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    cfg = model.config
    if x.ndim != 4 or x.shape[1:] != (cfg.input_channels, INPUT_SIDE, INPUT_SIDE):
        raise ShapeMismatch(
            f"expected input (N, {cfg.input_channels}, {INPUT_SIDE}, {INPUT_SIDE}), got {np.shape(inputs)}"
        )
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1)), single


# -- forward / backward -----------------------------------------------------

def features_to_logits(model: CnnModel, features: np.ndarray, cache: Optional[ActivationCache] = None):
    """Run the dense layers on last-conv feature maps ``(N, 8, 8, F)``."""
    p = model.params
    flat = features.reshape(len(features), -1)
    dense_pre = flat @ p["dense.w"] + p["dense.b"]
    emb = np.maximum(dense_pre, 0.0)
    logits = emb @ p["head.w"] + p["head.b"]
    if cache is not None:
        cache.flat, cache.dense_pre, cache.embedding, cache.logits = flat, dense_pre, emb, logits
    return logits


def forward_batch(model: CnnModel, x_nhwc: np.ndarray) -> ActivationCache:
    p = model.params
    cache = ActivationCache(x=x_nhwc)
    a = x_nhwc
    for i in range(1, N_BLOCKS + 1):
        w = p[f"conv{i}.w"]
        cols = _im2col(a, w.shape[-1], model.config.padding)
        pre = (cols @ w.reshape(w.shape[0], -1).T + p[f"conv{i}.b"]).reshape(a.shape[:3] + (w.shape[0],))
        act = np.maximum(pre, 0.0)
        pooled, arg = _pool_forward(act)
        cache.blocks.append({"input": a, "cols": cols, "pre": pre, "act": act, "pooled": pooled, "arg": arg})
        a = pooled
    logits = features_to_logits(model, a, cache)
    cache.scores = _sigmoid(logits)
    return cache


def forward(model: CnnModel, inputs):
    """Scores in (0, 1) per head plus the activation cache.

    ``inputs`` is ``(C, 64, 64)`` or ``(N, C, 64, 64)``; scores are shaped
    ``(heads,)`` or ``(N, heads)`` accordingly.
    """
    x, single = _as_batch(model, inputs)
    cache = forward_batch(model, x)
    scores = cache.scores[0] if single else cache.scores
    return scores, cache


def bce_with_logits(logits: np.ndarray, targets: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """Batch mean of the per-head binary cross-entropies summed over heads."""
    y = np.asarray(targets, dtype=np.float64).reshape(logits.shape)
    per = np.logaddexp(0.0, logits) - y * logits
    if mask is not None:
        per = per * np.asarray(mask, dtype=np.float64).reshape(logits.shape)
    return float(per.sum() / len(logits))


def _backward_dense(model: CnnModel, cache: ActivationCache, dlogits: np.ndarray, grads: dict):
    p = model.params
    grads["head.w"] = cache.embedding.T @ dlogits
    grads["head.b"] = dlogits.sum(axis=0)
    demb = dlogits @ p["head.w"].T
    dpre = demb * (cache.dense_pre > 0)
    grads["dense.w"] = cache.flat.T @ dpre
    grads["dense.b"] = dpre.sum(axis=0)
    return (dpre @ p["dense.w"].T).reshape(cache.last_conv.shape)


def backward(model: CnnModel, cache: ActivationCache, targets, mask=None) -> Dict[str, np.ndarray]:
    """Exact gradients of :func:`bce_with_logits` w.r.t. every parameter.

    ``mask`` (same shape as ``targets``) zeroes the loss terms of individual
    heads or samples.
    """
    logits = cache.logits
    y = np.asarray(targets, dtype=np.float64).reshape(logits.shape)
    dlogits = (cache.scores - y) / len(logits)
    if mask is not None:
        dlogits = dlogits * np.asarray(mask, dtype=np.float64).reshape(logits.shape)
    grads: Dict[str, np.ndarray] = {}
    d = _backward_dense(model, cache, dlogits, grads)
    for i in range(N_BLOCKS, 0, -1):
        blk = cache.blocks[i - 1]
        w = model.params[f"conv{i}.w"]
        dact = _pool_backward(d, blk["arg"], blk["act"].shape)
        dpre = dact * (blk["pre"] > 0)
        d2 = dpre.reshape(-1, w.shape[0])
        grads[f"conv{i}.w"] = (d2.T @ blk["cols"]).reshape(w.shape)
        grads[f"conv{i}.b"] = d2.sum(axis=0)
        if i > 1:
            d = _col2im(d2 @ w.reshape(w.shape[0], -1), blk["input"].shape, w.shape[-1], model.config.padding)
    return grads


def loss_and_gradients(model: CnnModel, inputs, targets, mask=None):
    x, _ = _as_batch(model, inputs)
    cache = forward_batch(model, x)
    return bce_with_logits(cache.logits, targets, mask), backward(model, cache, targets, mask)


def logit_grad_wrt_features(model: CnnModel, features: np.ndarray, head: int) -> np.ndarray:
    """d(logit[head]) / d(last-conv features), one row per sample."""
    cache = ActivationCache(x=features, blocks=[{"pooled": features}])
    features_to_logits(model, features, cache)
    dlogits = np.zeros_like(cache.logits)
    dlogits[:, head] = 1.0
    return _backward_dense(model, cache, dlogits, {})


# -- training ---------------------------------------------------------------

def fit(
    model: CnnModel,
    inputs: np.ndarray,
    targets: np.ndarray,
    tc: TrainConfig,
    mask: Optional[np.ndarray] = None,
    on_epoch: Optional[Callable[[int, float], None]] = None,
):
    """Mini-batch SGD with momentum. Returns ``(trained_model, epoch_losses)``.

    The input model is left untouched. Raises DivergenceDetected when an
    epoch's loss is not finite.
    """
    x_all, _ = _as_batch(model, inputs)
    n = len(x_all)
    if n == 0:
        raise ValueError("empty training set")
    y_all = np.asarray(targets, dtype=np.float64).reshape(n, model.config.heads)
    if not np.isin(y_all, (0.0, 1.0)).all():
        raise ValueError("labels must be 0 or 1")
    m_all = None if mask is None else np.asarray(mask, dtype=np.float64).reshape(y_all.shape)

    model = model.copy()
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    rng = np.random.default_rng(tc.seed)
    losses: List[float] = []
    for epoch in range(1, tc.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, tc.batch_size):
            idx = order[lo:lo + tc.batch_size]
            cache = forward_batch(model, x_all[idx])
            m = None if m_all is None else m_all[idx]
            total += bce_with_logits(cache.logits, y_all[idx], m) * len(idx)
            grads = backward(model, cache, y_all[idx], m)
            for k, g in grads.items():
                v = velocity[k]
                v *= tc.momentum
                v -= tc.learning_rate * g
                model.params[k] += v
        loss = total / n
        losses.append(loss)
        model.trained_epochs += 1
        if on_epoch is not None:
            on_epoch(epoch, loss)
        if not np.isfinite(loss):
            raise DivergenceDetected(epoch, losses)
        if tc.target_loss is not None and loss < tc.target_loss:
            break
    return model, losses


# -- inference helpers ------------------------------------------------------

def predict(model: CnnModel, inputs, batch_size: int = 64) -> np.ndarray:
    """Scores for a batch, processed in chunks; always returns ``(N, heads)``."""
    x, _ = _as_batch(model, inputs)
    out = [forward_batch(model, x[i:i + batch_size]).scores for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.config.heads))


def embed(model: CnnModel, inputs, batch_size: int = 64) -> np.ndarray:
    """Post-ReLU outputs of the 256-unit dense layer."""
    x, single = _as_batch(model, inputs)
    out = [forward_batch(model, x[i:i + batch_size]).embedding for i in range(0, len(x), batch_size)]
    emb = np.concatenate(out)
    return emb[0] if single else emb


def predict_dual(model: CnnModel, inputs) -> dict:
    if model.config.heads != 2:
        raise HeadCountMismatch(f"dual prediction needs 2 heads, model has {model.config.heads}")
    scores, _ = forward(model, inputs)
    return {"malicious_score": float(scores[0]), "modified_score": float(scores[1])}


def predict_stacked(gate: CnnModel, specialist_modified: CnnModel, specialist_clean: CnnModel, inputs,
                    threshold: float = 0.5) -> dict:
    """Route through the gate, then score with the matching specialist."""
    for m in (gate, specialist_modified, specialist_clean):
        if m.config.heads != 1:
            raise HeadCountMismatch("stacked models must all be single-head")
    gate_score = float(forward(gate, inputs)[0][0])
    modified = gate_score >= threshold
    specialist = specialist_modified if modified else specialist_clean
    return {
        "modified_flag": modified,
        "modified_score": gate_score,
        "malicious_score": float(forward(specialist, inputs)[0][0]),
        "route_taken": "modified" if modified else "clean",
    }


# -- persistence ------------------------------------------------------------

def _encode(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")


def _decode(text: str, shape) -> np.ndarray:
    arr = np.frombuffer(base64.b64decode(text), dtype="<f8").astype(np.float64)
    return arr.reshape(shape)


def model_to_dict(model: CnnModel) -> dict:
    cfg = asdict(model.config)
    cfg["filters"] = list(cfg["filters"])
    return {
        "format_version": FORMAT_VERSION,
        "config": cfg,
        "trained_epochs": model.trained_epochs,
        "weights": {
            name: {"shape": list(arr.shape), "data": _encode(arr)} for name, arr in model.params.items()
        },
    }


def model_from_dict(doc: dict) -> CnnModel:
    if doc.get("format_version") != FORMAT_VERSION:
        raise FormatVersionError(f"unsupported model format_version {doc.get('format_version')!r}")
    config = CnnConfig(**doc["config"])
    params = {}
    for name, shape in config.param_shapes().items():
        entry = doc["weights"][name]
        if tuple(entry["shape"]) != shape:
            raise ShapeMismatch(f"{name}: stored shape {entry['shape']} != {list(shape)}")
        params[name] = _decode(entry["data"], shape)
    return CnnModel(config, params, int(doc.get("trained_epochs", 0)))


def flatten_params(model: CnnModel, names: Optional[Sequence[str]] = None) -> List[Tuple[str, tuple]]:
    """Enumerate ``(param_name, index)`` for every scalar weight."""
    names = names or list(model.params)
    return [(k, idx) for k in names for idx in np.ndindex(model.params[k].shape)]

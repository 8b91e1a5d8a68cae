"""Glue between files on disk and the modules: inputs, reports, training and explanation."""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import attention, forest as rf, imaging, models, nn, stats
from .binary import RawBinary, load_binary, parse_pe
from .errors import HeadCountMismatch, ShapeMismatch, SingleClassInput, TooFewSamples
from .evaluation import DatasetManifest, ManifestEntry, compute_metrics, confusion

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
THREADS_ENV = "BINSIGHT_THREADS"

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "AnalysisReport",
    "type": "object",
    "required": ["format_version", "path", "size", "pe", "stats"],
    "additionalProperties": False,
    "properties": {
        "format_version": {"const": FORMAT_VERSION},
        "path": {"type": "string"},
        "size": {"type": "integer", "minimum": 1},
        "pe": {
            "oneOf": [
                {"type": "null"},
                {
                    "type": "object",
                    "required": ["machine", "headers_size", "table_truncated", "sections"],
                    "properties": {
                        "machine": {"type": "integer"},
                        "headers_size": {"type": "integer"},
                        "table_truncated": {"type": "boolean"},
                        "sections": {
                            "type": "array",
                            "items": {
                                "type": "object",
                                "required": ["name", "raw_offset", "raw_size", "characteristics", "truncated"],
                            },
                        },
                    },
                },
            ]
        },
        "stats": {
            "type": "object",
            "required": ["entropy", "uniformity", "padding"],
            "properties": {
                "entropy": {"type": "number", "minimum": 0, "maximum": 8},
                "uniformity": {"type": "number", "minimum": 0, "maximum": 1},
                "padding": {
                    "oneOf": [
                        {"type": "null"},
                        {
                            "type": "object",
                            "required": ["start_offset", "length", "fill_byte"],
                            "properties": {
                                "start_offset": {"type": "integer", "minimum": 0},
                                "length": {"type": "integer", "minimum": 1},
                                "fill_byte": {"type": "integer", "minimum": 0, "maximum": 255},
                            },
                        },
                    ]
                },
                "histogram": {"type": "array", "items": {"type": "integer"}, "minItems": 256, "maxItems": 256},
                "entropy_profile": {
                    "type": "object",
                    "required": ["window_size", "stride", "values"],
                },
            },
        },
        "scores": {
            "type": "object",
            "required": ["malicious", "modified", "route"],
            "properties": {
                "malicious": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
                "modified": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
                "route": {"enum": ["modified", "clean", None]},
            },
        },
        "model_id": {"type": "string"},
    },
}


# -- worker pool ------------------------------------------------------------

def resolve_threads(flag: Optional[int] = None) -> int:
    """``--threads`` if given, else $BINSIGHT_THREADS, else 1."""
    if flag is not None:
        value = flag
    else:
        raw = os.environ.get(THREADS_ENV, "").strip()
        try:
            value = int(raw) if raw else 1
        except ValueError:
            log.warning("ignoring non-integer %s=%r", THREADS_ENV, raw)
            value = 1
    return max(1, value)


def parallel_map(fn: Callable, items: Sequence, threads: int = 1) -> list:
    """``[fn(x) for x in items]`` on a bounded pool; results keep input order."""
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# -- inputs -----------------------------------------------------------------

def to_image(binary: RawBinary, fmt: str):
    if fmt == "gray":
        return imaging.to_grayscale(binary)
    if fmt == "hit":
        return imaging.to_hit_rgb(binary)
    raise ValueError(f"unknown image format {fmt!r}")


def model_input(binary: RawBinary, fmt: str) -> np.ndarray:
    """The (C, 64, 64) float array a CNN consumes."""
    return imaging.resample(to_image(binary, fmt))


def load_inputs(paths: Sequence[str], fmt: str, threads: int = 1) -> np.ndarray:
    """Stack model inputs for ``paths``; any unreadable file raises."""
    arrays = parallel_map(lambda p: model_input(load_binary(p), fmt), list(paths), threads)
    channels = 1 if fmt == "gray" else 3
    return np.stack(arrays) if arrays else np.zeros((0, channels, imaging.MODEL_SIDE, imaging.MODEL_SIDE))


def check_format(bundle: models.ModelBundle, fmt: Optional[str]) -> str:
    """Input format to use with ``bundle``; a conflicting request is a mismatch."""
    if fmt is not None and fmt != bundle.input_format:
        need = bundle.input_channels
        have = 1 if fmt == "gray" else 3
        raise ShapeMismatch(
            f"model expects {bundle.input_format} input ({need} channel(s)), got {fmt} ({have} channel(s))"
        )
    return bundle.input_format


# -- reports ----------------------------------------------------------------

def analysis_report(binary: RawBinary, path: str, scores: Optional[dict] = None,
                    model_id: Optional[str] = None, detail: bool = False) -> dict:
    """AnalysisReport dict; ``detail`` adds the histogram and windowed entropy profile."""
    hist = stats.byte_histogram(binary)
    padding = stats.detect_padding(binary)
    layout = parse_pe(binary)
    report = {
        "format_version": FORMAT_VERSION,
        "path": path,
        "size": len(binary),
        "pe": layout.to_dict() if layout is not None else None,
        "stats": {
            "entropy": stats.shannon_entropy(hist),
            "uniformity": stats.uniformity_score(hist),
            "padding": padding.to_dict() if padding is not None else None,
        },
    }
    if detail:
        profile = stats.sliding_entropy(binary)
        report["stats"]["histogram"] = hist.to_list()
        report["stats"]["entropy_profile"] = {
            "window_size": profile.window_size, "stride": profile.stride, "values": profile.to_list(),
        }
    if scores is not None:
        report["scores"] = scores
        if model_id is not None:
            report["model_id"] = model_id
    return report


def score_rows(bundle: models.ModelBundle, inputs: np.ndarray) -> List[dict]:
    """Per-sample ``{"malicious", "modified", "route"}`` dicts (missing outputs are None)."""
    raw = models.score(bundle, inputs)
    rows = []
    for i in range(len(inputs)):
        rows.append({
            "malicious": None if raw["malicious"] is None else float(raw["malicious"][i]),
            "modified": None if raw["modified"] is None else float(raw["modified"][i]),
            "route": None if raw["route"] is None else raw["route"][i],
        })
    return rows


# -- training ---------------------------------------------------------------

@dataclass
class TrainSettings:
    epochs: int = 30
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    target_loss: Optional[float] = None
    filters: Tuple[int, int, int] = (8, 16, 32)
    padding: str = "zero"
    forest: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainSettings":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValueError(f"unknown config key(s): {', '.join(unknown)}")
        settings = cls(**doc)
        settings.filters = tuple(settings.filters)
        settings.forest_config(0)  # validate early
        return settings

    def train_config(self, seed: int) -> nn.TrainConfig:
        return nn.TrainConfig(self.learning_rate, self.momentum, self.batch_size, self.epochs, seed, self.target_loss)

    def cnn_config(self, channels: int, heads: int, seed: int) -> nn.CnnConfig:
        return nn.CnnConfig(input_channels=channels, filters=self.filters, heads=heads, seed=seed,
                            padding=self.padding)

    def forest_config(self, seed: int) -> rf.ForestConfig:
        return rf.ForestConfig(**dict(self.forest, seed=seed))


def load_settings(path: Optional[str]) -> TrainSettings:
    if path is None:
        return TrainSettings()
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ValueError("config must be a JSON object")
    return TrainSettings.from_dict(doc)


@dataclass
class TrainResult:
    bundle: models.ModelBundle
    losses: Dict[str, List[float]]
    validation: Dict[str, dict]


def _labels(entries: Sequence[ManifestEntry]) -> Tuple[np.ndarray, np.ndarray]:
    mal = np.array([e.label_malicious for e in entries], dtype=np.float64)
    mod = np.array([e.label_modified for e in entries], dtype=np.float64)
    return mal, mod


def task_metrics(scores: Optional[np.ndarray], labels: np.ndarray) -> Optional[dict]:
    if scores is None or len(labels) == 0:
        return None
    cm = confusion(scores, labels)
    return dict(asdict(cm), **compute_metrics(cm).to_dict())


def evaluate_bundle(bundle: models.ModelBundle, inputs: np.ndarray, entries: Sequence[ManifestEntry]) -> dict:
    """Per-task confusion counts and metrics; tasks a model lacks are omitted."""
    mal, mod = _labels(entries)
    raw = models.score(bundle, inputs)
    out = {}
    for task, labels in (("malicious", mal), ("modified", mod)):
        m = task_metrics(raw[task], labels)
        if m is not None:
            out[task] = m
    return out


def train_bundle(
    manifest: DatasetManifest,
    arch: str,
    fmt: str = "gray",
    settings: Optional[TrainSettings] = None,
    seed: int = 0,
    threads: int = 1,
    on_epoch: Optional[Callable[[str, int, float], None]] = None,
    inputs: Optional[np.ndarray] = None,
) -> TrainResult:
    """Train ``arch`` on the manifest's train split and score its validation split.

    ``inputs`` may carry precomputed model inputs aligned with ``manifest.entries``.
    """
    settings = settings or TrainSettings()
    if arch not in models.ARCHS:
        raise ValueError(f"unknown arch {arch!r}")
    if inputs is None:
        inputs = load_inputs([manifest.resolve(e) for e in manifest.entries], fmt, threads)
    split = np.array([e.split for e in manifest.entries])
    train_idx = np.flatnonzero(split == "train")
    if len(train_idx) == 0:
        raise TooFewSamples("manifest has no train entries")
    x = inputs[train_idx]
    mal, mod = _labels([manifest.entries[i] for i in train_idx])
    channels = 1 if fmt == "gray" else 3
    losses: Dict[str, List[float]] = {}

    def run(name: str, heads: int, xs, ys, block_seed: int) -> nn.CnnModel:
        if len(xs) == 0:
            raise TooFewSamples(f"no training samples for the {name} block")
        for col in np.asarray(ys).reshape(len(ys), -1).T:
            if len(np.unique(col)) < 2:
                raise SingleClassInput(f"the {name} block's training labels hold a single class")
        model = nn.init_model(settings.cnn_config(channels, heads, block_seed))
        cb = None if on_epoch is None else (lambda ep, loss: on_epoch(name, ep, loss))
        model, hist = nn.fit(model, xs, ys, settings.train_config(block_seed), on_epoch=cb)
        losses[name] = hist
        return model

    forest = None
    if arch == "single":
        cnns = {"detector": run("detector", 1, x, mal, seed)}
    elif arch == "dual":
        cnns = {"dual": run("dual", 2, x, np.stack([mal, mod], axis=1), seed)}
    elif arch == "gate":
        cnns = {"gate": run("gate", 1, x, mod, seed)}
    elif arch == "stacked":
        is_mod = mod == 1
        cnns = {
            "gate": run("gate", 1, x, mod, seed),
            "modified": run("modified", 1, x[is_mod], mal[is_mod], seed + 1),
            "clean": run("clean", 1, x[~is_mod], mal[~is_mod], seed + 2),
        }
    else:  # hybrid-rf: CNN frozen after fit, forest on its embeddings
        embedder = run("embedder", 1, x, mal, seed)
        forest = rf.fit_forest(nn.embed(embedder, x), mal.astype(int), settings.forest_config(seed))
        cnns = {"embedder": embedder}

    bundle = models.ModelBundle(
        arch=arch, input_format=fmt, cnns=cnns, forest=forest,
        metadata={"seed": seed, "settings": _jsonable(asdict(settings)), "train_size": int(len(train_idx))},
    )
    val_idx = np.flatnonzero(split == "validation")
    validation = {}
    if len(val_idx):
        validation = evaluate_bundle(bundle, inputs[val_idx], [manifest.entries[i] for i in val_idx])
    else:
        log.warning("manifest has no validation entries; skipping validation metrics")
    return TrainResult(bundle, losses, validation)


def _jsonable(doc):
    return json.loads(json.dumps(doc))


# -- explanation ------------------------------------------------------------

@dataclass
class Explanation:
    report: attention.AnnotatedReport
    gray: imaging.GrayImage
    heatmap64: attention.Heatmap
    head: str
    block: str


def explain(bundle: models.ModelBundle, binary: RawBinary, head: str = "malicious") -> Explanation:
    """GradCAM++ for one file, projected onto its grayscale image and annotated."""
    x = model_input(binary, bundle.input_format)
    cnn, head_idx = bundle.explainer(head)
    block = head
    if cnn is None:  # stacked malicious verdict: explain the specialist the gate routes to
        route = score_rows(bundle, x[None])[0]["route"]
        cnn, head_idx, block = bundle.cnns[route], 0, route
    else:
        block = next(name for name, m in bundle.cnns.items() if m is cnn)
    if not 0 <= head_idx < cnn.config.heads:
        raise HeadCountMismatch(f"{block} block has {cnn.config.heads} head(s)")
    hm64 = attention.gradcam_pp(cnn, x, head_idx)
    gray = imaging.to_grayscale(binary)
    hm = attention.upsample_to_file_geometry(hm64, gray.width, gray.height)
    scores = score_rows(bundle, x[None])[0]
    report = attention.annotate(hm, parse_pe(binary), stats.detect_padding(binary), scores, len(binary))
    return Explanation(report, gray, hm64, head, block)

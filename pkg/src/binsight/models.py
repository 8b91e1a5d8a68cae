"""Model container: one JSON file holding the CNN(s) and optional forest of an architecture."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from . import forest as rf
from . import nn
from .errors import FormatVersionError, HeadCountMismatch

FORMAT_VERSION = 1
KIND = "binsight-model"
ARCHS = ("single", "dual", "gate", "stacked", "hybrid-rf")
INPUT_FORMATS = ("gray", "hit")

# CNN blocks each architecture must carry
REQUIRED_CNNS = {
    "single": ("detector",),
    "dual": ("dual",),
    "gate": ("gate",),
    "stacked": ("gate", "modified", "clean"),
    "hybrid-rf": ("embedder",),
}


@dataclass
class ModelBundle:
    arch: str
    input_format: str
    cnns: Dict[str, nn.CnnModel]
    forest: Optional[rf.Forest] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.input_format not in INPUT_FORMATS:
            raise ValueError(f"unknown input format {self.input_format!r}")
        missing = [k for k in REQUIRED_CNNS[self.arch] if k not in self.cnns]
        if missing:
            raise ValueError(f"{self.arch} bundle is missing CNN block(s) {missing}")
        if self.arch == "hybrid-rf" and self.forest is None:
            raise ValueError("hybrid-rf bundle needs a forest")

    @property
    def input_channels(self) -> int:
        return 1 if self.input_format == "gray" else 3

    @property
    def has_modified_output(self) -> bool:
        return self.arch in ("dual", "gate", "stacked")

    @property
    def has_malicious_output(self) -> bool:
        return self.arch != "gate"

    def explainer(self, head: str):
        """The CNN and head index GradCAM++ should run on for ``head``."""
        if head == "malicious":
            if self.arch == "gate":
                raise HeadCountMismatch("a gate model has no malicious head")
            name = {"single": "detector", "dual": "dual", "hybrid-rf": "embedder", "stacked": None}[self.arch]
            return (None, 0) if name is None else (self.cnns[name], 0)
        if head == "modified":
            if self.arch == "dual":
                return self.cnns["dual"], 1
            if self.arch in ("gate", "stacked"):
                return self.cnns["gate"], 0
            raise HeadCountMismatch(f"a {self.arch} model has no modified head")
        raise ValueError(f"unknown head {head!r}")


def score(bundle: ModelBundle, inputs: np.ndarray) -> dict:
    """Batch scores: ``malicious``/``modified`` arrays (or None) and ``route`` list (or None)."""
    x = np.asarray(inputs, dtype=np.float64)
    out = {"malicious": None, "modified": None, "route": None}
    arch = bundle.arch
    if arch == "single":
        out["malicious"] = nn.predict(bundle.cnns["detector"], x)[:, 0]
    elif arch == "dual":
        s = nn.predict(bundle.cnns["dual"], x)
        out["malicious"], out["modified"] = s[:, 0], s[:, 1]
    elif arch == "gate":
        out["modified"] = nn.predict(bundle.cnns["gate"], x)[:, 0]
    elif arch == "stacked":
        gate = nn.predict(bundle.cnns["gate"], x)[:, 0]
        routed = gate >= 0.5
        mal = np.empty(len(x))
        if routed.any():
            mal[routed] = nn.predict(bundle.cnns["modified"], x[routed])[:, 0]
        if (~routed).any():
            mal[~routed] = nn.predict(bundle.cnns["clean"], x[~routed])[:, 0]
        out["malicious"], out["modified"] = mal, gate
        out["route"] = ["modified" if r else "clean" for r in routed]
    elif arch == "hybrid-rf":
        emb = nn.embed(bundle.cnns["embedder"], x)
        out["malicious"] = np.atleast_1d(rf.predict_forest(bundle.forest, emb))
    return out


def bundle_to_dict(bundle: ModelBundle) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": KIND,
        "arch": bundle.arch,
        "input_format": bundle.input_format,
        "models": {name: nn.model_to_dict(m) for name, m in bundle.cnns.items()},
        "forest": rf.forest_to_dict(bundle.forest) if bundle.forest is not None else None,
        "metadata": bundle.metadata,
    }


def bundle_from_dict(doc: dict) -> ModelBundle:
    if doc.get("kind") != KIND or doc.get("format_version") != FORMAT_VERSION:
        raise FormatVersionError(
            f"not a binsight model v{FORMAT_VERSION} (kind={doc.get('kind')!r}, "
            f"format_version={doc.get('format_version')!r})"
        )
    bundle = ModelBundle(
        arch=doc["arch"],
        input_format=doc["input_format"],
        cnns={name: nn.model_from_dict(m) for name, m in doc["models"].items()},
        forest=rf.forest_from_dict(doc["forest"]) if doc.get("forest") else None,
        metadata=doc.get("metadata") or {},
    )
    for m in bundle.cnns.values():
        if m.config.input_channels != bundle.input_channels:
            raise FormatVersionError("CNN input channels disagree with the bundle input format")
    return bundle


def save_bundle(bundle: ModelBundle, path) -> str:
    """Write the bundle as JSON and return its content id (sha256 prefix)."""
    text = json.dumps(bundle_to_dict(bundle), sort_keys=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def load_bundle(path):
    """Returns ``(bundle, model_id)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        doc = json.loads(raw)
    except ValueError as exc:
        raise FormatVersionError(f"model file is not JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise FormatVersionError("model file must hold a JSON object")
    return bundle_from_dict(doc), hashlib.sha256(raw).hexdigest()[:16]

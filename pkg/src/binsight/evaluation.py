"""Confusion-matrix metrics, stratified splitting and manifest I/O."""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ManifestError, TooFewSamples

SPLITS = ("train", "test", "validation")
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)
MANIFEST_HEADER = ("path", "label_malicious", "label_modified", "split")


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "precision": self.precision, "recall": self.recall, "f1": self.f1}


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def compute_metrics(cm: ConfusionMatrix) -> Metrics:
    """Accuracy, precision, recall and F1; an empty denominator yields 0."""
    if cm.total < 1:
        raise ValueError("confusion matrix is empty")
    precision = _ratio(cm.tp, cm.tp + cm.fp)
    recall = _ratio(cm.tp, cm.tp + cm.fn)
    return Metrics(
        accuracy=(cm.tp + cm.tn) / cm.total,
        precision=precision,
        recall=recall,
        f1=_ratio(2 * precision * recall, precision + recall),
    )


def confusion(scores, labels, threshold: float = 0.5) -> ConfusionMatrix:
    """Tally predictions; a score >= threshold counts as positive."""
    pred = np.asarray(scores, dtype=np.float64) >= threshold
    y = np.asarray(labels).astype(bool)
    return ConfusionMatrix(
        tp=int(np.sum(pred & y)),
        fp=int(np.sum(pred & ~y)),
        tn=int(np.sum(~pred & ~y)),
        fn=int(np.sum(~pred & y)),
    )


def evaluate(predictor: Callable, inputs, labels, threshold: float = 0.5) -> Tuple[ConfusionMatrix, Metrics]:
    """Score ``inputs`` with ``predictor`` (batch -> scores) and tally against ``labels``."""
    if len(labels) == 0:
        raise ValueError("evaluation set is empty")
    scores = np.asarray(predictor(inputs), dtype=np.float64).reshape(-1)
    cm = confusion(scores, labels, threshold)
    return cm, compute_metrics(cm)


# -- manifest -----------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label_malicious: int
    label_modified: int
    split: Optional[str] = None

    @property
    def stratum(self) -> Tuple[int, int]:
        return (self.label_malicious, self.label_modified)


@dataclass
class DatasetManifest:
    entries: List[ManifestEntry]
    root: Optional[str] = None  # directory relative paths are resolved against

    def resolve(self, entry: ManifestEntry) -> str:
        if self.root is None or os.path.isabs(entry.path):
            return entry.path
        return os.path.join(self.root, entry.path)

    def subset(self, split: str) -> List[ManifestEntry]:
        return [e for e in self.entries if e.split == split]


def _parse_label(value: str, column: str, line: int) -> int:
    if value not in ("0", "1"):
        raise ManifestError(f"{column} must be 0 or 1, got {value!r}", line)
    return int(value)


def parse_manifest(text: str, root: Optional[str] = None) -> DatasetManifest:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(c.strip() for c in rows[0]) != MANIFEST_HEADER:
        raise ManifestError(f"header must be {','.join(MANIFEST_HEADER)}", 1)
    entries = []
    seen = set()
    for line, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(MANIFEST_HEADER):
            raise ManifestError(f"expected {len(MANIFEST_HEADER)} fields, got {len(row)}", line)
        path, mal, mod, split = (c.strip() for c in row)
        if not path:
            raise ManifestError("empty path", line)
        if path in seen:
            raise ManifestError(f"duplicate path {path!r}", line)
        seen.add(path)
        if split and split not in SPLITS:
            raise ManifestError(f"unknown split {split!r}", line)
        entries.append(ManifestEntry(
            path,
            _parse_label(mal, "label_malicious", line),
            _parse_label(mod, "label_modified", line),
            split or None,
        ))
    return DatasetManifest(entries, root)


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    return parse_manifest(text, root=os.fspath(path.parent))


def format_manifest(manifest: DatasetManifest) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    for e in manifest.entries:
        writer.writerow([e.path, e.label_malicious, e.label_modified, e.split or ""])
    return buf.getvalue()


def write_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(format_manifest(manifest))


# -- splitting ----------------------------------------------------------------

def largest_remainder(total: int, fractions: Sequence[float]) -> List[int]:
    """Integer shares of ``total`` proportional to ``fractions`` (ties go to earlier entries)."""
    exact = [total * f for f in fractions]
    counts = [math.floor(x) for x in exact]
    order = sorted(range(len(exact)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


def _allocate(strata_sizes: Sequence[int], fractions: Sequence[float]) -> np.ndarray:
    """Stratum x split counts: each cell is floor or ceil of its exact share,
    rows sum to the stratum sizes and columns to the global largest-remainder totals.
    """
    sizes = np.asarray(strata_sizes)
    exact = np.outer(sizes, fractions)
    alloc = np.floor(exact).astype(int)
    frac = exact - alloc
    row_need = sizes - alloc.sum(axis=1)
    col_need = np.asarray(largest_remainder(int(sizes.sum()), fractions)) - alloc.sum(axis=0)
    # pick cells to bump by one: bipartite b-matching, largest remainders first,
    # repaired with augmenting paths when the greedy pass gets stuck
    bump = np.zeros_like(alloc, dtype=bool)
    cells = sorted(np.ndindex(*alloc.shape), key=lambda rc: (-frac[rc], rc))
    for r, c in cells:
        if row_need[r] > 0 and col_need[c] > 0:
            bump[r, c] = True
            row_need[r] -= 1
            col_need[c] -= 1
    while row_need.sum() > 0:
        if not _augment(bump, row_need, col_need):
            raise RuntimeError("split allocation is infeasible")
    return alloc + bump


def _augment(bump, row_need, col_need) -> bool:
    """Find an alternating path from a row with spare need to a column with spare need."""
    n_rows, n_cols = bump.shape
    start_rows = [r for r in range(n_rows) if row_need[r] > 0]
    parent = {}
    frontier = [("r", r) for r in start_rows]
    seen = set(frontier)
    while frontier:
        nxt = []
        for kind, i in frontier:
            if kind == "r":
                for c in range(n_cols):
                    node = ("c", c)
                    if not bump[i, c] and node not in seen:
                        seen.add(node)
                        parent[node] = (kind, i)
                        if col_need[c] > 0:
                            _flip(bump, parent, node)
                            row_need[_root(parent, node)[1]] -= 1
                            col_need[c] -= 1
                            return True
                        nxt.append(node)
            else:
                for r in range(n_rows):
                    node = ("r", r)
                    if bump[r, i] and node not in seen:
                        seen.add(node)
                        parent[node] = (kind, i)
                        nxt.append(node)
        frontier = nxt
    return False


def _root(parent, node):
    while node in parent:
        node = parent[node]
    return node


def _flip(bump, parent, node):
    while node in parent:
        prev = parent[node]
        if node[0] == "c":
            bump[prev[1], node[1]] = True
        else:
            bump[node[1], prev[1]] = False
        node = prev


def split_dataset(manifest: DatasetManifest, seed: int, fractions=SPLIT_FRACTIONS) -> DatasetManifest:
    """Assign train/test/validation, stratified by (malicious, modified).

    Totals follow largest-remainder rounding of 80/10/10 and every stratum
    stays within one sample of its exact share. Deterministic per seed.
    """
    entries = manifest.entries
    if len(entries) < 10:
        raise TooFewSamples(f"need at least 10 entries to split, got {len(entries)}")
    strata: Dict[Tuple[int, int], List[int]] = {}
    for i, e in enumerate(entries):
        strata.setdefault(e.stratum, []).append(i)
    keys = sorted(strata)
    alloc = _allocate([len(strata[k]) for k in keys], fractions)
    rng = np.random.default_rng(seed)
    assigned: List[Optional[str]] = [None] * len(entries)
    for k, counts in zip(keys, alloc):
        idx = np.asarray(strata[k])[rng.permutation(len(strata[k]))]
        bounds = np.cumsum(counts)
        for name, lo, hi in zip(SPLITS, np.concatenate([[0], bounds[:-1]]), bounds):
            for i in idx[lo:hi]:
                assigned[i] = name
    return DatasetManifest([replace(e, split=s) for e, s in zip(entries, assigned)], manifest.root)

from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from binsight.errors import ManifestError, TooFewSamples
from binsight.evaluation import (
    ConfusionMatrix,
    DatasetManifest,
    ManifestEntry,
    compute_metrics,
    confusion,
    evaluate,
    format_manifest,
    largest_remainder,
    parse_manifest,
    read_manifest,
    split_dataset,
    write_manifest,
)
from oracles import metrics_oracle

HEADER = "path,label_malicious,label_modified,split\n"


def test_metrics_examples():
    m = compute_metrics(ConfusionMatrix(tp=8, fp=2, tn=5, fn=5))
    assert m.accuracy == pytest.approx(13 / 20)
    assert m.precision == pytest.approx(0.8) and m.recall == pytest.approx(8 / 13)
    assert m.f1 == pytest.approx(2 * 0.8 * (8 / 13) / (0.8 + 8 / 13))
    zero = compute_metrics(ConfusionMatrix(tp=0, fp=0, tn=4, fn=0))
    assert (zero.precision, zero.recall, zero.f1, zero.accuracy) == (0.0, 0.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        compute_metrics(ConfusionMatrix())


@pytest.mark.parametrize("cm", [(3, 1, 4, 2), (0, 5, 5, 0), (7, 0, 0, 0), (0, 0, 0, 9), (1, 1, 1, 1)])
def test_metrics_match_oracle(cm):
    got = compute_metrics(ConfusionMatrix(*cm))
    assert (got.accuracy, got.precision, got.recall, got.f1) == pytest.approx(metrics_oracle(*cm), abs=1e-12)


def test_confusion_threshold_rule():
    labels = [0, 1, 0, 1]
    cm = confusion([0.5] * 4, labels)
    assert cm == ConfusionMatrix(tp=2, fp=2, tn=0, fn=0)
    cm, m = evaluate(lambda x: np.asarray(x, dtype=float), labels, labels)
    assert cm == ConfusionMatrix(tp=2, fp=0, tn=2, fn=0) and m.f1 == 1.0
    with pytest.raises(ValueError):
        evaluate(lambda x: x, [], [])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=1, max_size=60),
       st.floats(0, 1), st.floats(0, 1))
def test_threshold_monotone_and_f1_bounds(pairs, t1, t2):
    scores, labels = zip(*pairs)
    lo, hi = sorted((t1, t2))
    assert confusion(scores, labels, hi).fp <= confusion(scores, labels, lo).fp
    m = compute_metrics(confusion(scores, labels, lo))
    if m.precision > 0 and m.recall > 0:
        assert min(m.precision, m.recall) - 1e-12 <= m.f1 <= max(m.precision, m.recall) + 1e-12


# -- manifest ---------------------------------------------------------------

def test_manifest_round_trip(tmp_path):
    text = HEADER + "a.exe,1,0,train\nsub/b.exe,0,1,\n"
    m = parse_manifest(text, root=str(tmp_path))
    assert m.entries == [ManifestEntry("a.exe", 1, 0, "train"), ManifestEntry("sub/b.exe", 0, 1, None)]
    assert m.resolve(m.entries[1]) == str(tmp_path / "sub/b.exe")
    assert format_manifest(m) == text
    write_manifest(m, tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_bytes() == text.encode()
    again = read_manifest(tmp_path / "m.csv")
    assert again.entries == m.entries and again.root == str(tmp_path)


@pytest.mark.parametrize("body, line", [
    ("a,1,0,train\nb,2,0,train\n", 3),
    ("a,1,0,train\nb,1,0\n", 3),
    ("a,1,0,train\na,0,0,test\n", 3),
    ("a,1,0,holdout\n", 2),
    (",1,0,train\n", 2),
])
def test_manifest_errors_name_line(body, line):
    with pytest.raises(ManifestError) as info:
        parse_manifest(HEADER + body)
    assert info.value.line == line and str(info.value).startswith(f"line {line}:")


def test_manifest_header_and_io_errors(tmp_path):
    with pytest.raises(ManifestError):
        parse_manifest("path,label\n")
    with pytest.raises(ManifestError):
        read_manifest(tmp_path / "missing.csv")


# -- split ------------------------------------------------------------------

def manifest_of(counts):
    entries = []
    for (mal, mod), n in counts.items():
        entries += [ManifestEntry(f"{mal}{mod}-{i}", mal, mod) for i in range(n)]
    return DatasetManifest(entries)


def test_largest_remainder():
    assert largest_remainder(10, (0.8, 0.1, 0.1)) == [8, 1, 1]
    assert largest_remainder(13, (0.8, 0.1, 0.1)) == [11, 1, 1]
    assert largest_remainder(15, (0.8, 0.1, 0.1)) == [12, 2, 1]
    assert sum(largest_remainder(999, (0.8, 0.1, 0.1))) == 999


def test_split_ten_entries():
    out = split_dataset(manifest_of({(0, 0): 3, (1, 0): 3, (0, 1): 2, (1, 1): 2}), seed=1)
    assert Counter(e.split for e in out.entries) == {"train": 8, "test": 1, "validation": 1}
    with pytest.raises(TooFewSamples):
        split_dataset(manifest_of({(0, 0): 9}), seed=1)


@settings(max_examples=150, deadline=None)
@given(st.lists(st.integers(0, 60), min_size=4, max_size=4).filter(lambda c: sum(c) >= 10),
       st.integers(0, 2**32 - 1))
def test_split_properties(counts, seed):
    keys = [(0, 0), (0, 1), (1, 0), (1, 1)]
    m = manifest_of(dict(zip(keys, counts)))
    out = split_dataset(m, seed)
    assert [e.path for e in out.entries] == [e.path for e in m.entries]
    assert all(e.split in ("train", "test", "validation") for e in out.entries)
    totals = Counter(e.split for e in out.entries)
    want = largest_remainder(len(m.entries), (0.8, 0.1, 0.1))
    assert [totals[s] for s in ("train", "test", "validation")] == want
    for key, n in zip(keys, counts):
        got = Counter(e.split for e in out.entries if e.stratum == key)
        for name, frac in (("train", 0.8), ("test", 0.1), ("validation", 0.1)):
            assert abs(got[name] - n * frac) < 1 + 1e-9
    assert split_dataset(m, seed).entries == out.entries

import json

import numpy as np
import pefile
import pytest

from binsight import corpus
from binsight.binary import RawBinary, load_binary, parse_pe
from binsight.evaluation import read_manifest
from binsight.stats import byte_histogram, detect_padding, uniformity_score


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    manifest, samples = corpus.generate_synthetic_corpus(out, seed=11, n_per_class=12, padding_fraction=0.5)
    return out, manifest, samples


def uniformity(path):
    return uniformity_score(byte_histogram(load_binary(path)))


def test_build_pe_is_valid_for_pefile():
    data = corpus.build_pe([(".text", b"\x90" * 700), (".rdata", b"abc" * 50), (".data", b"\x01" * 33)],
                           overlay=b"\x00" * 100)
    pe = pefile.PE(data=data)
    assert pe.FILE_HEADER.NumberOfSections == 3
    assert [(s.PointerToRawData, s.SizeOfRawData) for s in pe.sections] == [(512, 700), (1212, 150), (1362, 33)]
    assert pe.get_overlay_data_start_offset() == 1395
    layout = parse_pe(RawBinary(data))
    assert [s.name for s in layout.sections] == [".text", ".rdata", ".data"]
    with pytest.raises(ValueError):
        corpus.build_pe([(".s", b"x")] * 6)


def test_motif_is_bright_and_fixed():
    assert len(corpus.MOTIF) == 256
    assert min(corpus.MOTIF) >= 0xF0
    assert corpus.MOTIF == bytes(np.random.default_rng(0x5EED).integers(0xF0, 0x100, 256, dtype=np.uint8))


def test_clean_payload_never_contains_motif_bytes():
    payload = corpus.clean_payload(np.random.default_rng(0), 50_000)
    assert max(payload) < 0xF0


def test_strata_and_labels(small_corpus):
    out, manifest, samples = small_corpus
    assert len(manifest.entries) == 48
    for e, s in zip(manifest.entries, samples):
        assert e.path == s.path and (e.label_malicious, e.label_modified) == (s.label_malicious, s.label_modified)
        data = load_binary(out / s.path).data
        assert 4096 <= s.size <= 65536 and len(data) == s.size + s.padding_length
        assert parse_pe(RawBinary(data)) is not None
        if s.label_malicious:
            assert data[s.motif_offset:s.motif_offset + 256] == corpus.MOTIF
        else:
            assert s.motif_offset is None and corpus.MOTIF not in data
        u = uniformity(out / s.path) if not s.padding_length else None
        if u is not None:
            assert (u > 0.9) if s.label_modified else (u < 0.7)


def test_padding_subset(small_corpus):
    out, _, samples = small_corpus
    padded = [s for s in samples if s.padding_length]
    assert 0 < len(padded) < len(samples)
    for s in padded:
        region = detect_padding(load_binary(out / s.path))
        assert region is not None and region.fill_byte == 0
        # the trailing run may swallow zero bytes that happen to end the payload
        assert region.start_offset <= s.padding_offset
        assert region.start_offset + region.length == s.size + s.padding_length


def test_manifest_and_metadata_written(small_corpus):
    out, manifest, _ = small_corpus
    on_disk = read_manifest(out / "manifest.csv")
    assert on_disk.entries == manifest.entries
    meta = json.loads((out / "corpus.json").read_text())
    assert meta["seed"] == 11 and len(meta["samples"]) == 48


def test_same_seed_same_bytes(tmp_path):
    a = corpus.generate_synthetic_corpus(tmp_path / "a", seed=3, n_per_class=10)
    b = corpus.generate_synthetic_corpus(tmp_path / "b", seed=3, n_per_class=10)
    for sa, sb in zip(a[1], b[1]):
        assert (tmp_path / "a" / sa.path).read_bytes() == (tmp_path / "b" / sb.path).read_bytes()
    assert (tmp_path / "a" / "manifest.csv").read_bytes() == (tmp_path / "b" / "manifest.csv").read_bytes()


def test_rejects_tiny_corpus(tmp_path):
    with pytest.raises(ValueError):
        corpus.generate_synthetic_corpus(tmp_path, seed=0, n_per_class=9)

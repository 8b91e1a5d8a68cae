import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from binsight import nn
from binsight.binary import RawBinary

DATA = Path(__file__).parent / "data"
DESK_SEED = 7

# criterion -> [(passed, detail)], filled in by test_acceptance.py; one summary line each
ACCEPTANCE_PARTS = {}


def record(criterion: int, passed: bool, detail: str):
    ACCEPTANCE_PARTS.setdefault(criterion, []).append((bool(passed), detail))


def acceptance_lines():
    lines = []
    for key in sorted(ACCEPTANCE_PARTS):
        parts = ACCEPTANCE_PARTS[key]
        ok = all(p for p, _ in parts)
        lines.append(f"criterion {key:2d}: {'PASS' if ok else 'FAIL'}  " + "; ".join(d for _, d in parts))
    return lines


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_PARTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in acceptance_lines():
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def data_dir():
    return DATA


@pytest.fixture(scope="session")
def minimal_pe():
    """1280-byte PE32: .text at 512 (512 bytes), .data at 1024 (256 bytes)."""
    return RawBinary((DATA / "minimal.exe").read_bytes(), str(DATA / "minimal.exe"))


@pytest.fixture(scope="session")
def fixture_pe():
    """11620-byte PE32 with .text/.rdata/.data and a 4608-byte zero overlay."""
    return RawBinary((DATA / "fixture.exe").read_bytes(), str(DATA / "fixture.exe"))


@pytest.fixture(scope="session")
def fixture_layout():
    """Section table as dumped by pefile when the fixture was frozen."""
    return json.loads((DATA / "fixture_layout.json").read_text())


@pytest.fixture
def small_model():
    return nn.init_model(nn.CnnConfig(seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """12 files per stratum, a quarter of them padded."""
    from binsight import corpus

    out = tmp_path_factory.mktemp("tiny")
    manifest, samples = corpus.generate_synthetic_corpus(out, seed=5, n_per_class=12, padding_fraction=0.25)
    return out, manifest, samples


@pytest.fixture(scope="session")
def tiny_bundles(tiny_corpus, tmp_path_factory):
    """Two-epoch models of every arch on the tiny corpus, saved as JSON; name -> (path, bundle)."""
    from binsight import models, pipeline

    _, manifest, _ = tiny_corpus
    out = tmp_path_factory.mktemp("models")
    settings = pipeline.TrainSettings(epochs=2, forest={"n_trees": 5})
    inputs = pipeline.load_inputs([manifest.resolve(e) for e in manifest.entries], "gray")
    bundles = {}
    for arch in ("single", "dual", "gate", "stacked", "hybrid-rf"):
        result = pipeline.train_bundle(manifest, arch, "gray", settings, seed=1, inputs=inputs)
        path = out / f"{arch}.json"
        models.save_bundle(result.bundle, path)
        bundles[arch] = (path, result)
    return bundles


@dataclass
class Desk:
    """The seed-7 synthetic corpus with models trained on it once per session."""
    root: Path
    manifest: object
    samples: list
    inputs: np.ndarray
    bundles: dict
    paths: dict
    train_seconds: float
    train_stdout: dict

    def indices(self, split):
        return [i for i, e in enumerate(self.manifest.entries) if e.split == split]

    def test_metrics(self, arch):
        from binsight import pipeline

        idx = self.indices("test")
        return pipeline.evaluate_bundle(self.bundles[arch], self.inputs[idx], [self.manifest.entries[i] for i in idx])


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    import contextlib
    import io
    import json
    import time

    from binsight import cli, corpus, forest, models, nn, pipeline

    root = tmp_path_factory.mktemp("desk")
    manifest, samples = corpus.generate_synthetic_corpus(root / "corpus", seed=DESK_SEED, n_per_class=250)
    inputs = pipeline.load_inputs([manifest.resolve(e) for e in manifest.entries], "gray")
    settings = pipeline.TrainSettings()
    paths = {arch: root / f"{arch}.json" for arch in ("single", "dual", "gate", "stacked", "hybrid-rf")}

    # single-head through the CLI, timed end to end
    buf = io.StringIO()
    t0 = time.perf_counter()
    with contextlib.redirect_stdout(buf), contextlib.redirect_stderr(io.StringIO()):
        code = cli.main(["train", "--manifest", str(root / "corpus" / "manifest.csv"), "--arch", "single",
                         "--seed", str(DESK_SEED), "--out", str(paths["single"])])
    train_seconds = time.perf_counter() - t0
    assert code == 0
    bundles = {"single": models.load_bundle(paths["single"])[0]}

    bundles["dual"] = pipeline.train_bundle(manifest, "dual", "gray", settings, DESK_SEED, inputs=inputs).bundle
    bundles["stacked"] = pipeline.train_bundle(manifest, "stacked", "gray", settings, DESK_SEED, inputs=inputs).bundle
    # gate arch trains exactly the stacked gate block (same seed and data), so reuse it
    bundles["gate"] = models.ModelBundle("gate", "gray", {"gate": bundles["stacked"].cnns["gate"]})
    # hybrid-rf freezes the single-arch CNN (same seed and data) and fits the forest on its embeddings
    detector = bundles["single"].cnns["detector"]
    train = [i for i, e in enumerate(manifest.entries) if e.split == "train"]
    labels = np.array([manifest.entries[i].label_malicious for i in train])
    bundles["hybrid-rf"] = models.ModelBundle(
        "hybrid-rf", "gray", {"embedder": detector},
        forest.fit_forest(nn.embed(detector, inputs[train]), labels, settings.forest_config(DESK_SEED)),
    )
    for arch in ("dual", "gate", "stacked", "hybrid-rf"):
        models.save_bundle(bundles[arch], paths[arch])
    return Desk(root / "corpus", manifest, samples, inputs, bundles, paths, train_seconds,
                {"single": json.loads(buf.getvalue())})

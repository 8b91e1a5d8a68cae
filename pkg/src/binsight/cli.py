"""``binsight`` command-line entry point.

Exit codes: 0 success, 2 no usable input, 3 training failure,
4 manifest error, 5 model/input mismatch.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import __version__, corpus, imaging, models, pipeline, plotting, stats
from .binary import load_binary, parse_pe
from .errors import (
    BinsightError,
    DivergenceDetected,
    FormatVersionError,
    HeadCountMismatch,
    ManifestError,
    ShapeMismatch,
    SingleClassInput,
    TooFewSamples,
)
from .evaluation import SPLITS, read_manifest

log = logging.getLogger("binsight")

EXIT_OK = 0
EXIT_NO_INPUT = 2
EXIT_TRAIN = 3
EXIT_MANIFEST = 4
EXIT_MISMATCH = 5


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _expand(inputs: Sequence[str]) -> List[str]:
    """Files as given; directories contribute their regular files, sorted, recursively."""
    out = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            out.extend(str(f) for f in sorted(p.rglob("*")) if f.is_file())
        else:
            out.append(item)
    return out


def _read_all(paths: Sequence[str], threads: int):
    """Load files on the pool; unreadable ones are logged and dropped."""
    def load(path):
        try:
            return load_binary(path)
        except (OSError, BinsightError) as exc:
            log.warning("skipping %s: %s", path, exc)
            return None
    loaded = pipeline.parallel_map(load, list(paths), threads)
    return [(p, b) for p, b in zip(paths, loaded) if b is not None]


def _emit_lines(docs, out: Optional[str]):
    text = "".join(json.dumps(d, sort_keys=True) + "\n" for d in docs)
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _emit_json(doc, out: Optional[str]):
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _load_model(path: str):
    try:
        return models.load_bundle(path)
    except FileNotFoundError as exc:
        raise CliError(f"model not found: {path}", EXIT_NO_INPUT) from exc
    except (FormatVersionError, KeyError, ValueError) as exc:
        raise CliError(f"cannot load model {path}: {exc}", EXIT_MISMATCH) from exc


def _load_manifest(path: str):
    try:
        return read_manifest(path)
    except ManifestError as exc:
        raise CliError(f"manifest {path}: {exc}", EXIT_MANIFEST) from exc


def _manifest_inputs(manifest, fmt: str, threads: int, indices=None) -> np.ndarray:
    """Model inputs for manifest rows; a missing or empty file is a manifest error."""
    indices = range(len(manifest.entries)) if indices is None else indices

    def one(i):
        try:
            return pipeline.model_input(load_binary(manifest.resolve(manifest.entries[i])), fmt)
        except (OSError, BinsightError) as exc:
            raise ManifestError(str(exc), i + 2) from exc
    try:
        arrays = pipeline.parallel_map(one, list(indices), threads)
    except ManifestError as exc:
        raise CliError(f"manifest: {exc}", EXIT_MANIFEST) from exc
    if not arrays:
        raise CliError("manifest selects no entries", EXIT_NO_INPUT)
    return np.stack(arrays)


# -- subcommands ------------------------------------------------------------

def cmd_transform(args) -> int:
    paths = _expand(args.inputs)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ext = ".pgm" if args.format == "gray" else ".ppm"

    def convert(path):
        try:
            img = pipeline.to_image(load_binary(path), args.format)
        except (OSError, BinsightError) as exc:
            log.warning("skipping %s: %s", path, exc)
            return None
        return imaging.export_image(img, out_dir / (Path(path).name + ext))
    written = [p for p in pipeline.parallel_map(convert, paths, args.threads) if p]
    if not written:
        raise CliError("no input could be transformed", EXIT_NO_INPUT)
    for p in written:
        print(p)
    return EXIT_OK


def cmd_stats(args) -> int:
    loaded = _read_all(_expand(args.inputs), args.threads)
    if not loaded:
        raise CliError("no readable input", EXIT_NO_INPUT)
    reports = pipeline.parallel_map(lambda pb: pipeline.analysis_report(pb[1], pb[0], detail=True),
                                    loaded, args.threads)
    _emit_lines(reports, args.out)
    if args.figures:
        fig_dir = Path(args.figures)
        fig_dir.mkdir(parents=True, exist_ok=True)
        for path, binary in loaded:
            plotting.stats_figure(
                stats.byte_histogram(binary), stats.sliding_entropy(binary), parse_pe(binary),
                stats.detect_padding(binary), fig_dir / (Path(path).name + ".stats.png"), title=path,
            )
    return EXIT_OK


def cmd_generate(args) -> int:
    manifest, _ = corpus.generate_synthetic_corpus(
        args.out_dir, args.seed, args.per_class, padding_fraction=args.padding,
    )
    log.info("wrote %d files to %s", len(manifest.entries), args.out_dir)
    print(os.path.join(args.out_dir, "manifest.csv"))
    return EXIT_OK


def cmd_train(args) -> int:
    manifest = _load_manifest(args.manifest)
    try:
        settings = pipeline.load_settings(args.config)
    except (OSError, ValueError, TypeError) as exc:
        raise CliError(f"bad config: {exc}", EXIT_NO_INPUT) from exc
    inputs = _manifest_inputs(manifest, args.format, args.threads)

    def on_epoch(block, epoch, loss):
        print(f"{block} epoch {epoch}/{settings.epochs} loss {loss:.6f}", file=sys.stderr)
    try:
        result = pipeline.train_bundle(manifest, args.arch, args.format, settings, args.seed,
                                       on_epoch=on_epoch, inputs=inputs)
    except DivergenceDetected as exc:
        raise CliError(f"training failed: {exc}", EXIT_TRAIN) from exc
    except (TooFewSamples, SingleClassInput) as exc:
        raise CliError(f"training failed: {exc}", EXIT_TRAIN) from exc
    model_id = models.save_bundle(result.bundle, args.out)
    if args.figures:
        Path(args.figures).mkdir(parents=True, exist_ok=True)
        plotting.loss_figure(result.losses, Path(args.figures) / "loss.png")
    _emit_json({"format_version": pipeline.FORMAT_VERSION, "model": args.out, "model_id": model_id,
                "arch": args.arch, "validation": result.validation}, None)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    bundle, model_id = _load_model(args.model)
    fmt = _check_format(bundle, args.format)
    manifest = _load_manifest(args.manifest)
    idx = [i for i, e in enumerate(manifest.entries) if e.split == args.split]
    inputs = _manifest_inputs(manifest, fmt, args.threads, idx)
    metrics = pipeline.evaluate_bundle(bundle, inputs, [manifest.entries[i] for i in idx])
    _emit_json({"format_version": pipeline.FORMAT_VERSION, "model_id": model_id, "split": args.split,
                "count": len(idx), "metrics": metrics}, args.out)
    return EXIT_OK


def _check_format(bundle, fmt):
    try:
        return pipeline.check_format(bundle, fmt)
    except ShapeMismatch as exc:
        raise CliError(str(exc), EXIT_MISMATCH) from exc


def cmd_predict(args) -> int:
    bundle, model_id = _load_model(args.model)
    fmt = _check_format(bundle, args.format)
    loaded = _read_all(_expand(args.inputs), args.threads)
    if not loaded:
        raise CliError("no readable input", EXIT_NO_INPUT)
    x = np.stack(pipeline.parallel_map(lambda pb: pipeline.model_input(pb[1], fmt), loaded, args.threads))
    rows = pipeline.score_rows(bundle, x)
    reports = [pipeline.analysis_report(b, p, scores=s, model_id=model_id) for (p, b), s in zip(loaded, rows)]
    _emit_lines(reports, args.out)
    if args.csv:
        with open(args.csv, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["path", "malicious", "modified", "route"])
            for (p, _), s in zip(loaded, rows):
                writer.writerow([p] + ["" if s[k] is None else s[k] for k in ("malicious", "modified", "route")])
    return EXIT_OK


def cmd_explain(args) -> int:
    bundle, model_id = _load_model(args.model)
    try:
        binary = load_binary(args.input)
    except (OSError, BinsightError) as exc:
        raise CliError(f"cannot read {args.input}: {exc}", EXIT_NO_INPUT) from exc
    try:
        result = pipeline.explain(bundle, binary, args.head)
    except (HeadCountMismatch, ShapeMismatch) as exc:
        raise CliError(str(exc), EXIT_MISMATCH) from exc
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.input).name
    ppm = imaging.export_image(imaging.overlay(result.gray, result.report.heatmap.intensities),
                               out_dir / f"{stem}.heatmap.ppm")
    doc = dict(result.report.to_dict(), path=args.input, head=args.head, block=result.block, model_id=model_id)
    report_path = out_dir / f"{stem}.report.json"
    report_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(ppm)
    print(report_path)
    if not args.no_figure:
        print(plotting.explanation_figure(result.gray, result.report, out_dir / f"{stem}.explain.png",
                                          title=f"{stem} ({args.head})"))
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="binsight", description="Image-based PE triage with attention maps.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None,
                        help=f"worker threads for per-file work (default ${pipeline.THREADS_ENV} or 1)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("transform", parents=[common], help="write each input as a PGM/PPM image")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--format", choices=("gray", "hit"), default="gray")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("stats", parents=[common], help="histogram, entropy, padding and PE sections as JSON lines")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", help="write JSON lines here instead of stdout")
    p.add_argument("--figures", metavar="DIR", help="also render one PNG per file into DIR")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("generate", help="write the seeded synthetic corpus and its manifest")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--per-class", type=int, default=250)
    p.add_argument("--padding", type=float, nargs="?", const=0.25, default=0.0, metavar="FRACTION",
                   help="append a constant run to this fraction of files (flag alone: 0.25)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", parents=[common], help="train a model on the manifest's train split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--arch", choices=models.ARCHS, default="single")
    p.add_argument("--format", choices=("gray", "hit"), default="gray")
    p.add_argument("--config", help="JSON file with training settings")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="model JSON path")
    p.add_argument("--figures", metavar="DIR", help="render the loss curve into DIR")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="metrics of a model on one manifest split")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--format", choices=("gray", "hit"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", parents=[common], help="score files; one JSON report per line")
    p.add_argument("--model", required=True)
    p.add_argument("inputs", nargs="+")
    p.add_argument("--format", choices=("gray", "hit"))
    p.add_argument("--out")
    p.add_argument("--csv", metavar="PATH", help="also write a path,malicious,modified,route table")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("explain", help="GradCAM++ overlay, annotated JSON and figure for one file")
    p.add_argument("--model", required=True)
    p.add_argument("input")
    p.add_argument("--head", choices=("malicious", "modified"), default="malicious")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--no-figure", action="store_true")
    p.set_defaults(func=cmd_explain)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    if hasattr(args, "threads"):
        args.threads = pipeline.resolve_threads(args.threads)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"binsight: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())

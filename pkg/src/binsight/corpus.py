"""Minimal PE construction and the seeded synthetic four-quadrant corpus.

The corpus stands in for a real benign/malware collection. Strata:

* benign-clean:     low-entropy code-like and ASCII-string payload
* malicious-clean:  the same kind of payload with :data:`MOTIF` planted at a random offset
* benign-modified:  payload replaced by a seeded high-entropy stream
* malicious-modified: high-entropy payload with :data:`MOTIF` planted

Every file is wrapped in a small but valid PE32 image so that section
overlays work. Optionally a subset gets a trailing constant run appended
(padding evasion scenario).
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .evaluation import DatasetManifest, ManifestEntry, split_dataset, write_manifest

HEADER_SIZE = 512
SECTION_ALIGNMENT = 0x1000
OPTIONAL_HEADER_SIZE = 224
MACHINE_I386 = 0x14C

SECTION_FLAGS = {
    ".text": 0x60000020,
    ".rdata": 0x40000040,
    ".data": 0xC0000040,
}

MOTIF_LEN = 256
# a fixed "signature": bright, varied bytes that never occur in the clean base payload
MOTIF = bytes(np.random.default_rng(0x5EED).integers(0xF0, 0x100, MOTIF_LEN, dtype=np.uint8))

_OPCODES = np.frombuffer(bytes.fromhex("8b5589 83c4 50 51 6a 00 0f 85 74 75 48 33 c0 8d 5d 5e 5f 90"), dtype=np.uint8)
_WORDS = [
    b"GetProcAddress\x00", b"LoadLibraryA\x00", b"kernel32.dll\x00", b"user32.dll\x00",
    b"CreateFileW\x00", b"ReadFile\x00", b"CloseHandle\x00", b"MessageBoxA\x00",
    b"Copyright (c) \x00", b"Microsoft Corporation\x00", b"version 1.0.2\x00",
    b"%s\\%s\x00", b"Software\\Classes\x00", b"\x00\x00\x00\x00", b"error: %d\n\x00",
]

STRATA = (
    ("benign-clean", 0, 0),
    ("malicious-clean", 1, 0),
    ("benign-modified", 0, 1),
    ("malicious-modified", 1, 1),
)


def build_pe(sections: Sequence[Tuple[str, bytes]], machine: int = MACHINE_I386, overlay: bytes = b"") -> bytes:
    """Assemble a PE32 file whose sections are laid out back to back after a 512-byte header."""
    if len(sections) > 5:
        raise ValueError("at most 5 sections fit in the 512-byte header")
    e_lfanew = 0x40
    dos = bytearray(e_lfanew)
    dos[0:2] = b"MZ"
    struct.pack_into("<I", dos, 0x3C, e_lfanew)

    raw_at = HEADER_SIZE
    va = SECTION_ALIGNMENT
    table = bytearray()
    for name, data in sections:
        vsize = max(len(data), 1)
        table += struct.pack(
            "<8sIIIIIIHHI", name.encode("ascii")[:8], vsize, va, len(data), raw_at if data else 0,
            0, 0, 0, 0, SECTION_FLAGS.get(name, 0x40000040),
        )
        raw_at += len(data)
        va += -(-vsize // SECTION_ALIGNMENT) * SECTION_ALIGNMENT
    size_of_image = va

    coff = struct.pack("<4sHHIIIHH", b"PE\x00\x00", machine, len(sections), 0, 0, 0, OPTIONAL_HEADER_SIZE, 0x0102)
    opt = bytearray(OPTIONAL_HEADER_SIZE)
    code_size = sum(len(d) for n, d in sections if n == ".text")
    struct.pack_into("<HBBIII", opt, 0, 0x10B, 14, 0, code_size, 0, 0)
    struct.pack_into("<III", opt, 16, SECTION_ALIGNMENT, SECTION_ALIGNMENT, 0x400000)  # entry, code base, image base
    struct.pack_into("<II", opt, 32, SECTION_ALIGNMENT, 0x200)
    struct.pack_into("<HH", opt, 40, 6, 0)  # OS version
    struct.pack_into("<HH", opt, 48, 6, 0)  # subsystem version
    struct.pack_into("<III", opt, 56, size_of_image, HEADER_SIZE, 0)
    struct.pack_into("<HH", opt, 68, 2, 0x8140)  # GUI subsystem, DLL characteristics
    struct.pack_into("<IIII", opt, 72, 0x100000, 0x1000, 0x100000, 0x1000)
    struct.pack_into("<II", opt, 88, 0, 16)

    header = bytes(dos) + coff + bytes(opt) + bytes(table)
    header += bytes(HEADER_SIZE - len(header))
    return header + b"".join(d for _, d in sections) + overlay


def clean_payload(rng: np.random.Generator, size: int) -> bytes:
    """Low-entropy payload: code-like bytes followed by an ASCII string table."""
    code_len = int(size * rng.uniform(0.4, 0.7))
    code = _OPCODES[rng.integers(0, len(_OPCODES), code_len)].tobytes()
    strings = bytearray()
    while len(strings) < size - code_len:
        strings += _WORDS[int(rng.integers(len(_WORDS)))]
    return code + bytes(strings[: size - code_len])


def modified_payload(rng: np.random.Generator, size: int) -> bytes:
    return rng.integers(0, 256, size, dtype=np.uint8).tobytes()


@dataclass(frozen=True)
class SampleInfo:
    path: str
    stratum: str
    label_malicious: int
    label_modified: int
    size: int
    motif_offset: Optional[int]
    padding_offset: Optional[int]
    padding_length: int


def make_sample(rng: np.random.Generator, malicious: bool, modified: bool,
                size: int, padding: int = 0) -> Tuple[bytes, Optional[int]]:
    """One synthetic PE of ``size`` bytes (plus ``padding`` trailing zeros).

    Returns the file bytes and the motif's file offset (None for benign).
    """
    payload_len = size - HEADER_SIZE
    payload = modified_payload(rng, payload_len) if modified else clean_payload(rng, payload_len)
    motif_at = None
    if malicious:
        rel = int(rng.integers(0, payload_len - MOTIF_LEN + 1))
        payload = payload[:rel] + MOTIF + payload[rel + MOTIF_LEN:]
        motif_at = HEADER_SIZE + rel
    split_at = int(payload_len * 0.6)
    sections = [(".text", payload[:split_at]), (".data", payload[split_at:])]
    return build_pe(sections, overlay=bytes(padding)), motif_at


def generate_synthetic_corpus(
    out_dir,
    seed: int,
    n_per_class: int,
    padding_fraction: float = 0.0,
    min_size: int = 4 * 1024,
    max_size: int = 64 * 1024,
    padding_range: Tuple[int, int] = (4096, 16384),
):
    """Write ``4 * n_per_class`` files plus ``manifest.csv`` and ``corpus.json``.

    Splits are assigned with :func:`split_dataset` using the same seed.
    Returns ``(manifest, samples)``.
    """
    if n_per_class < 10:
        raise ValueError("n_per_class must be >= 10")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    samples: List[SampleInfo] = []
    for stratum, mal, mod in STRATA:
        for i in range(n_per_class):
            size = int(rng.integers(min_size, max_size + 1))
            pad = int(rng.integers(padding_range[0], padding_range[1] + 1)) if rng.random() < padding_fraction else 0
            data, motif_at = make_sample(rng, bool(mal), bool(mod), size, pad)
            name = f"{stratum}-{i:05d}.exe"
            (out / name).write_bytes(data)
            samples.append(SampleInfo(name, stratum, mal, mod, size, motif_at,
                                      size if pad else None, pad))
    manifest = DatasetManifest(
        [ManifestEntry(s.path, s.label_malicious, s.label_modified) for s in samples], os.fspath(out)
    )
    manifest = split_dataset(manifest, seed)
    write_manifest(manifest, out / "manifest.csv")
    meta = {"seed": seed, "n_per_class": n_per_class, "samples": [asdict(s) for s in samples]}
    (out / "corpus.json").write_text(json.dumps(meta, indent=1), encoding="utf-8")
    return manifest, samples

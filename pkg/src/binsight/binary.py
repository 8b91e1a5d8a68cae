"""Raw binary loading and a deliberately small PE parser.

Only the DOS header, the COFF file header and the section table are read.
Everything is bounds-checked against the input length so that arbitrary
(and hostile) byte strings never raise from :func:`parse_pe`.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

from .errors import EmptyFileError, GeometryMismatch

MZ_MAGIC = b"MZ"
PE_MAGIC = b"PE\x00\x00"
DOS_HEADER_SIZE = 0x40
E_LFANEW_OFFSET = 0x3C
COFF_HEADER_SIZE = 20
SECTION_HEADER_SIZE = 40
# SizeOfHeaders sits at the same offset in PE32 and PE32+ optional headers.
SIZE_OF_HEADERS_OFFSET = 60

COFF_FORMAT = "<HHIIIHH"
SECTION_FORMAT = "<8sIIIIIIHHI"


@dataclass(frozen=True)
class RawBinary:
    data: bytes
    source_path: str = ""

    def __post_init__(self):
        if not isinstance(self.data, bytes):
            object.__setattr__(self, "data", bytes(self.data))
        if len(self.data) < 1:
            raise EmptyFileError(f"empty input: {self.source_path or '<memory>'}")

    def __len__(self):
        return len(self.data)


@dataclass(frozen=True)
class SectionInfo:
    name: str
    raw_offset: int
    raw_size: int
    characteristics: int
    truncated: bool = False

    @property
    def raw_end(self) -> int:
        return self.raw_offset + self.raw_size


@dataclass(frozen=True)
class PeLayout:
    machine: int
    sections: Tuple[SectionInfo, ...]
    headers_size: int
    table_truncated: bool = False

    def sorted_sections(self) -> List[SectionInfo]:
        """Sections ordered by raw offset; the declared order is kept in ``sections``."""
        return sorted(self.sections, key=lambda s: (s.raw_offset, s.raw_size, s.name))

    def to_dict(self) -> dict:
        return {
            "machine": self.machine,
            "headers_size": self.headers_size,
            "table_truncated": self.table_truncated,
            "sections": [
                {
                    "name": s.name,
                    "raw_offset": s.raw_offset,
                    "raw_size": s.raw_size,
                    "characteristics": s.characteristics,
                    "truncated": s.truncated,
                }
                for s in self.sections
            ],
        }


def load_binary(path) -> RawBinary:
    """Read ``path`` verbatim.

    Raises FileNotFoundError for a missing path, EmptyFileError for a
    zero-length file and OSError for any other I/O failure.
    """
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such file: {p}")
    data = p.read_bytes()
    if not data:
        raise EmptyFileError(f"empty file: {p}")
    return RawBinary(data, os.fspath(p))


def _section_name(raw: bytes) -> str:
    raw = raw.rstrip(b"\x00")
    out = []
    for b in raw:
        if 0x20 <= b < 0x7F and b != 0x5C:
            out.append(chr(b))
        else:
            out.append(f"\\x{b:02x}")
    return "".join(out)


def parse_pe(binary: RawBinary) -> Optional[PeLayout]:
    """Parse the section table of a PE file, or return None for non-PE input."""
    data = binary.data
    n = len(data)
    if n < DOS_HEADER_SIZE or data[:2] != MZ_MAGIC:
        return None
    (e_lfanew,) = struct.unpack_from("<I", data, E_LFANEW_OFFSET)
    if e_lfanew + len(PE_MAGIC) > n or data[e_lfanew:e_lfanew + 4] != PE_MAGIC:
        return None

    coff_at = e_lfanew + 4
    if coff_at + COFF_HEADER_SIZE > n:
        return PeLayout(machine=0, sections=(), headers_size=n, table_truncated=True)
    machine, nsections, _, _, _, opt_size, _ = struct.unpack_from(COFF_FORMAT, data, coff_at)

    opt_at = coff_at + COFF_HEADER_SIZE
    table_at = opt_at + opt_size
    headers_size = None
    if opt_size >= SIZE_OF_HEADERS_OFFSET + 4 and opt_at + SIZE_OF_HEADERS_OFFSET + 4 <= n:
        (headers_size,) = struct.unpack_from("<I", data, opt_at + SIZE_OF_HEADERS_OFFSET)

    sections = []
    table_truncated = False
    for i in range(nsections):
        at = table_at + i * SECTION_HEADER_SIZE
        if at + SECTION_HEADER_SIZE > n:
            table_truncated = True
            break
        fields = struct.unpack_from(SECTION_FORMAT, data, at)
        name, raw_size, raw_offset, characteristics = fields[0], fields[3], fields[4], fields[9]
        sections.append(
            SectionInfo(
                name=_section_name(name),
                raw_offset=raw_offset,
                raw_size=raw_size,
                characteristics=characteristics,
                truncated=raw_offset + raw_size > n,
            )
        )

    table_end = min(table_at + len(sections) * SECTION_HEADER_SIZE, n)
    if not headers_size:
        headers_size = table_end
    return PeLayout(
        machine=machine,
        sections=tuple(sections),
        headers_size=headers_size,
        table_truncated=table_truncated,
    )


def byte_range_rows(start: int, end: int, width: int, height: int) -> Tuple[int, int]:
    """Image rows ``[first, last)`` covering the byte range ``[start, end)``."""
    first = min(start // width, height)
    last = min(-(-end // width), height)
    return first, max(first, last)


def section_pixel_ranges(layout: PeLayout, width: int, height: int, file_len: int):
    """Map each section's file range onto image rows.

    Returns ``(name, start_row, end_row)`` tuples sorted by start row; the end
    row is exclusive and clamped to the image height. Sections that fall
    entirely outside the image are dropped.
    """
    if width < 1 or height < 1 or width * height < file_len:
        raise GeometryMismatch(f"{width}x{height} image cannot hold {file_len} bytes")
    out = []
    for sec in layout.sorted_sections():
        if sec.raw_size == 0:
            continue
        first, last = byte_range_rows(sec.raw_offset, sec.raw_end, width, height)
        if last > first:
            out.append((sec.name, first, last))
    out.sort(key=lambda t: (t[1], t[2]))
    return out

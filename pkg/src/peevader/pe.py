"""Parse PE files into an editable model and write them back byte-for-byte.

The model is deliberately shallow: it exposes the DOS region, COFF header,
the handful of optional-header fields the transforms rewrite, and the section
table. Everything else (rich header, data directories, import tables) is
carried verbatim in ``raw``, which is what makes the round trip exact.

Layout reference: https://learn.microsoft.com/en-us/windows/win32/debug/pe-format
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

MAX_FILE_SIZE = 256 * 1024 * 1024

DOS_HEADER_SIZE = 0x40
E_LFANEW_OFFSET = 0x3C
COFF_SIZE = 20
SECTION_HEADER_SIZE = 40

PE32_MAGIC = 0x10B
PE32PLUS_MAGIC = 0x20B

SCN_CNT_CODE = 0x00000020
SCN_CNT_INITIALIZED_DATA = 0x00000040
SCN_MEM_EXECUTE = 0x20000000
SCN_MEM_READ = 0x40000000
SCN_MEM_WRITE = 0x80000000

SECURITY_DIR_INDEX = 4

# The stub MSVC links at offset 0x40 by default.
CANONICAL_STUB = (
    bytes.fromhex("0e1fba0e00b409cd21b8014ccd21")
    + b"This program cannot be run in DOS mode.\r\r\n$"
).ljust(64, b"\0")

# Offsets inside the optional header, identical for PE32 and PE32+.
OPT_ENTRY_POINT = 0x10
OPT_SECTION_ALIGNMENT = 0x20
OPT_FILE_ALIGNMENT = 0x24
OPT_SIZE_OF_IMAGE = 0x38
OPT_SIZE_OF_HEADERS = 0x3C
OPT_CHECKSUM = 0x40


class MalformedPe(ValueError):
    """The input is not a PE file this model accepts."""


class InconsistentModel(RuntimeError):
    """A PeImage's parsed fields disagree with its raw bytes."""


@dataclass(frozen=True)
class DosRegion:
    e_magic: bytes
    e_lfanew: int
    stub_bytes: bytes


@dataclass(frozen=True)
class CoffHeader:
    offset: int
    machine: int
    number_of_sections: int
    time_date_stamp: int
    pointer_to_symbol_table: int
    number_of_symbols: int
    size_of_optional_header: int
    characteristics: int


@dataclass(frozen=True)
class OptionalView:
    offset: int
    magic: int
    address_of_entry_point: int
    section_alignment: int
    file_alignment: int
    size_of_image: int
    size_of_headers: int
    checksum: int
    checksum_offset: int
    # File offset of the security directory entry (8 bytes), if present.
    security_entry_offset: Optional[int]
    security_offset: int
    security_size: int

    @property
    def is_pe32plus(self) -> bool:
        return self.magic == PE32PLUS_MAGIC


@dataclass(frozen=True)
class SectionRecord:
    index: int
    header_offset: int
    name: bytes
    virtual_size: int
    virtual_address: int
    raw_size: int
    raw_ptr: int
    characteristics: int

    @property
    def display_name(self) -> str:
        return self.name.rstrip(b"\0").decode("latin-1")

    @property
    def mapped_size(self) -> int:
        """Bytes of raw data the loader maps (a zero virtual size means raw_size)."""
        if self.virtual_size == 0:
            return self.raw_size
        return min(self.virtual_size, self.raw_size)

    @property
    def raw_end(self) -> int:
        return self.raw_ptr + self.raw_size

    @property
    def slack(self) -> tuple[int, int]:
        """(offset, length) of on-disk bytes past the mapped data."""
        start = self.raw_ptr + self.mapped_size
        return start, self.raw_end - start

    @property
    def is_executable(self) -> bool:
        return bool(self.characteristics & (SCN_MEM_EXECUTE | SCN_CNT_CODE))


@dataclass(frozen=True)
class PeImage:
    raw: bytes
    dos: DosRegion
    coff: CoffHeader
    opt: OptionalView
    sections: tuple[SectionRecord, ...]
    overlay_offset: int
    signed: bool

    def __len__(self) -> int:
        return len(self.raw)

    @property
    def section_table_offset(self) -> int:
        return self.opt.offset + self.coff.size_of_optional_header

    @property
    def section_table_end(self) -> int:
        return self.section_table_offset + SECTION_HEADER_SIZE * len(self.sections)

    @property
    def overlay(self) -> bytes:
        return self.raw[self.overlay_offset:]

    def section_bytes(self, sec: SectionRecord) -> bytes:
        return self.raw[sec.raw_ptr:sec.raw_end]

    def mapped_bytes(self, sec: SectionRecord) -> bytes:
        return self.raw[sec.raw_ptr:sec.raw_ptr + sec.mapped_size]

    def rva_to_offset(self, rva: int) -> Optional[int]:
        for sec in self.sections:
            span = max(sec.virtual_size, sec.raw_size)
            if sec.virtual_address <= rva < sec.virtual_address + span:
                delta = rva - sec.virtual_address
                if delta < sec.raw_size:
                    return sec.raw_ptr + delta
                return None
        if rva < self.opt.size_of_headers:
            return rva
        return None

    def section_for_offset(self, offset: int) -> Optional[SectionRecord]:
        for sec in self.sections:
            if sec.raw_size and sec.raw_ptr <= offset < sec.raw_end:
                return sec
        return None


def _is_pow2(x: int) -> bool:
    return x > 0 and (x & (x - 1)) == 0


def align_up(value: int, alignment: int) -> int:
    return (value + alignment - 1) // alignment * alignment


def parse_pe(data: bytes) -> PeImage:
    """Parse ``data`` into a :class:`PeImage`, raising :class:`MalformedPe`."""
    data = bytes(data)
    size = len(data)
    if size == 0:
        raise MalformedPe("empty input")
    if size > MAX_FILE_SIZE:
        raise MalformedPe(f"file too large ({size} bytes)")
    if size < DOS_HEADER_SIZE:
        raise MalformedPe("truncated DOS header")
    if data[:2] != b"MZ":
        raise MalformedPe("missing MZ magic")

    (e_lfanew,) = struct.unpack_from("<I", data, E_LFANEW_OFFSET)
    if e_lfanew < DOS_HEADER_SIZE or e_lfanew >= size - 4:
        raise MalformedPe(f"e_lfanew out of range: {e_lfanew:#x}")
    if data[e_lfanew:e_lfanew + 4] != b"PE\0\0":
        raise MalformedPe("missing PE signature")

    coff_off = e_lfanew + 4
    if coff_off + COFF_SIZE > size:
        raise MalformedPe("truncated COFF header")
    fields = struct.unpack_from("<HHIIIHH", data, coff_off)
    coff = CoffHeader(coff_off, *fields)

    opt_off = coff_off + COFF_SIZE
    opt_size = coff.size_of_optional_header
    if opt_size < OPT_CHECKSUM + 4 or opt_off + opt_size > size:
        raise MalformedPe("truncated optional header")
    (magic,) = struct.unpack_from("<H", data, opt_off)
    if magic not in (PE32_MAGIC, PE32PLUS_MAGIC):
        raise MalformedPe(f"unknown optional header magic {magic:#x}")

    def u32(rel: int) -> int:
        return struct.unpack_from("<I", data, opt_off + rel)[0]

    entry = u32(OPT_ENTRY_POINT)
    sect_align = u32(OPT_SECTION_ALIGNMENT)
    file_align = u32(OPT_FILE_ALIGNMENT)
    size_of_image = u32(OPT_SIZE_OF_IMAGE)
    size_of_headers = u32(OPT_SIZE_OF_HEADERS)
    checksum = u32(OPT_CHECKSUM)
    if not (_is_pow2(file_align) and _is_pow2(sect_align)):
        raise MalformedPe("alignments must be powers of two")
    if sect_align < file_align:
        raise MalformedPe("section alignment below file alignment")
    if size_of_headers % file_align:
        raise MalformedPe("SizeOfHeaders not a multiple of FileAlignment")

    nrva_rel, dirs_rel = (0x6C, 0x70) if magic == PE32PLUS_MAGIC else (0x5C, 0x60)
    sec_entry = None
    sec_offset = sec_size = 0
    if opt_size >= nrva_rel + 4:
        nrva = u32(nrva_rel)
        entry_rel = dirs_rel + 8 * SECURITY_DIR_INDEX
        if nrva > SECURITY_DIR_INDEX and opt_size >= entry_rel + 8:
            sec_entry = opt_off + entry_rel
            sec_offset, sec_size = struct.unpack_from("<II", data, sec_entry)

    opt = OptionalView(
        offset=opt_off,
        magic=magic,
        address_of_entry_point=entry,
        section_alignment=sect_align,
        file_alignment=file_align,
        size_of_image=size_of_image,
        size_of_headers=size_of_headers,
        checksum=checksum,
        checksum_offset=opt_off + OPT_CHECKSUM,
        security_entry_offset=sec_entry,
        security_offset=sec_offset,
        security_size=sec_size,
    )

    table = opt_off + opt_size
    nsec = coff.number_of_sections
    if table + SECTION_HEADER_SIZE * nsec > size:
        raise MalformedPe("truncated section table")
    sections = []
    for i in range(nsec):
        hdr = table + SECTION_HEADER_SIZE * i
        name, vsize, va, rsize, rptr = struct.unpack_from("<8sIIII", data, hdr)
        (chars,) = struct.unpack_from("<I", data, hdr + 36)
        if rsize:
            if rptr % file_align:
                raise MalformedPe(f"section {i} raw pointer not file-aligned")
            if rptr + rsize > size:
                raise MalformedPe(f"section {i} raw data past end of file")
        sections.append(SectionRecord(i, hdr, name, vsize, va, rsize, rptr, chars))

    extents = sorted((s.raw_ptr, s.raw_end) for s in sections if s.raw_size)
    for (_, end), (start, _) in zip(extents, extents[1:]):
        if start < end:
            raise MalformedPe("overlapping section raw data")
    # with no section data the overlay starts where the mapped headers end
    headers_end = min(size, max(size_of_headers, table + SECTION_HEADER_SIZE * nsec))
    overlay_offset = max((end for _, end in extents), default=headers_end)

    dos = DosRegion(data[:2], e_lfanew, data[2:e_lfanew])
    return PeImage(
        raw=data,
        dos=dos,
        coff=coff,
        opt=opt,
        sections=tuple(sections),
        overlay_offset=overlay_offset,
        signed=sec_entry is not None and (sec_offset != 0 or sec_size != 0),
    )


def serialize_pe(img: PeImage) -> bytes:
    """Return the file bytes of ``img``.

    Raises :class:`InconsistentModel` if the structured fields no longer
    describe ``img.raw`` (e.g. a section record was swapped without writing
    the corresponding header bytes).
    """
    try:
        reparsed = parse_pe(img.raw)
    except MalformedPe as exc:
        raise InconsistentModel(f"raw bytes no longer parse: {exc}") from exc
    if reparsed != img:
        raise InconsistentModel("structured fields disagree with raw bytes")
    return img.raw


def locate_slack(img: PeImage) -> list[tuple[int, int, int]]:
    """List ``(section index, file offset, length)`` for every non-empty slack region."""
    out = []
    for sec in img.sections:
        offset, length = sec.slack
        if length > 0:
            out.append((sec.index, offset, length))
    return out


def update_checksum(img: PeImage) -> PeImage:
    """Zero the CheckSum field. Loaders only verify it for drivers."""
    if img.opt.checksum == 0:
        return img
    buf = bytearray(img.raw)
    struct.pack_into("<I", buf, img.opt.checksum_offset, 0)
    return parse_pe(bytes(buf))


def inspect_lines(img: PeImage) -> list[str]:
    """Header dump, one ``name = hex-value`` field per line."""
    lines = [
        f"file_size = {len(img.raw):#x}",
        f"e_magic = {img.dos.e_magic.hex()}",
        f"e_lfanew = {img.dos.e_lfanew:#x}",
        f"machine = {img.coff.machine:#x}",
        f"number_of_sections = {img.coff.number_of_sections:#x}",
        f"size_of_optional_header = {img.coff.size_of_optional_header:#x}",
        f"characteristics = {img.coff.characteristics:#x}",
        f"magic = {img.opt.magic:#x}",
        f"address_of_entry_point = {img.opt.address_of_entry_point:#x}",
        f"section_alignment = {img.opt.section_alignment:#x}",
        f"file_alignment = {img.opt.file_alignment:#x}",
        f"size_of_image = {img.opt.size_of_image:#x}",
        f"size_of_headers = {img.opt.size_of_headers:#x}",
        f"checksum = {img.opt.checksum:#x}",
        f"signed = {int(img.signed):#x}",
        f"overlay_offset = {img.overlay_offset:#x}",
    ]
    for sec in img.sections:
        p = f"section[{sec.index}]"
        lines += [
            f"{p}.name = {sec.name.hex()}",
            f"{p}.virtual_size = {sec.virtual_size:#x}",
            f"{p}.virtual_address = {sec.virtual_address:#x}",
            f"{p}.raw_size = {sec.raw_size:#x}",
            f"{p}.raw_ptr = {sec.raw_ptr:#x}",
            f"{p}.characteristics = {sec.characteristics:#x}",
        ]
    return lines

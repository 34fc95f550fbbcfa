"""Functionality-preserving PE transformations and a static equivalence check.

Every transform takes a parsed image and returns a new one; the input is
never modified. Content for the injecting kinds comes from a
:class:`~peevader.bank.ContentBank` block (``block_id``) or, when no bank is
available, from a seeded uniform byte stream.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

import numpy as np

from .bank import ContentBank, sample_block, sample_name
from .pe import (
    DOS_HEADER_SIZE,
    E_LFANEW_OFFSET,
    OPT_SIZE_OF_HEADERS,
    OPT_SIZE_OF_IMAGE,
    SCN_CNT_INITIALIZED_DATA,
    SCN_MEM_READ,
    SECTION_HEADER_SIZE,
    PeImage,
    align_up,
    locate_slack,
    parse_pe,
    update_checksum,
)


class ActionKind(str, Enum):
    EDIT_DOS = "editdos"
    EXTEND_DOS = "extenddos"
    SECTION_APPEND = "sectionappend"
    SECTION_ADD = "sectionadd"
    SECTION_RENAME = "sectionrename"
    PADDING = "padding"
    CODE_RANDOMIZE = "coderandomize"

    def __str__(self) -> str:
        return self.value


SIZED_KINDS = frozenset({
    ActionKind.EDIT_DOS, ActionKind.EXTEND_DOS, ActionKind.SECTION_APPEND,
    ActionKind.SECTION_ADD, ActionKind.PADDING,
})
# Kinds whose size the minimizer may shrink.
SHRINKABLE_KINDS = frozenset({
    ActionKind.EXTEND_DOS, ActionKind.SECTION_APPEND, ActionKind.SECTION_ADD, ActionKind.PADDING,
})

# Intel's recommended multi-byte NOP encodings, indexed by length - 1.
NOP_ENCODINGS = (
    bytes.fromhex("90"),
    bytes.fromhex("6690"),
    bytes.fromhex("0f1f00"),
    bytes.fromhex("0f1f4000"),
    bytes.fromhex("0f1f440000"),
    bytes.fromhex("660f1f440000"),
    bytes.fromhex("0f1f8000000000"),
    bytes.fromhex("0f1f840000000000"),
    bytes.fromhex("660f1f840000000000"),
)
PADDING_BYTES = (0x90, 0xCC)


class TransformError(Exception):
    """A transform could not produce a valid output."""


class NotApplicable(TransformError):
    pass


class NoHeaderRoom(TransformError):
    pass


class InvalidAction(TransformError, ValueError):
    pass


@dataclass(frozen=True)
class ActionSpec:
    kind: ActionKind
    size: int = 0
    block_id: Optional[int] = None  # None: uniform random bytes
    target: Optional[int] = None
    seed: int = 0

    @property
    def content_source(self) -> str:
        return "random" if self.block_id is None else f"block:{self.block_id}"

    @property
    def label(self) -> str:
        parts = [self.kind.value]
        if self.kind in SIZED_KINDS:
            parts.append(str(self.size))
        if self.kind not in (ActionKind.CODE_RANDOMIZE,):
            parts.append(self.content_source)
        return ":".join(parts)

    def validate(self) -> None:
        if not isinstance(self.kind, ActionKind):
            raise InvalidAction(f"unknown action kind {self.kind!r}")
        if self.kind in SIZED_KINDS and self.size <= 0:
            raise InvalidAction(f"{self.kind.value} needs a positive size")
        if self.seed < 0 or self.seed >= 2**64:
            raise InvalidAction("seed must fit in 64 bits")


@dataclass(frozen=True)
class EquivalenceReport:
    ok: bool
    mapped_bytes_identical: bool
    entry_bytes_identical: bool
    section_count_delta: int
    notes: list = field(default_factory=list)


def _rng(spec: ActionSpec, stream: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, stream])


def injected_content(spec: ActionSpec, bank: Optional[ContentBank], n: int) -> bytes:
    """The ``n`` bytes an injecting action writes."""
    rng = _rng(spec, 0)
    if spec.block_id is None or bank is None or bank.is_empty:
        return rng.bytes(n)
    _, first = bank.blocks[spec.block_id % len(bank.blocks)]
    if n <= len(first):
        return first[:n]
    return first + sample_block(bank, n - len(first), rng)


def _random_name(rng: np.random.Generator) -> bytes:
    return bytes(rng.integers(ord("a"), ord("z") + 1, 8, dtype=np.uint8))


def _pick_name(spec: ActionSpec, bank: Optional[ContentBank], rng: np.random.Generator) -> bytes:
    if spec.block_id is not None and bank is not None and bank.names:
        return sample_name(bank, rng)
    return _random_name(rng)


def _check_kind(spec: ActionSpec, kind: ActionKind) -> None:
    if spec.kind is not kind:
        raise InvalidAction(f"expected a {kind.value} action, got {spec.kind.value}")


def _bump(buf: bytearray, offset: int, delta: int, floor: int) -> None:
    """Add ``delta`` to the u32 file pointer at ``offset`` if it points at/after ``floor``."""
    (value,) = struct.unpack_from("<I", buf, offset)
    if value and value >= floor:
        struct.pack_into("<I", buf, offset, value + delta)


def edit_dos(img: PeImage, spec: ActionSpec, bank: Optional[ContentBank] = None) -> PeImage:
    """Overwrite the DOS header and stub, keeping only ``MZ`` and e_lfanew."""
    _check_kind(spec, ActionKind.EDIT_DOS)
    e = img.dos.e_lfanew
    if e <= DOS_HEADER_SIZE:
        raise NotApplicable("no DOS stub between the header and the PE signature")
    head = E_LFANEW_OFFSET - 2
    payload = injected_content(spec, bank, head + e - DOS_HEADER_SIZE)
    buf = bytearray(img.raw)
    buf[2:E_LFANEW_OFFSET] = payload[:head]
    buf[DOS_HEADER_SIZE:e] = payload[head:]
    return parse_pe(bytes(buf))


def extend_dos(img: PeImage, spec: ActionSpec, bank: Optional[ContentBank] = None) -> PeImage:
    """Insert ``spec.size`` bytes in front of the PE signature and shift everything after it."""
    _check_kind(spec, ActionKind.EXTEND_DOS)
    fa = img.opt.file_alignment
    if spec.size % fa:
        raise InvalidAction(f"extenddos size {spec.size:#x} is not a multiple of FileAlignment {fa:#x}")
    e = img.dos.e_lfanew
    shift = spec.size
    new_soh = img.opt.size_of_headers + shift
    first_va = min((s.virtual_address for s in img.sections), default=img.opt.size_of_image)
    if new_soh > first_va:
        raise NotApplicable("grown headers would overlap the first section in memory")
    if any(s.raw_size and s.raw_ptr < e for s in img.sections):
        raise NotApplicable("section data lies inside the DOS region")

    buf = bytearray(img.raw[:e]) + injected_content(spec, bank, shift) + img.raw[e:]
    struct.pack_into("<I", buf, E_LFANEW_OFFSET, e + shift)
    struct.pack_into("<I", buf, img.opt.offset + shift + OPT_SIZE_OF_HEADERS, new_soh)
    _bump(buf, img.coff.offset + shift + 8, shift, e)  # PointerToSymbolTable
    if img.opt.security_entry_offset is not None:
        _bump(buf, img.opt.security_entry_offset + shift, shift, e)
    for sec in img.sections:
        _bump(buf, sec.header_offset + shift + 20, shift, e)  # PointerToRawData
    return parse_pe(bytes(buf))


def section_append(img: PeImage, spec: ActionSpec, bank: Optional[ContentBank] = None) -> PeImage:
    """Fill (part of) one section's slack; the write is clamped to the slack length."""
    _check_kind(spec, ActionKind.SECTION_APPEND)
    slacks = locate_slack(img)
    if spec.target is not None:
        slacks = [s for s in slacks if s[0] == spec.target]
    if not slacks:
        raise NotApplicable("no section slack to write into")
    _, offset, length = slacks[int(_rng(spec, 1).integers(len(slacks)))]
    n = min(spec.size, length)
    buf = bytearray(img.raw)
    buf[offset:offset + n] = injected_content(spec, bank, n)
    return parse_pe(bytes(buf))


def section_add(img: PeImage, spec: ActionSpec, bank: Optional[ContentBank] = None) -> PeImage:
    """Append a new initialized-data section; headers are never relocated."""
    _check_kind(spec, ActionKind.SECTION_ADD)
    fa, sa = img.opt.file_alignment, img.opt.section_alignment
    table_end = img.section_table_end
    first_raw = min((s.raw_ptr for s in img.sections if s.raw_size), default=len(img.raw))
    limit = min(img.opt.size_of_headers, first_raw)
    if table_end + SECTION_HEADER_SIZE > limit or any(img.raw[table_end:table_end + SECTION_HEADER_SIZE]):
        raise NoHeaderRoom("no free 40-byte slot after the section table")
    insert_at = img.overlay_offset
    if insert_at % fa:
        raise NotApplicable("end of section data is not file-aligned")

    raw_size = align_up(spec.size, fa)
    image_end = img.opt.size_of_image
    for s in img.sections:
        image_end = max(image_end, s.virtual_address + max(s.virtual_size, s.raw_size))
    va = align_up(image_end, sa)
    name = _pick_name(spec, bank, _rng(spec, 2))
    header = struct.pack("<8sIIIIIIHHI", name, spec.size, va, raw_size, insert_at,
                         0, 0, 0, 0, SCN_CNT_INITIALIZED_DATA | SCN_MEM_READ)

    buf = bytearray(img.raw)
    buf[table_end:table_end + SECTION_HEADER_SIZE] = header
    struct.pack_into("<H", buf, img.coff.offset + 2, len(img.sections) + 1)
    struct.pack_into("<I", buf, img.opt.offset + OPT_SIZE_OF_IMAGE, align_up(va + spec.size, sa))
    _bump(buf, img.coff.offset + 8, raw_size, insert_at)
    if img.opt.security_entry_offset is not None:
        _bump(buf, img.opt.security_entry_offset, raw_size, insert_at)
    buf[insert_at:insert_at] = injected_content(spec, bank, raw_size)
    return parse_pe(bytes(buf))


def section_rename(img: PeImage, spec: ActionSpec, bank: Optional[ContentBank] = None) -> PeImage:
    _check_kind(spec, ActionKind.SECTION_RENAME)
    if not img.sections:
        raise NotApplicable("image has no sections")
    rng = _rng(spec, 3)
    idx = spec.target if spec.target is not None else int(rng.integers(len(img.sections)))
    if not 0 <= idx < len(img.sections):
        raise InvalidAction(f"no section {idx}")
    hdr = img.sections[idx].header_offset
    buf = bytearray(img.raw)
    buf[hdr:hdr + 8] = _pick_name(spec, bank, rng)
    return parse_pe(bytes(buf))


def padding(img: PeImage, spec: ActionSpec, bank: Optional[ContentBank] = None) -> PeImage:
    _check_kind(spec, ActionKind.PADDING)
    return append_overlay(img, injected_content(spec, bank, spec.size))


def append_overlay(img: PeImage, data: bytes) -> PeImage:
    return parse_pe(img.raw + data)


def padding_runs(data: bytes, min_len: int = 2) -> list[tuple[int, int]]:
    """Maximal runs of a single 0x90 or 0xCC byte value, as (start, length)."""
    runs = []
    i, n = 0, len(data)
    while i < n:
        b = data[i]
        j = i + 1
        while j < n and data[j] == b:
            j += 1
        if b in PADDING_BYTES and j - i >= min_len:
            runs.append((i, j - i))
        i = j
    return runs


def nop_fill(length: int) -> bytes:
    """``length`` bytes of the longest NOP encodings that fit."""
    out = bytearray()
    while len(out) < length:
        out += NOP_ENCODINGS[min(len(NOP_ENCODINGS), length - len(out)) - 1]
    return bytes(out)


def is_nop_sequence(data: bytes) -> bool:
    pos = 0
    while pos < len(data):
        for enc in NOP_ENCODINGS:
            if data.startswith(enc, pos):
                pos += len(enc)
                break
        else:
            return False
    return True


def code_randomize(img: PeImage, spec: ActionSpec, bank: Optional[ContentBank] = None) -> PeImage:
    """Re-encode NOP/INT3 padding runs in executable sections as multi-byte NOPs.

    The seed picks which runs are rewritten (at least one); instruction bytes
    outside the runs are never touched.
    """
    _check_kind(spec, ActionKind.CODE_RANDOMIZE)
    targets = []
    for sec in img.sections:
        if sec.is_executable:
            base = sec.raw_ptr
            targets += [(base + s, n) for s, n in padding_runs(img.mapped_bytes(sec))]
    if not targets:
        raise NotApplicable("no NOP/INT3 padding runs in executable sections")
    rng = _rng(spec, 4)
    chosen = rng.random(len(targets)) < 0.5
    if not chosen.any():
        chosen[int(rng.integers(len(targets)))] = True
    buf = bytearray(img.raw)
    for (start, n), pick in zip(targets, chosen):
        if pick:
            buf[start:start + n] = nop_fill(n)
    return parse_pe(bytes(buf))


_DISPATCH = {
    ActionKind.EDIT_DOS: edit_dos,
    ActionKind.EXTEND_DOS: extend_dos,
    ActionKind.SECTION_APPEND: section_append,
    ActionKind.SECTION_ADD: section_add,
    ActionKind.SECTION_RENAME: section_rename,
    ActionKind.PADDING: padding,
    ActionKind.CODE_RANDOMIZE: code_randomize,
}


def apply(img: PeImage, spec: ActionSpec, bank: Optional[ContentBank] = None) -> PeImage:
    """Run one action and zero the checksum of the result."""
    spec.validate()
    return update_checksum(_DISPATCH[spec.kind](img, spec, bank))


def apply_sequence(img: PeImage, specs, bank: Optional[ContentBank] = None) -> PeImage:
    for spec in specs:
        img = apply(img, spec, bank)
    return img


def with_size(spec: ActionSpec, size: int) -> ActionSpec:
    return replace(spec, size=size)


def _tolerated(orig: bytes, mod: bytes) -> np.ndarray:
    """Mask of positions where ``mod`` may differ from ``orig``: inside padding
    runs of ``orig`` that ``mod`` rewrote into a valid NOP sequence."""
    mask = np.zeros(len(orig), dtype=bool)
    for start, n in padding_runs(orig):
        seg = mod[start:start + n]
        if seg != orig[start:start + n] and is_nop_sequence(seg):
            mask[start:start + n] = True
    return mask


def _region_equal(orig: bytes, mod: bytes, executable: bool) -> np.ndarray:
    a = np.frombuffer(orig, dtype=np.uint8)
    b = np.frombuffer(mod, dtype=np.uint8)
    same = a == b
    if executable and not same.all():
        same |= _tolerated(orig, mod)
    return same


def check_equivalence(original: PeImage, modified: PeImage) -> EquivalenceReport:
    """Static check that every mapped section byte and the entry code survived.

    Sections are matched by index (transforms never reorder or drop them).
    NOP/INT3 padding runs rewritten as multi-byte NOPs count as identical.
    """
    notes = []
    delta = len(modified.sections) - len(original.sections)
    if delta < 0:
        notes.append(f"{-delta} section(s) removed")

    mapped_ok = True
    per_section = {}
    for sec in original.sections:
        if sec.index >= len(modified.sections):
            mapped_ok = False
            continue
        msec = modified.sections[sec.index]
        o = original.mapped_bytes(sec)
        m = modified.raw[msec.raw_ptr:msec.raw_ptr + len(o)]
        if len(m) != len(o):
            mapped_ok = False
            notes.append(f"section {sec.index} truncated")
            continue
        same = _region_equal(o, m, sec.is_executable)
        per_section[sec.index] = same
        if not same.all():
            mapped_ok = False
            notes.append(f"section {sec.index} mapped bytes changed")
        elif o != m:
            notes.append(f"section {sec.index} padding runs re-encoded")

    entry_ok = True
    rva = original.opt.address_of_entry_point
    if modified.opt.address_of_entry_point != rva:
        entry_ok = False
        notes.append("entry point moved")
    else:
        osec = next((s for s in original.sections
                     if s.raw_size and s.virtual_address <= rva < s.virtual_address + s.mapped_size), None)
        if osec is None:
            notes.append("entry point not backed by section data")
        elif osec.index in per_section:
            start = rva - osec.virtual_address
            entry_ok = bool(per_section[osec.index][start:start + 64].all())
        else:
            entry_ok = False
        if not entry_ok:
            notes.append("entry point bytes changed")

    ok = mapped_ok and entry_ok and delta >= 0
    return EquivalenceReport(ok, mapped_ok, entry_ok, delta, notes)

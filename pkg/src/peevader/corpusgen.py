"""Deterministic synthetic PE files for tests and desk-scale campaigns.

Nothing generated here executes; the files only need to be structurally valid
and to land on a known side of the builtin scorer's threshold.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .pe import (
    CANONICAL_STUB,
    COFF_SIZE,
    PE32_MAGIC,
    PE32PLUS_MAGIC,
    SCN_CNT_CODE,
    SCN_CNT_INITIALIZED_DATA,
    SCN_MEM_EXECUTE,
    SCN_MEM_READ,
    SCN_MEM_WRITE,
    SECTION_HEADER_SIZE,
    align_up,
)

# The fixed prefix of a classic DOS header (e_magic .. e_ovno), as emitted by MSVC.
_DOS_PREFIX = bytes.fromhex("4d5a90000300000004000000ffff0000b8000000000000004000")

CODE = SCN_CNT_CODE | SCN_MEM_EXECUTE | SCN_MEM_READ
RDATA = SCN_CNT_INITIALIZED_DATA | SCN_MEM_READ
DATA = SCN_CNT_INITIALIZED_DATA | SCN_MEM_READ | SCN_MEM_WRITE

BENIGN_PHRASES = [
    b"Copyright (C) Microsoft Corporation. All rights reserved. ",
    b"GetProcAddress LoadLibraryA ExitProcess ",
    b"Software\\Microsoft\\Windows\\CurrentVersion ",
    b"kernel32.dll user32.dll advapi32.dll ",
    b"Please select a file to open. ",
    b"The operation completed successfully. ",
    b"<assembly xmlns='urn:schemas-microsoft-com:asm.v1'> ",
]

ODD_NAMES = [b"UPX0", b"UPX1", b".packed", b".xyz", b".evil", b"kkr0", b".mpress", b".adata"]
STANDARD_NAMES = [b".text", b".rdata", b".data", b".rsrc", b".reloc"]


class InvalidSpec(ValueError):
    pass


@dataclass(frozen=True)
class SectionSpec:
    name: bytes
    virtual_size: int
    raw_size: int
    characteristics: int = DATA
    entropy: str = "high"  # "high" | "low"


@dataclass(frozen=True)
class GenSpec:
    sections: Sequence[SectionSpec]
    stub: Optional[bytes] = None  # None: canonical "This program cannot be run" stub
    overlay_len: int = 0
    seed: int = 0
    file_alignment: int = 0x200
    section_alignment: int = 0x1000
    # Zeroed bytes guaranteed after the section table; None packs the table
    # flush against SizeOfHeaders so no entry can be added.
    header_slack: Optional[int] = 0x80
    pe32plus: bool = False
    checksum: int = 0
    padding_runs: bool = True


def _content(rng: np.random.Generator, n: int, entropy: str) -> bytearray:
    if entropy == "high":
        return bytearray(rng.integers(0, 256, n, dtype=np.uint8).tobytes())
    out = bytearray()
    while len(out) < n:
        out += BENIGN_PHRASES[int(rng.integers(len(BENIGN_PHRASES)))]
    return out[:n]


def _insert_padding_runs(rng: np.random.Generator, buf: bytearray) -> None:
    if len(buf) < 32:
        return
    for _ in range(int(rng.integers(1, 5))):
        length = int(rng.integers(2, 17))
        pos = int(rng.integers(0, len(buf) - length))
        fill = 0x90 if rng.random() < 0.5 else 0xCC
        buf[pos:pos + length] = bytes([fill]) * length
    # always finish the code with an alignment run
    buf[-3:] = b"\x90\x90\x90"


def _optional_header(spec: GenSpec, entry: int, size_of_image: int, size_of_headers: int,
                     code_size: int, data_size: int) -> bytes:
    common = dict(sa=spec.section_alignment, fa=spec.file_alignment)
    dirs = bytes(16 * 8)
    if spec.pe32plus:
        head = struct.pack(
            "<HBBIIIIIQIIHHHHHHIIIIHHQQQQII",
            PE32PLUS_MAGIC, 14, 0, code_size, data_size, 0, entry, 0x1000,
            0x140000000, common["sa"], common["fa"], 6, 0, 0, 0, 6, 0, 0,
            size_of_image, size_of_headers, spec.checksum, 2, 0x8160,
            0x100000, 0x1000, 0x100000, 0x1000, 0, 16,
        )
    else:
        head = struct.pack(
            "<HBBIIIIIIIIIHHHHHHIIIIHHIIIIII",
            PE32_MAGIC, 14, 0, code_size, data_size, 0, entry, 0x1000, 0x2000,
            0x400000, common["sa"], common["fa"], 6, 0, 0, 0, 6, 0, 0,
            size_of_image, size_of_headers, spec.checksum, 2, 0x8140,
            0x100000, 0x1000, 0x100000, 0x1000, 0, 16,
        )
    return head + dirs


def _validate(spec: GenSpec) -> None:
    fa, sa = spec.file_alignment, spec.section_alignment
    for a in (fa, sa):
        if a <= 0 or a & (a - 1):
            raise InvalidSpec("alignments must be powers of two")
    if sa < fa:
        raise InvalidSpec("section_alignment < file_alignment")
    if not spec.sections:
        raise InvalidSpec("at least one section required")
    for s in spec.sections:
        if len(s.name) > 8:
            raise InvalidSpec(f"section name too long: {s.name!r}")
        if s.raw_size < 0 or s.virtual_size < 0 or s.raw_size % fa:
            raise InvalidSpec("raw_size must be a non-negative multiple of file_alignment")
        if s.entropy not in ("high", "low"):
            raise InvalidSpec(f"unknown entropy profile {s.entropy!r}")
    if spec.overlay_len < 0:
        raise InvalidSpec("negative overlay length")


def generate(spec: GenSpec) -> bytes:
    """Build the file described by ``spec``; same spec gives the same bytes."""
    _validate(spec)
    rng = np.random.default_rng(spec.seed)
    fa, sa = spec.file_alignment, spec.section_alignment
    n = len(spec.sections)
    stub = CANONICAL_STUB if spec.stub is None else spec.stub
    opt_size = 240 if spec.pe32plus else 224
    fixed = 4 + COFF_SIZE + opt_size + SECTION_HEADER_SIZE * n

    if spec.header_slack is None:
        e_lfanew = align_up(fixed + 0x40 + len(stub), fa) - fixed
        size_of_headers = e_lfanew + fixed
    else:
        e_lfanew = align_up(0x40 + len(stub), 8)
        size_of_headers = align_up(e_lfanew + fixed + spec.header_slack, fa)

    # layout
    raw_ptr = size_of_headers
    va = align_up(size_of_headers, sa)
    layout = []
    for s in spec.sections:
        layout.append((s, va, raw_ptr if s.raw_size else 0))
        raw_ptr += s.raw_size
        va = align_up(va + max(s.virtual_size, s.raw_size, 1), sa)
    size_of_image = va
    entry_sec = next((x for x in layout if x[0].characteristics & SCN_MEM_EXECUTE), layout[0])
    entry = entry_sec[1]
    code_size = sum(s.raw_size for s in spec.sections if s.characteristics & SCN_CNT_CODE)
    data_size = sum(s.raw_size for s in spec.sections) - code_size

    buf = bytearray(size_of_headers)
    buf[:len(_DOS_PREFIX)] = _DOS_PREFIX
    struct.pack_into("<I", buf, 0x3C, e_lfanew)
    buf[0x40:0x40 + len(stub)] = stub
    coff = struct.pack("<4sHHIIIHH", b"PE\0\0", 0x8664 if spec.pe32plus else 0x14C,
                       n, 0x5F5E1000 + spec.seed % 1000, 0, 0, opt_size,
                       0x22 if spec.pe32plus else 0x102)
    off = e_lfanew
    buf[off:off + len(coff)] = coff
    off += len(coff)
    opt = _optional_header(spec, entry, size_of_image, size_of_headers, code_size, data_size)
    buf[off:off + opt_size] = opt
    off += opt_size
    for s, sva, sptr in layout:
        hdr = struct.pack("<8sIIIIIIHHI", s.name.ljust(8, b"\0"), s.virtual_size, sva,
                          s.raw_size, sptr, 0, 0, 0, 0, s.characteristics)
        buf[off:off + SECTION_HEADER_SIZE] = hdr
        off += SECTION_HEADER_SIZE

    for s, _, _ in layout:
        mapped = min(s.virtual_size, s.raw_size) if s.virtual_size else s.raw_size
        body = _content(rng, mapped, s.entropy)
        if spec.padding_runs and s.characteristics & SCN_MEM_EXECUTE:
            _insert_padding_runs(rng, body)
        buf += body + bytes(s.raw_size - mapped)
    buf += rng.integers(0, 256, spec.overlay_len, dtype=np.uint8).tobytes()
    return bytes(buf)


def _profile_spec(profile: str, seed: int) -> GenSpec:
    rng = np.random.default_rng([seed, 0x5EED])
    fa = 0x200
    if profile == "benign":
        names = [b".text", b".rdata", b".data", b".rsrc"][: int(rng.integers(2, 5))]
        secs = []
        for i, name in enumerate(names):
            raw = fa * int(rng.integers(4, 13))
            vs = raw - int(rng.integers(0, 0x100))
            secs.append(SectionSpec(name, vs, raw, CODE if i == 0 else RDATA, "low"))
        return GenSpec(tuple(secs), None, 0, seed, fa, 0x1000, int(rng.integers(0x80, 0x200)))

    if profile not in ("malicious", "tight"):
        raise InvalidSpec(f"unknown profile {profile!r}")
    nsec = int(rng.integers(2, 4))
    picks = rng.choice(len(ODD_NAMES), nsec, replace=False)
    secs = []
    for i, k in enumerate(picks):
        raw = fa * int(rng.integers(6, 17))
        slack = int(rng.integers(0x40, 0x300))
        secs.append(SectionSpec(ODD_NAMES[int(k)], raw - slack, raw, CODE if i == 0 else DATA, "high"))
    stub = rng.integers(0, 256, int(rng.integers(0x20, 0x80)), dtype=np.uint8).tobytes()
    slack = None if profile == "tight" else int(rng.integers(0x80, 0x180))
    return GenSpec(tuple(secs), stub, 0, seed, fa, 0x1000, slack, bool(rng.random() < 0.3),
                   checksum=int(rng.integers(0, 2**32)))


def profile_spec(profile: str, seed: int) -> GenSpec:
    """GenSpec for ``profile`` ("benign", "malicious" or "tight").

    "tight" is the malicious profile with no header slack; SectionAdd always
    fails on it with NoHeaderRoom.
    """
    return _profile_spec(profile, seed)


def random_spec(seed: int) -> GenSpec:
    """A varied but valid GenSpec, for property tests and fuzzing."""
    rng = np.random.default_rng([seed, 0xF022])
    fa = int(rng.choice([0x200, 0x400, 0x1000]))
    sa = max(fa, int(rng.choice([0x1000, 0x2000])))
    secs = []
    for i in range(int(rng.integers(1, 6))):
        raw = fa * int(rng.integers(0, 5))
        mode = rng.integers(4)
        if mode == 0:
            vs = raw
        elif mode == 1:
            vs = 0
        elif mode == 2:
            vs = raw + int(rng.integers(1, 0x2000))
        else:
            vs = max(1, raw - int(rng.integers(0, max(1, raw))))
        name_pool = STANDARD_NAMES + ODD_NAMES
        name = name_pool[int(rng.integers(len(name_pool)))]
        chars = CODE if i == 0 or rng.random() < 0.2 else (DATA if rng.random() < 0.5 else RDATA)
        secs.append(SectionSpec(name, vs, raw, chars, "high" if rng.random() < 0.5 else "low"))
    stub = None
    if rng.random() < 0.5:
        stub = rng.integers(0, 256, int(rng.integers(0, 0x100)), dtype=np.uint8).tobytes()
    header_slack = None if rng.random() < 0.2 else int(rng.integers(0, 0x300))
    overlay = 0 if rng.random() < 0.5 else int(rng.integers(1, 0x800))
    return GenSpec(tuple(secs), stub, overlay, seed, fa, sa, header_slack,
                   bool(rng.random() < 0.5), int(rng.integers(0, 2)) * int(rng.integers(0, 2**32)),
                   bool(rng.random() < 0.8))


def generate_suite(count: int, profile: str = "malicious", seed: int = 0) -> list[bytes]:
    """``count`` distinct files that all score on the profile's side of 0.5.

    Candidates that land on the wrong side (rare) are skipped, so the result
    is still a deterministic function of (count, profile, seed).
    """
    from .oracle import builtin_score
    from .pe import parse_pe

    if count < 1:
        raise InvalidSpec("count must be >= 1")
    want_high = profile != "benign"
    out: list[bytes] = []
    seen = set()
    k = 0
    while len(out) < count:
        data = generate(_profile_spec(profile, seed * 1_000_003 + k))
        k += 1
        if k > count * 20:
            raise InvalidSpec(f"profile {profile!r} cannot produce {count} files")
        score = builtin_score(parse_pe(data))
        fits = score >= 0.6 if want_high else score <= 0.4
        if not fits or data in seen:
            continue
        seen.add(data)
        out.append(data)
    return out


def write_suite(files: Sequence[bytes], outdir: Union[str, Path], prefix: str = "sample") -> list[Path]:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, data in enumerate(files):
        p = outdir / f"{prefix}_{i:04d}.exe"
        p.write_bytes(data)
        paths.append(p)
    return paths
